from unittest import TestCase

import numpy as np
import numpy.testing as npt
from skimage.color import rgb2lab

from imagecore import (Image, ColorSpace, LabelMap, ChannelStats, rgb_to_lab, lab_to_rgb,
                       lab_to_rgb_clamped, channel_stats, pooled_stats, lab_moment_match,
                       lab_moment_match_report, moment_match_all, IGNORE_INDEX)
from util import ValidationError


def solid(rgb, h=2, w=2) -> Image:
    return Image(np.broadcast_to(np.asarray(rgb, dtype=np.float64), (h, w, 3)))


def random_image(rng: np.random.Generator, h=16, w=16) -> Image:
    return Image(rng.uniform(0.0, 1.0, (h, w, 3)))


class TestImage(TestCase):
    def test_rejects_bad_shape(self):
        for shape in ((4, 4), (4, 4, 4), (0, 3, 3)):
            with self.subTest(shape=shape):
                with self.assertRaises(ValidationError):
                    Image(np.zeros(shape))

    def test_rejects_out_of_range(self):
        with self.assertRaises(ValidationError):
            Image(np.full((2, 2, 3), 1.1))
        with self.assertRaises(ValidationError):
            Image(np.full((2, 2, 3), 120.0), ColorSpace.LAB)

    def test_rejects_nan(self):
        px = np.zeros((2, 2, 3))
        px[0, 0, 0] = np.nan
        with self.assertRaises(ValidationError):
            Image(px)

    def test_pixels_read_only_copy(self):
        src = np.zeros((2, 2, 3))
        img = Image(src)
        src[0, 0, 0] = 1.0
        self.assertEqual(img.pixels[0, 0, 0], 0.0)
        with self.assertRaises(ValueError):
            img.pixels[0, 0, 0] = 1.0

    def test_uint8(self):
        arr = np.array([[[0, 128, 255]]], dtype=np.uint8)
        img = Image.from_uint8(arr)
        npt.assert_allclose(img.pixels[0, 0], [0.0, 128 / 255, 1.0])
        npt.assert_array_equal(img.to_uint8(), arr)


class TestLabelMap(TestCase):
    def test_valid(self):
        lm = LabelMap(np.array([[0, 1], [IGNORE_INDEX, 2]]), 3)
        self.assertEqual(lm.shape, (2, 2))

    def test_out_of_range(self):
        with self.assertRaises(ValidationError):
            LabelMap(np.array([[0, 3]]), 3)

    def test_ignore_index_collision(self):
        with self.assertRaises(ValidationError):
            LabelMap(np.array([[0]]), 3, ignore_index=2)


class TestRgbToLab(TestCase):
    def test_mid_gray(self):
        lab = rgb_to_lab(solid((0.5, 0.5, 0.5))).pixels[0, 0]
        reference = rgb2lab(np.full((1, 1, 3), 0.5))[0, 0]
        self.assertAlmostEqual(lab[0], reference[0], delta=1e-3)
        self.assertAlmostEqual(lab[1], 0.0, delta=1e-6)
        self.assertAlmostEqual(lab[2], 0.0, delta=1e-6)

    def test_white_and_black(self):
        white = rgb_to_lab(solid((1, 1, 1))).pixels[0, 0]
        npt.assert_allclose(white, [100.0, 0.0, 0.0], atol=1e-9)
        black = rgb_to_lab(solid((0, 0, 0))).pixels[0, 0]
        npt.assert_allclose(black, [0.0, 0.0, 0.0], atol=1e-9)

    def test_pure_red(self):
        lab = rgb_to_lab(solid((1, 0, 0))).pixels[0, 0]
        self.assertAlmostEqual(lab[0], 53.24, delta=0.02)
        self.assertAlmostEqual(lab[1], 80.09, delta=0.05)
        self.assertAlmostEqual(lab[2], 67.20, delta=0.05)

    def test_agrees_with_skimage(self):
        rgb = np.random.default_rng(5).uniform(0, 1, (8, 8, 3))
        ours = rgb_to_lab(Image(rgb)).pixels
        reference = rgb2lab(rgb)
        npt.assert_allclose(ours[..., 0], reference[..., 0], atol=1e-2)
        npt.assert_allclose(ours[..., 1:], reference[..., 1:], atol=5e-2)

    def test_needs_srgb(self):
        lab = rgb_to_lab(solid((0.2, 0.3, 0.4)))
        with self.assertRaises(ValidationError):
            rgb_to_lab(lab)

    def test_round_trip(self):
        img = random_image(np.random.default_rng(0), 32, 32)
        back, n_clamped = lab_to_rgb_clamped(rgb_to_lab(img))
        self.assertEqual(n_clamped, 0)
        self.assertLess(np.abs(back.pixels - img.pixels).max(), 1e-6)


class TestLabToRgb(TestCase):
    def test_out_of_gamut_is_clamped(self):
        lab = Image(np.broadcast_to([50.0, 127.0, -128.0], (2, 2, 3)), ColorSpace.LAB)
        rgb, n_clamped = lab_to_rgb_clamped(lab)
        self.assertGreater(n_clamped, 0)
        self.assertTrue(((rgb.pixels >= 0) & (rgb.pixels <= 1)).all())

    def test_needs_lab(self):
        with self.assertRaises(ValidationError):
            lab_to_rgb(solid((0.1, 0.1, 0.1)))


class TestChannelStats(TestCase):
    def test_constant_image(self):
        s = channel_stats(rgb_to_lab(solid((0.5, 0.5, 0.5))))
        npt.assert_allclose(s.std, [0, 0, 0], atol=1e-12)

    def test_needs_lab(self):
        with self.assertRaises(ValidationError):
            channel_stats(solid((0.5, 0.5, 0.5)))

    def test_population_std(self):
        px = np.zeros((1, 2, 3))
        px[0, 1, 0] = 10.0
        s = channel_stats(Image(px, ColorSpace.LAB))
        self.assertAlmostEqual(s.mean[0], 5.0)
        self.assertAlmostEqual(s.std[0], 5.0)

    def test_rejects_negative_std(self):
        with self.assertRaises(ValidationError):
            ChannelStats((0, 0, 0), (1, -1, 1))

    def test_dict(self):
        s = ChannelStats((1, 2, 3), (4, 5, 6))
        self.assertEqual(ChannelStats.from_dict(s.to_dict()), s)

    def test_pooled_over_images(self):
        rng = np.random.default_rng(1)
        images = [random_image(rng, 4, 4) for _ in range(3)]
        pooled = pooled_stats(images)
        labs = np.concatenate([rgb_to_lab(im).pixels.reshape(-1, 3) for im in images])
        npt.assert_allclose(pooled.mean, labs.mean(axis=0))
        npt.assert_allclose(pooled.std, labs.std(axis=0))

    def test_permutation_invariant(self):
        rng = np.random.default_rng(6)
        lab = rgb_to_lab(random_image(rng, 6, 6)).pixels.reshape(-1, 3)
        shuffled = lab[rng.permutation(len(lab))].reshape(6, 6, 3)
        a = channel_stats(Image(lab.reshape(6, 6, 3), ColorSpace.LAB))
        b = channel_stats(Image(shuffled, ColorSpace.LAB))
        npt.assert_allclose(a.mean, b.mean, atol=1e-12)
        npt.assert_allclose(a.std, b.std, atol=1e-12)

    def test_pooled_empty(self):
        with self.assertRaises(ValidationError):
            pooled_stats([])


class TestMomentMatch(TestCase):
    def test_self_target_is_identity(self):
        img = random_image(np.random.default_rng(2))
        out = lab_moment_match(img, channel_stats(rgb_to_lab(img)))
        npt.assert_allclose(out.pixels, img.pixels, atol=1e-6)

    def test_matches_target_stats_before_clamp(self):
        rng = np.random.default_rng(3)
        target = ChannelStats((30.0, 5.0, -8.0), (12.0, 6.0, 9.0))
        for i in range(5):
            with self.subTest(i=i):
                report = lab_moment_match_report(random_image(rng), target)
                flat = report.matched_lab.reshape(-1, 3)
                npt.assert_allclose(flat.mean(axis=0), target.mean, atol=1e-6)
                npt.assert_allclose(flat.std(axis=0), target.std, atol=1e-6)
                self.assertGreaterEqual(report.clamp_fraction, 0.0)
                self.assertLessEqual(report.clamp_fraction, 1.0)

    def test_idempotent(self):
        rng = np.random.default_rng(7)
        img = Image(rng.uniform(0.3, 0.7, (16, 16, 3)))
        own = channel_stats(rgb_to_lab(img))
        target = ChannelStats((own.mean[0] - 5.0, own.mean[1], own.mean[2]),
                              tuple(0.9 * s for s in own.std))
        once = lab_moment_match_report(img, target)
        self.assertEqual(once.clamp_fraction, 0.0)
        twice = lab_moment_match(once.image, target)
        npt.assert_allclose(twice.pixels, once.image.pixels, atol=1e-6)

    def test_constant_source(self):
        target = ChannelStats((40.0, 0.0, 0.0), (10.0, 1.0, 1.0))
        report = lab_moment_match_report(solid((0.3, 0.3, 0.3), 4, 4), target)
        flat = report.matched_lab.reshape(-1, 3)
        npt.assert_allclose(flat.mean(axis=0), target.mean, atol=1e-6)
        npt.assert_allclose(flat.std(axis=0), 0.0, atol=1e-6)

    def test_all(self):
        rng = np.random.default_rng(4)
        sources = [random_image(rng, 8, 8) for _ in range(4)]
        target = pooled_stats([random_image(rng, 8, 8)])
        reports = moment_match_all(sources, target)
        self.assertEqual(len(reports), 4)
        pooled = np.concatenate([r.matched_lab.reshape(-1, 3) for r in reports])
        npt.assert_allclose(pooled.mean(axis=0), target.mean, atol=1e-6)
        npt.assert_allclose(pooled.std(axis=0), target.std, atol=1e-6)
