"""All utils that require pygame"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

os.environ.setdefault('PYGAME_HIDE_SUPPORT_PROMPT', '1')
os.environ.setdefault('SDL_VIDEODRIVER', 'dummy')

import pygame as pg  # noqa: E402

GRAY_PALETTE = [(i, i, i) for i in range(256)]


def rect_from_size(size: tuple[float, float], **kwargs) -> pg.Rect:
    rect = pg.Rect((0, 0), (round(size[0]), round(size[1])))
    for k, v in kwargs.items():
        setattr(rect, k, v)
    return rect


def surface_from_rgb(rgb: np.ndarray) -> pg.Surface:
    """HxWx3 uint8 -> 24-bit surface (pygame arrays are indexed [x, y])"""
    return pg.surfarray.make_surface(np.ascontiguousarray(rgb.transpose(1, 0, 2)))


def rgb_from_surface(surf: pg.Surface) -> np.ndarray:
    return pg.surfarray.array3d(surf).transpose(1, 0, 2).copy()


def index_surface(height: int, width: int, fill: int = 0) -> pg.Surface:
    """8-bit surface whose pixel values are class indices"""
    surf = pg.Surface((width, height), depth=8)
    surf.set_palette(GRAY_PALETTE)
    surf.fill(fill)
    return surf


def indices_from_surface(surf: pg.Surface) -> np.ndarray:
    if surf.get_bitsize() == 8:
        return pg.surfarray.array2d(surf).T.astype(np.int64)
    # gray palette got expanded on load, any channel holds the index
    return pg.surfarray.array3d(surf)[..., 0].T.astype(np.int64)


def draw_rect(surf: pg.Surface, value: int, center: tuple[float, float],
              size: tuple[float, float]) -> pg.Rect:
    rect = rect_from_size(size, center=(round(center[0]), round(center[1])))
    return pg.draw.rect(surf, value, rect)


def draw_disc(surf: pg.Surface, value: int, center: tuple[float, float],
              radius: float) -> pg.Rect:
    return pg.draw.circle(surf, value, (round(center[0]), round(center[1])),
                          max(1, round(radius)))


def save_rgb_png(rgb: np.ndarray, path: str | Path):
    pg.image.save(surface_from_rgb(rgb), str(path))


def load_rgb_png(path: str | Path) -> np.ndarray:
    return rgb_from_surface(pg.image.load(str(path)))


def save_index_png(indices: np.ndarray, path: str | Path):
    if indices.min() < 0 or indices.max() > 255:
        raise ValueError("index PNGs hold values in [0, 255]")
    h, w = indices.shape
    surf = index_surface(h, w)
    pg.surfarray.blit_array(surf, np.ascontiguousarray(indices.T.astype(np.uint8)))
    pg.image.save(surf, str(path))


def load_index_png(path: str | Path) -> np.ndarray:
    return indices_from_surface(pg.image.load(str(path)))


def save_class_png(indices: np.ndarray, colors: list[tuple[int, int, int]], path: str | Path,
                   ignore_index: int = 255, ignore_color: tuple[int, int, int] = (0, 0, 0)):
    """Class map as a palette PNG, class i drawn in colors[i]"""
    if len(colors) > ignore_index:
        raise ValueError(f"{len(colors)} colors collide with ignore index {ignore_index}")
    palette = list(GRAY_PALETTE)
    palette[:len(colors)] = [tuple(c) for c in colors]
    palette[ignore_index] = ignore_color
    h, w = indices.shape
    surf = index_surface(h, w)
    surf.set_palette(palette)
    pg.surfarray.blit_array(surf, np.ascontiguousarray(indices.T.astype(np.uint8)))
    pg.image.save(surf, str(path))
