"""Small encoder-decoder segmentation net with a feature tap, plus the
training-only projection head and the flat checkpoint format."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn, Tensor

from imagecore import Image
from util import ValidationError, fmt_size

log = logging.getLogger('ccdistill.segnet')

DTYPE = torch.float64
WIDTH = 8
TAP_CHANNELS = 16
EMBED_DIM = 64  # 256 in the full-scale setting
NORM_EPS = 1e-8
TAP_LAYERS = ('enc3', 'enc2')


class SegNet(nn.Module):
    """3 conv encoder (two stride-2 steps down to H/4), 2 conv decoder at
    H/2, 1x1 classifier whose logits are upsampled to H. No batch norm,
    so there is no train/eval divergence."""

    def __init__(self, num_classes: int, width: int = WIDTH,
                 tap_channels: int = TAP_CHANNELS, tap_layer: str = 'enc3'):
        super().__init__()
        if tap_layer not in TAP_LAYERS:
            raise ValidationError(f"tap_layer must be one of {TAP_LAYERS}, got {tap_layer!r}")
        self.num_classes = num_classes
        self.tap_layer = tap_layer
        self.enc1 = nn.Conv2d(3, width, 3, stride=2, padding=1)
        self.enc2 = nn.Conv2d(width, tap_channels, 3, stride=2, padding=1)
        self.enc3 = nn.Conv2d(tap_channels, tap_channels, 3, padding=1)
        self.dec1 = nn.Conv2d(tap_channels, 2 * width, 3, padding=1)
        self.dec2 = nn.Conv2d(2 * width, width, 3, padding=1)
        self.classifier = nn.Conv2d(width, num_classes, 1)

    @classmethod
    def create(cls, num_classes: int, seed: int, **kwargs) -> SegNet:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            return cls(num_classes, **kwargs).to(DTYPE)

    @property
    def tap_channels(self) -> int:
        return self.enc3.out_channels

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """(N, 3, H, W) -> logits (N, K, H, W), tapped feature (N, C, H/4, W/4)"""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValidationError(f"expected an (N, 3, H, W) batch, got {tuple(x.shape)}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ValidationError(f"image size must be divisible by 4, got {tuple(x.shape[2:])}")
        f1 = F.relu(self.enc1(x))
        f2 = F.relu(self.enc2(f1))
        f3 = F.relu(self.enc3(f2))
        d = F.relu(self.dec1(_up2(f3)))
        d = F.relu(self.dec2(d))
        logits = _up2(self.classifier(d))
        return logits, (f3 if self.tap_layer == 'enc3' else f2)


def _up2(x: Tensor) -> Tensor:
    return F.interpolate(x, scale_factor=2, mode='bilinear', align_corners=False)


class ProjectHead(nn.Module):
    """1x1 conv -> ReLU -> 1x1 conv -> per-position l2 normalisation"""

    def __init__(self, in_channels: int, embed_dim: int = EMBED_DIM,
                 hidden: int | None = None):
        super().__init__()
        hidden = hidden or in_channels
        self.conv1 = nn.Conv2d(in_channels, hidden, 1)
        self.conv2 = nn.Conv2d(hidden, embed_dim, 1)

    @classmethod
    def create(cls, in_channels: int, seed: int, **kwargs) -> ProjectHead:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            return cls(in_channels, **kwargs).to(DTYPE)

    def forward(self, feature: Tensor) -> Tensor:
        return l2_normalize(self.conv2(F.relu(self.conv1(feature))))


def l2_normalize(x: Tensor) -> Tensor:
    # zero columns stay zero
    return F.normalize(x, p=2.0, dim=1, eps=NORM_EPS)


def project_head(head: ProjectHead | None, feature: Tensor) -> Tensor:
    """Content embedding of `feature`; with no head the feature itself
    is normalised (the "without projection head" variant)"""
    if head is None:
        return l2_normalize(feature)
    return head(feature)


def images_to_tensor(images: Sequence[Image]) -> Tensor:
    arr = np.stack([im.pixels for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous().to(DTYPE)


def backward(loss: Tensor, params: Mapping[str, Tensor], retain_graph: bool = False
             ) -> dict[str, Tensor]:
    """Reverse-mode gradients of scalar `loss` for every named parameter;
    parameters the loss does not touch get zeros"""
    if loss.numel() != 1:
        raise ValidationError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    names = list(params)
    if not loss.requires_grad:
        return {n: torch.zeros_like(params[n]) for n in names}
    grads = torch.autograd.grad(loss.reshape(()), [params[n] for n in names],
                                retain_graph=retain_graph, allow_unused=True)
    return {n: torch.zeros_like(params[n]) if g is None else g
            for n, g in zip(names, grads)}


@torch.no_grad()
def predict(model: SegNet, images: Sequence[Image], batch: int = 16) -> list[np.ndarray]:
    out = []
    for i in range(0, len(images), batch):
        logits, _ = model(images_to_tensor(images[i:i + batch]))
        out += list(logits.argmax(dim=1).numpy())
    return out


def _stem(path: str | Path) -> Path:
    p = Path(path)
    return p.with_suffix('') if p.suffix in ('.bin', '.json') else p


def save_checkpoint(path: str | Path, tensors: Mapping[str, Tensor], meta: dict) -> Path:
    """`<stem>.bin` holds every tensor as little-endian float64, back to
    back; `<stem>.json` holds names, shapes, offsets and `meta`"""
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, t in tensors.items():
        a = t.detach().cpu().numpy().astype('<f8', copy=False).ravel()
        entries.append({'name': name, 'shape': list(t.shape), 'offset': offset,
                        'numel': int(a.size)})
        offset += a.size
        chunks.append(a)
    data = np.concatenate(chunks) if chunks else np.zeros(0, '<f8')
    stem.with_suffix('.bin').write_bytes(data.tobytes())
    stem.with_suffix('.json').write_text(json.dumps(
        {'dtype': 'float64', 'byteorder': 'little', 'tensors': entries, 'meta': meta},
        indent=1))
    log.debug(f"Saved checkpoint {stem} ({fmt_size(data.nbytes)})")
    return stem


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    stem = _stem(path)
    if not stem.with_suffix('.json').is_file() or not stem.with_suffix('.bin').is_file():
        raise FileNotFoundError(f"no checkpoint at {stem}(.json|.bin)")
    manifest = json.loads(stem.with_suffix('.json').read_text())
    data = np.frombuffer(stem.with_suffix('.bin').read_bytes(), dtype='<f8')
    tensors = {}
    for e in manifest['tensors']:
        a = data[e['offset']:e['offset'] + e['numel']].reshape(e['shape'])
        tensors[e['name']] = torch.from_numpy(a.astype(np.float64))
    return tensors, manifest['meta']


def module_tensors(prefix: str, module: nn.Module) -> dict[str, Tensor]:
    return {f'{prefix}.{n}': p for n, p in module.named_parameters()}


@torch.no_grad()
def load_module(prefix: str, module: nn.Module, tensors: Mapping[str, Tensor]):
    for n, p in module.named_parameters():
        key = f'{prefix}.{n}'
        if key not in tensors:
            raise KeyError(f"checkpoint has no tensor {key}")
        if tuple(tensors[key].shape) != tuple(p.shape):
            raise ValidationError(
                f"{key}: checkpoint shape {tuple(tensors[key].shape)} != {tuple(p.shape)}")
        p.copy_(tensors[key])
