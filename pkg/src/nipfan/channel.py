"""Post-processing manipulations and the lossy distribution channel.

All functions take RGB tensors ``[h, w, 3]`` or ``[n, h, w, 3]`` in ``[0, 1]``
and stay differentiable (JPEG through its smooth rounding surrogate).
Filters use edge-replicated borders so flat images pass through unchanged.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import InputError, ShapeError, Tensor
from .djpeg import SINUSOIDAL, RoundingMode, djpeg_forward, quality_to_tables


class ManipulationClass(enum.IntEnum):
    NATIVE = 0
    SHARPEN = 1
    RESAMPLE = 2
    GAUSSIAN = 3
    JPEG80 = 4

    @property
    def short(self) -> str:
        return _SHORT_NAMES[self]


_SHORT_NAMES = {
    ManipulationClass.NATIVE: "native",
    ManipulationClass.SHARPEN: "sharpen",
    ManipulationClass.RESAMPLE: "resample",
    ManipulationClass.GAUSSIAN: "gaussian",
    ManipulationClass.JPEG80: "jpg",
}

# Row/column order used when reporting confusion matrices.
REPORT_ORDER = (ManipulationClass.NATIVE, ManipulationClass.SHARPEN, ManipulationClass.GAUSSIAN,
                ManipulationClass.JPEG80, ManipulationClass.RESAMPLE)
N_CLASSES = len(ManipulationClass)

SHARPEN_KERNEL = np.array([[-1, -4, -1], [-4, 26, -4], [-1, -4, -1]], dtype=np.float64) / 6.0
GAUSSIAN_SIGMA = 0.83
GAUSSIAN_SIZE = 5
JPEG_MANIPULATION_QUALITY = 80


@dataclass(frozen=True)
class ChannelConfig:
    downsample_factor: int = 2
    jpeg_quality: int = 50
    rounding: RoundingMode = field(default=SINUSOIDAL)

    def __post_init__(self):
        if int(self.downsample_factor) != self.downsample_factor or self.downsample_factor < 1:
            raise InputError(f"downsample factor must be a positive integer, got {self.downsample_factor}")
        quality_to_tables(self.jpeg_quality)


def _batched(rgb) -> tuple[Tensor, bool]:
    x = ad.as_tensor(rgb)
    if x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
        return x, True
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ShapeError(f"expected RGB [n, h, w, 3], got {x.shape}")
    return x, False


def _unbatch(x: Tensor, single: bool) -> Tensor:
    return x[0] if single else x


def filter_replicate(x: Tensor, kernel2d: np.ndarray) -> Tensor:
    """Apply the same 2-D kernel to every channel of ``[n, h, w, c]`` with replicated borders."""
    n, h, w, c = x.shape
    kh, kw = kernel2d.shape
    ph, pw = kh // 2, kw // 2
    planes = ad.reshape(ad.transpose(x, (0, 3, 1, 2)), (n * c, h, w, 1))
    planes = ad.pad(planes, [(0, 0), (ph, ph), (pw, pw), (0, 0)], mode="edge")
    out = ad.conv2d(planes, ad.tensor(kernel2d.reshape(kh, kw, 1, 1)), padding="valid")
    return ad.transpose(ad.reshape(out, (n, c, h, w)), (0, 2, 3, 1))


def sharpen(rgb) -> Tensor:
    """Unsharp mask on the HSV value channel.

    With hue and saturation held fixed, scaling V rescales all three RGB
    channels by ``V'/V``; black pixels (V = 0) become gray at ``V'``.
    """
    x, single = _batched(rgb)
    value = ad.maximum_channel(x, axis=-1, keepdims=True)
    sharpened = ad.clamp(filter_replicate(value, SHARPEN_KERNEL), 0.0, 1.0)
    positive = value.data > 0
    safe = ad.where(positive, value, 1.0)
    out = ad.where(np.broadcast_to(positive, x.shape), x * (sharpened / safe), sharpened)
    return _unbatch(ad.clamp(out, 0.0, 1.0), single)


@lru_cache(maxsize=None)
def gaussian_kernel(size: int = GAUSSIAN_SIZE, sigma: float = GAUSSIAN_SIGMA) -> np.ndarray:
    """Sampled isotropic Gaussian normalized to unit sum."""
    r = np.arange(size) - size // 2
    k = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma ** 2))
    k /= k.sum()
    k.setflags(write=False)
    return k


def gaussian(rgb) -> Tensor:
    x, single = _batched(rgb)
    return _unbatch(ad.clamp(filter_replicate(x, gaussian_kernel()), 0.0, 1.0), single)


@lru_cache(maxsize=None)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    # Half-pixel-centre bilinear weights with clamped borders.
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    m.setflags(write=False)
    return m


def resize_bilinear(rgb, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resize expressed as two matrix products."""
    x = ad.as_tensor(rgb)
    single = x.ndim == 3
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    n, h, w, c = x.shape
    rows = ad.tensor(_interp_matrix(h, out_h))
    cols = ad.tensor(_interp_matrix(w, out_w).T)
    planes = ad.transpose(x, (0, 3, 1, 2))
    planes = ad.matmul(ad.matmul(rows, planes), cols)
    return _unbatch(ad.transpose(planes, (0, 2, 3, 1)), single)


def resample(rgb) -> Tensor:
    """1:2 bilinear down-sampling followed by 2:1 bilinear up-sampling."""
    x, single = _batched(rgb)
    _, h, w, _ = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"resample needs even extents, got {h}x{w}")
    y = resize_bilinear(resize_bilinear(x, h // 2, w // 2), h, w)
    return _unbatch(ad.clamp(y, 0.0, 1.0), single)


def jpeg80(rgb) -> Tensor:
    return djpeg_forward(rgb, JPEG_MANIPULATION_QUALITY, SINUSOIDAL)


_DISPATCH = {
    ManipulationClass.SHARPEN: sharpen,
    ManipulationClass.RESAMPLE: resample,
    ManipulationClass.GAUSSIAN: gaussian,
    ManipulationClass.JPEG80: jpeg80,
}


def apply_manipulation(cls, rgb) -> Tensor:
    cls = ManipulationClass(cls)
    if cls is ManipulationClass.NATIVE:
        return ad.as_tensor(rgb)
    return _DISPATCH[cls](rgb)


def distribution_channel(rgb, cfg: ChannelConfig | None = None) -> Tensor:
    """Bilinear down-sampling by ``cfg.downsample_factor`` then JPEG at ``cfg.jpeg_quality``."""
    cfg = cfg or ChannelConfig()
    x, single = _batched(rgb)
    _, h, w, _ = x.shape
    f = cfg.downsample_factor
    if h % f or w % f:
        raise ShapeError(f"extents {h}x{w} not divisible by down-sampling factor {f}")
    if f > 1:
        x = resize_bilinear(x, h // f, w // f)
    return _unbatch(djpeg_forward(x, cfg.jpeg_quality, cfg.rounding), single)


def branch_all(rgb, cfg: ChannelConfig | None = None, channel: bool = True) -> tuple[Tensor, np.ndarray]:
    """Run a batch through every manipulation (and the channel); returns stacked images and labels.

    Output is ``[5 * n, h', w', 3]`` ordered class-major, labels ``0..4``.
    """
    x, _ = _batched(rgb)
    outs = []
    for cls in ManipulationClass:
        y = apply_manipulation(cls, x)
        outs.append(distribution_channel(y, cfg) if channel else y)
    labels = np.repeat(np.arange(N_CLASSES), x.shape[0])
    return ad.concat(outs, axis=0), labels
