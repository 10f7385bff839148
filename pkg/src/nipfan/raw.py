"""Raw sensor data: synthesis from RGB, preprocessing, and the reference ISP.

The reference ISP (bilinear demosaic, fixed color matrix, gamma 2.2) produces
the targets that neural pipelines learn to reproduce.  Synthetic raw frames
are obtained by running that ISP backwards on ordinary 8-bit photographs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import InputError, ShapeError

# Packed channel colors for the 2x2 cell positions (0,0), (0,1), (1,0), (1,1).
CFA_LAYOUTS = {
    "RGGB": (0, 1, 1, 2),
    "GBRG": (1, 2, 0, 1),
}

# Camera RGB -> output RGB; rows sum to 1 so neutral stays neutral.
COLOR_MATRIX = np.array([
    [1.60, -0.40, -0.20],
    [-0.25, 1.50, -0.25],
    [0.00, -0.50, 1.50],
])
GAMMA = 2.2

DEFAULT_BLACK = 64 / 1023
DEFAULT_SATURATION = 1.0
DEFAULT_WB = (2.0, 1.0, 1.6)

# Bilinear interpolation kernels applied to the zero-filled color planes.
_K_GREEN = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]]) / 4.0
_K_RED_BLUE = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]]) / 4.0


@dataclass
class RawFrame:
    mosaic: np.ndarray  # [h, w, 1] raw counts
    black_level: float = DEFAULT_BLACK
    saturation: float = DEFAULT_SATURATION
    wb_gains: tuple = DEFAULT_WB
    cfa_order: str = "RGGB"

    def validate(self):
        if self.mosaic.ndim != 3 or self.mosaic.shape[2] != 1:
            raise ShapeError(f"mosaic must be [h, w, 1], got {self.mosaic.shape}")
        h, w, _ = self.mosaic.shape
        if h % 2 or w % 2:
            raise ShapeError(f"mosaic extents must be even, got {h}x{w}")
        if not self.saturation > self.black_level:
            raise InputError(f"saturation {self.saturation} must exceed black level {self.black_level}")
        if len(self.wb_gains) != 3 or min(self.wb_gains) <= 0:
            raise InputError(f"white-balance gains must be 3 positive values, got {self.wb_gains}")
        if self.cfa_order not in CFA_LAYOUTS:
            raise InputError(f"unsupported CFA order {self.cfa_order!r}")


@dataclass
class BayerStack:
    """Half-resolution packed raw measurements in ``[0, 1]``; ``data`` is ``[h/2, w/2, 4]``."""

    data: np.ndarray
    cfa_order: str = "RGGB"

    @property
    def shape(self):
        return self.data.shape


def cfa_color_map(h: int, w: int, cfa_order: str = "RGGB") -> np.ndarray:
    """Integer color index (0=R, 1=G, 2=B) of every mosaic site."""
    layout = np.array(CFA_LAYOUTS[cfa_order]).reshape(2, 2)
    return np.tile(layout, (h // 2, w // 2))


def cfa_masks(h: int, w: int, cfa_order: str = "RGGB") -> np.ndarray:
    """``[h, w, 3]`` one-hot mask of which color each site measures."""
    colors = cfa_color_map(h, w, cfa_order)
    return (colors[..., None] == np.arange(3)).astype(np.float64)


def pack(mosaic: np.ndarray) -> np.ndarray:
    """``[..., h, w]`` mosaic -> ``[..., h/2, w/2, 4]`` stack."""
    *lead, h, w = mosaic.shape
    x = mosaic.reshape(*lead, h // 2, 2, w // 2, 2)
    x = np.moveaxis(x, -3, -2)
    return x.reshape(*lead, h // 2, w // 2, 4)


def unpack(stack: np.ndarray) -> np.ndarray:
    """Inverse of :func:`pack`."""
    *lead, h2, w2, _ = stack.shape
    x = stack.reshape(*lead, h2, w2, 2, 2)
    x = np.moveaxis(x, -2, -3)
    return x.reshape(*lead, 2 * h2, 2 * w2)


def preprocess_raw(frame: RawFrame) -> BayerStack:
    """Black-level subtraction, saturation normalization, white balance and packing."""
    frame.validate()
    counts = frame.mosaic[..., 0].astype(np.float64)
    norm = np.clip((counts - frame.black_level) / (frame.saturation - frame.black_level), 0.0, 1.0)
    gains = np.asarray(frame.wb_gains, dtype=np.float64)
    norm = np.clip(norm * gains[cfa_color_map(*norm.shape, frame.cfa_order)], 0.0, 1.0)
    return BayerStack(pack(norm).astype(np.float32), frame.cfa_order)


def sparse_planes(stack: np.ndarray, cfa_order: str = "RGGB", border: int = 1) -> np.ndarray:
    """Edge-pad the packed stack by ``border`` cells, unpack, and split into zero-filled color planes."""
    widths = [(0, 0)] * (stack.ndim - 3) + [(border, border), (border, border), (0, 0)]
    mosaic = unpack(np.pad(stack, widths, mode="edge"))
    h, w = mosaic.shape[-2:]
    return mosaic[..., None] * cfa_masks(h, w, cfa_order)


def bilinear_kernel5() -> np.ndarray:
    """``[5, 5, 3, 3]`` kernel performing bilinear demosaicing on sparse color planes."""
    k = np.zeros((5, 5, 3, 3))
    k[1:4, 1:4, 0, 0] = _K_RED_BLUE
    k[1:4, 1:4, 1, 1] = _K_GREEN
    k[1:4, 1:4, 2, 2] = _K_RED_BLUE
    return k


def bilinear_demosaic(stack: np.ndarray, cfa_order: str = "RGGB") -> np.ndarray:
    """Full-resolution linear RGB from a packed stack (edge-replicated borders)."""
    planes = sparse_planes(np.asarray(stack, dtype=np.float64), cfa_order)
    h, w = planes.shape[-3] - 4, planes.shape[-2] - 4
    out = np.zeros(planes.shape[:-3] + (h, w, 3))
    for c, kern in enumerate((_K_RED_BLUE, _K_GREEN, _K_RED_BLUE)):
        for i in range(3):
            for j in range(3):
                if kern[i, j]:
                    out[..., c] += kern[i, j] * planes[..., 1 + i:1 + i + h, 1 + j:1 + j + w, c]
    return out


def reference_develop(stack, cfa_order: str | None = None) -> np.ndarray:
    """Bilinear demosaic, color matrix, clip, gamma ``x ** (1/2.2)``; output ``[h, w, 3]`` in ``[0, 1]``."""
    if isinstance(stack, BayerStack):
        cfa_order = stack.cfa_order if cfa_order is None else cfa_order
        stack = stack.data
    cfa_order = cfa_order or "RGGB"
    if stack.shape[-1] != 4:
        raise ShapeError(f"expected packed [..., h/2, w/2, 4] stack, got {stack.shape}")
    rgb = bilinear_demosaic(stack, cfa_order) @ COLOR_MATRIX.T
    return np.clip(rgb, 0.0, 1.0) ** (1.0 / GAMMA)


def inverse_reference(rgb: np.ndarray) -> np.ndarray:
    """Undo gamma and the color matrix; returns linear camera RGB clipped to ``[0, 1]``."""
    linear = np.clip(rgb, 0.0, 1.0) ** GAMMA
    return np.clip(linear @ np.linalg.inv(COLOR_MATRIX).T, 0.0, 1.0)


def mosaic_from_rgb(linear: np.ndarray, cfa_order: str = "RGGB") -> np.ndarray:
    """Sample the color channel each CFA site measures; ``[h, w, 3] -> [h, w]``."""
    h, w, _ = linear.shape
    colors = cfa_color_map(h, w, cfa_order)
    return np.take_along_axis(linear, colors[..., None], axis=2)[..., 0]


@dataclass
class Sample:
    """A preprocessed raw stack with its reference-ISP target image."""

    frame: RawFrame
    stack: BayerStack
    target: np.ndarray  # [h, w, 3] float32
    name: str = ""


@dataclass
class SensorConfig:
    black_level: float = DEFAULT_BLACK
    saturation: float = DEFAULT_SATURATION
    wb_gains: tuple = DEFAULT_WB
    cfa_order: str = "RGGB"
    noise: float = 0.0
    extra: dict = field(default_factory=dict)


def raw_from_rgb(rgb: np.ndarray, sensor: SensorConfig | None = None, rng=None) -> RawFrame:
    """Run the reference ISP backwards on an RGB image in ``[0, 1]`` to get raw counts.

    ``sensor.noise`` is the standard deviation (in normalized units, at full
    scale) of a Gaussian approximation to shot noise.
    """
    sensor = sensor or SensorConfig()
    linear = inverse_reference(rgb)
    gains = np.asarray(sensor.wb_gains, dtype=np.float64)
    raw = mosaic_from_rgb(linear / gains, sensor.cfa_order)
    if sensor.noise > 0:
        if rng is None:
            raise InputError("noise synthesis needs an rng")
        raw = raw + rng.normal(size=raw.shape) * sensor.noise * np.sqrt(np.clip(raw, 0, None))
    counts = sensor.black_level + np.clip(raw, 0.0, 1.0) * (sensor.saturation - sensor.black_level)
    return RawFrame(counts[..., None].astype(np.float32), sensor.black_level, sensor.saturation,
                    tuple(float(g) for g in sensor.wb_gains), sensor.cfa_order)


def make_sample(frame: RawFrame, name: str = "") -> Sample:
    stack = preprocess_raw(frame)
    target = reference_develop(stack).astype(np.float32)
    return Sample(frame, stack, target, name)


def synth_dataset(sources, seed: int, count: int, patch: int, sensor: SensorConfig | None = None) -> list[Sample]:
    """Draw ``count`` random ``patch x patch`` crops from 8-bit RGB sources and turn them into raw samples.

    Deterministic given ``seed``: each sample uses its own derived generator.
    """
    if patch % 2 or patch < 32:
        raise InputError(f"patch must be even and >= 32, got {patch}")
    sources = [np.asarray(s) for s in sources]
    if not sources:
        raise InputError("no source images")
    for s in sources:
        if s.ndim != 3 or s.shape[2] != 3:
            raise InputError(f"source images must be [h, w, 3] RGB, got {s.shape}")
        if s.shape[0] < patch or s.shape[1] < patch:
            raise InputError(f"source image {s.shape[:2]} is smaller than patch {patch}")
    sensor = sensor or SensorConfig()
    seeds = np.random.SeedSequence(seed).spawn(count)
    samples = []
    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        src_index = int(rng.integers(len(sources)))
        src = sources[src_index]
        top = int(rng.integers(0, (src.shape[0] - patch) // 2 + 1)) * 2
        left = int(rng.integers(0, (src.shape[1] - patch) // 2 + 1)) * 2
        crop = src[top:top + patch, left:left + patch].astype(np.float64)
        if src.dtype == np.uint8:
            crop /= 255.0
        frame = raw_from_rgb(crop, sensor, rng)
        samples.append(make_sample(frame, name=f"s{i:05d}_src{src_index}_{top}_{left}"))
    return samples


def full_frame_sample(rgb: np.ndarray, sensor: SensorConfig | None = None, rng=None, name: str = "") -> Sample:
    """Whole-image raw sample (extents trimmed to even)."""
    rgb = np.asarray(rgb)
    h, w = rgb.shape[0] // 2 * 2, rgb.shape[1] // 2 * 2
    img = rgb[:h, :w].astype(np.float64)
    if rgb.dtype == np.uint8:
        img /= 255.0
    return make_sample(raw_from_rgb(img, sensor, rng), name)
