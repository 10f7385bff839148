"""Differentiable JPEG (4:4:4) built from tensor ops, plus a plain reference codec.

Images are ``[..., h, w, 3]`` RGB in ``[0, 1]``.  The differentiable codec keeps
everything in unit range: YCbCr planes are centred by subtracting 0.5 and the
IJG quantization tables are divided by 255, which reproduces the usual
``[0, 255]`` quantizer decisions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, InputError, ShapeError, Tensor

BLOCK = 8

# IJG (libjpeg) base tables, quality 50.
LUMA_BASE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)

CHROMA_BASE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.int64)

# Full-range BT.601 luma weights.
KR, KB = 0.299, 0.114
KG = 1.0 - KR - KB


@dataclass(frozen=True)
class RoundingMode:
    """How DCT coefficients are rounded: ``exact``, ``sinusoidal`` or ``harmonic`` (with ``terms``)."""

    kind: str
    terms: int = 5

    def __post_init__(self):
        if self.kind not in ("exact", "sinusoidal", "harmonic"):
            raise InputError(f"unknown rounding mode {self.kind!r}")
        if self.kind == "harmonic" and self.terms < 1:
            raise InputError("harmonic rounding needs at least one term")

    @property
    def differentiable(self) -> bool:
        return self.kind != "exact"

    @classmethod
    def parse(cls, name: str) -> "RoundingMode":
        """Accepts ``exact``, ``sin``/``sinusoidal``, ``harmonic`` or ``harmonic:K``."""
        name = name.strip().lower()
        if name in ("exact", "round"):
            return EXACT
        if name in ("sin", "sinusoidal"):
            return SINUSOIDAL
        if name.startswith("harmonic"):
            _, _, k = name.partition(":")
            return cls("harmonic", int(k) if k else 5)
        raise InputError(f"unknown rounding mode {name!r}")

    def __str__(self):
        return f"harmonic:{self.terms}" if self.kind == "harmonic" else self.kind


EXACT = RoundingMode("exact")
SINUSOIDAL = RoundingMode("sinusoidal")
HARMONIC = RoundingMode("harmonic", 5)


@dataclass(frozen=True)
class QuantTablePair:
    luma: np.ndarray
    chroma: np.ndarray
    quality: int


def quality_to_tables(quality: int) -> QuantTablePair:
    """IJG quality scaling of the base luminance/chrominance tables."""
    if isinstance(quality, bool) or int(quality) != quality or not 1 <= quality <= 100:
        raise InputError(f"JPEG quality must be an integer in [1, 100], got {quality!r}")
    quality = int(quality)
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality

    def scaled(base):
        return np.clip((base * scale + 50) // 100, 1, 255)

    return QuantTablePair(scaled(LUMA_BASE), scaled(CHROMA_BASE), quality)


@lru_cache(maxsize=None)
def _dct_matrix_f64() -> np.ndarray:
    n = np.arange(BLOCK)
    d = np.cos((2 * n[None, :] + 1) * n[:, None] * np.pi / (2 * BLOCK))
    d *= np.sqrt(2.0 / BLOCK)
    d[0] /= np.sqrt(2.0)
    d.setflags(write=False)
    return d


def dct_matrix() -> np.ndarray:
    """Orthonormal 8x8 DCT-II matrix ``D`` (rows are basis functions)."""
    return _dct_matrix_f64().astype(ad.default_dtype())


@lru_cache(maxsize=None)
def _color_matrices() -> tuple[np.ndarray, np.ndarray]:
    fwd = np.array([
        [KR, KG, KB],
        [-0.5 * KR / (1 - KB), -0.5 * KG / (1 - KB), 0.5],
        [0.5, -0.5 * KG / (1 - KR), -0.5 * KB / (1 - KR)],
    ])
    return fwd, np.linalg.inv(fwd)


_CHROMA_OFFSET = np.array([0.0, 0.5, 0.5])


def _check_rgb(image: Tensor):
    if image.ndim < 3 or image.shape[-1] != 3:
        raise ShapeError(f"expected [..., h, w, 3] image, got {image.shape}")


def _pointwise(image: Tensor, matrix: np.ndarray, bias) -> Tensor:
    kernel = ad.tensor(matrix.T.reshape(1, 1, 3, 3))
    if image.ndim in (3, 4):
        return ad.conv2d(image, kernel, ad.tensor(bias))
    return ad.matmul(image, ad.tensor(matrix.T)) + ad.tensor(bias)


def rgb_to_ycbcr(image) -> Tensor:
    """Full-range BT.601 conversion as a 1x1 convolution with bias; chroma centred at 0.5."""
    image = ad.as_tensor(image)
    _check_rgb(image)
    fwd, _ = _color_matrices()
    return _pointwise(image, fwd, _CHROMA_OFFSET)


def ycbcr_to_rgb(image) -> Tensor:
    image = ad.as_tensor(image)
    _check_rgb(image)
    _, inv = _color_matrices()
    return _pointwise(image, inv, -inv @ _CHROMA_OFFSET)


def blockify(channel) -> Tensor:
    """``[..., h, w] -> [..., h/8 * w/8, 8, 8]`` with blocks in row-major order."""
    channel = ad.as_tensor(channel)
    *lead, h, w = channel.shape
    if h % BLOCK or w % BLOCK:
        raise ShapeError(f"blockify needs extents divisible by {BLOCK}, got {h}x{w}")
    nl = len(lead)
    x = ad.reshape(channel, (*lead, h // BLOCK, BLOCK, w // BLOCK, BLOCK))
    x = ad.transpose(x, list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3])
    return ad.reshape(x, (*lead, (h // BLOCK) * (w // BLOCK), BLOCK, BLOCK))


def deblockify(blocks, h: int, w: int) -> Tensor:
    blocks = ad.as_tensor(blocks)
    *lead, nb, bh, bw = blocks.shape
    if (bh, bw) != (BLOCK, BLOCK) or nb != (h // BLOCK) * (w // BLOCK) or h % BLOCK or w % BLOCK:
        raise ShapeError(f"cannot reassemble {blocks.shape} into {h}x{w}")
    nl = len(lead)
    x = ad.reshape(blocks, (*lead, h // BLOCK, w // BLOCK, BLOCK, BLOCK))
    x = ad.transpose(x, list(range(nl)) + [nl, nl + 2, nl + 1, nl + 3])
    return ad.reshape(x, (*lead, h, w))


def _check_blocks(blocks: Tensor):
    if blocks.ndim < 2 or blocks.shape[-2:] != (BLOCK, BLOCK):
        raise ShapeError(f"expected trailing 8x8 blocks, got {blocks.shape}")


def dct2d(blocks) -> Tensor:
    """``D x D^T`` on every trailing 8x8 block."""
    blocks = ad.as_tensor(blocks)
    _check_blocks(blocks)
    d = dct_matrix()
    return ad.matmul(ad.matmul(ad.tensor(d), blocks), ad.tensor(d.T))


def idct2d(blocks) -> Tensor:
    """``D^T X D`` on every trailing 8x8 block."""
    blocks = ad.as_tensor(blocks)
    _check_blocks(blocks)
    d = dct_matrix()
    return ad.matmul(ad.matmul(ad.tensor(d.T), blocks), ad.tensor(d))


def rho(x, mode: RoundingMode = SINUSOIDAL) -> Tensor:
    """Rounding or one of its smooth surrogates; every mode is exact at integers."""
    x = ad.as_tensor(x)
    if mode.kind == "exact":
        if x.requires_grad and ad._grad_enabled():
            raise ContractError("exact rounding is not differentiable; use it only for evaluation")
        return Tensor(np.round(x.data), dtype=x.dtype)
    if mode.kind == "sinusoidal":
        return x - ad.sin(x * (2 * math.pi)) * (1 / (2 * math.pi))
    residual = None
    for k in range(1, mode.terms + 1):
        term = ad.sin(x * (2 * math.pi * k)) * ((-1) ** (k + 1) / (k * math.pi))
        residual = term if residual is None else residual + term
    return x - residual


def _tiled_tables(tables: QuantTablePair) -> np.ndarray:
    q = np.stack([tables.luma, tables.chroma, tables.chroma]).astype(np.float64) / 255.0
    return q[:, None, :, :].astype(ad.default_dtype())


def djpeg_forward(image, quality: int = 50, mode: RoundingMode = SINUSOIDAL) -> Tensor:
    """JPEG 4:4:4 compress/decompress round trip with pluggable coefficient rounding.

    Extents that are not multiples of 8 are padded by edge replication and
    cropped afterwards.  Output is clamped to ``[0, 1]``.
    """
    tables = quality_to_tables(quality)
    x = ad.clamp(ad.as_tensor(image), 0.0, 1.0)
    _check_rgb(x)
    *lead, h, w, _ = x.shape
    ph, pw = (-h) % BLOCK, (-w) % BLOCK
    if ph or pw:
        x = ad.pad(x, [(0, 0)] * len(lead) + [(0, ph), (0, pw), (0, 0)], mode="edge")
    hp, wp = h + ph, w + pw
    nl = len(lead)

    ycc = rgb_to_ycbcr(x) - 0.5
    planes = ad.transpose(ycc, list(range(nl)) + [nl + 2, nl, nl + 1])
    coeffs = dct2d(blockify(planes))
    q = ad.tensor(_tiled_tables(tables))
    coeffs = rho(coeffs / q, mode) * q
    planes = deblockify(idct2d(coeffs), hp, wp)
    ycc = ad.transpose(planes, list(range(nl)) + [nl + 1, nl + 2, nl]) + 0.5
    out = ycbcr_to_rgb(ycc)
    if ph or pw:
        out = out[(Ellipsis, slice(0, h), slice(0, w), slice(None))]
    return ad.clamp(out, 0.0, 1.0)


def reference_jpeg(image: np.ndarray, quality: int) -> np.ndarray:
    """Scalar-formula JPEG 4:4:4 quantize/dequantize round trip in float64.

    Works in the ``[0, 255]`` domain with a per-block loop, a DCT basis built
    from the cosine definition, and 8-bit rounding of the decoded pixels.
    Serves as the oracle for :func:`djpeg_forward` in exact mode.
    """
    tables = quality_to_tables(quality)
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"reference_jpeg expects [h, w, 3], got {img.shape}")
    h, w, _ = img.shape
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    y = KR * r + KG * g + KB * b
    cb = 127.5 + 0.5 * (b - y) / (1 - KB)
    cr = 127.5 + 0.5 * (r - y) / (1 - KR)
    hp, wp = h + (-h) % BLOCK, w + (-w) % BLOCK
    planes = [np.pad(p, ((0, hp - h), (0, wp - w)), mode="edge") - 127.5 for p in (y, cb, cr)]

    basis = np.empty((BLOCK, BLOCK, BLOCK, BLOCK))
    for u in range(BLOCK):
        for v in range(BLOCK):
            cu = math.sqrt(1 / BLOCK) if u == 0 else math.sqrt(2 / BLOCK)
            cv = math.sqrt(1 / BLOCK) if v == 0 else math.sqrt(2 / BLOCK)
            for i in range(BLOCK):
                for j in range(BLOCK):
                    basis[u, v, i, j] = (cu * cv * math.cos((2 * i + 1) * u * math.pi / 16)
                                         * math.cos((2 * j + 1) * v * math.pi / 16))

    decoded = []
    for plane, table in zip(planes, (tables.luma, tables.chroma, tables.chroma)):
        out = np.empty_like(plane)
        for bi in range(0, hp, BLOCK):
            for bj in range(0, wp, BLOCK):
                block = plane[bi:bi + BLOCK, bj:bj + BLOCK]
                coef = np.einsum("uvij,ij->uv", basis, block)
                coef = np.round(coef / table) * table
                out[bi:bi + BLOCK, bj:bj + BLOCK] = np.einsum("uvij,uv->ij", basis, coef)
        decoded.append(out[:h, :w] + 127.5)

    y, cb, cr = decoded
    cb, cr = cb - 127.5, cr - 127.5
    r = y + 2 * (1 - KR) * cr
    b = y + 2 * (1 - KB) * cb
    g = (y - KR * r - KB * b) / KG
    rgb = np.stack([r, g, b], axis=-1)
    return np.clip(np.round(rgb), 0, 255) / 255.0
