"""Forensic analysis network: a zero-sum residual first layer followed by a small CNN.

The first layer is a bias-free 5x5 convolution whose taps sum to zero for
every (input, output) channel pair.  It therefore suppresses image content
and passes on high-frequency traces left by manipulations; training keeps
the constraint by re-projecting after each optimizer step.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import InputError, ShapeError, Tensor
from .channel import N_CLASSES
from .params import ParamSet, param_count

LEAKY_SLOPE = 0.2
BASE_WIDTHS = (32, 64, 128, 256)
FC_WIDTHS = (512, 128)
POOLS = len(BASE_WIDTHS)

# Second-order residual predictor used to initialize each diagonal filter.
RESIDUAL_INIT = np.array([[-1, -2, -1], [-2, 12, -2], [-1, -2, -1]], dtype=np.float64)

__all__ = ["fan_init", "fan_logits", "fan_forward", "project_constrained", "constraint_violation",
           "param_count", "fan_width"]


def _widths(width: float) -> tuple[list[int], int, list[int]]:
    if not width > 0:
        raise InputError(f"width multiplier must be positive, got {width}")
    scaled = [c * width for c in BASE_WIDTHS + FC_WIDTHS]
    if any(abs(s - round(s)) > 1e-9 or round(s) < 1 for s in scaled):
        raise InputError(f"width multiplier {width} does not give integer layer widths")
    scaled = [int(round(s)) for s in scaled]
    conv, fc = scaled[:POOLS], scaled[POOLS:]
    return conv, conv[-1], fc


def _uniform(rng, shape, fan_in, gain=np.sqrt(6.0)):
    limit = gain / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape)


def fan_init(width: float = 0.25, seed: int = 0) -> ParamSet:
    """Seeded FAN parameters; ``width=1`` has 1,341,990 trainable values."""
    conv, proj, fc = _widths(width)
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    k = np.zeros((5, 5, 3, 3))
    for c in range(3):
        k[1:4, 1:4, c, c] = RESIDUAL_INIT
    arrays["constrained_w"] = k
    cin = 3
    for i, c in enumerate(conv, start=1):
        arrays[f"conv{i}_w"] = _uniform(rng, (5, 5, cin, c), 25 * cin)
        arrays[f"conv{i}_b"] = np.zeros(c)
        cin = c
    arrays["proj_w"] = _uniform(rng, (1, 1, cin, proj), cin)
    arrays["proj_b"] = np.zeros(proj)
    cin = proj
    for i, c in enumerate(fc + [N_CLASSES], start=1):
        # Glorot-style scaling on the head keeps untrained outputs near uniform.
        gain = np.sqrt(6.0) if i < 3 else np.sqrt(6.0 * cin / (cin + c)) * 0.1
        arrays[f"fc{i}_w"] = _uniform(rng, (cin, c), cin, gain)
        arrays[f"fc{i}_b"] = np.zeros(c)
        cin = c
    return ParamSet.from_arrays(arrays)


def fan_width(params: ParamSet) -> float:
    return params["conv1_w"].shape[-1] / BASE_WIDTHS[0]


def constrained_conv(params: ParamSet, x: Tensor) -> Tensor:
    """Residual layer with mirrored borders: constant inputs map to exactly zero."""
    x = ad.pad(x, [(0, 0), (2, 2), (2, 2), (0, 0)], mode="symmetric")
    return ad.conv2d(x, params["constrained_w"], padding="valid")


def fan_logits(params: ParamSet, rgb) -> Tensor:
    """Unnormalized class scores ``[n, 5]`` for RGB patches ``[n, s, s, 3]`` (or one ``[s, s, 3]``)."""
    x = ad.as_tensor(rgb)
    if x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ShapeError(f"expected RGB patches [n, s, s, 3], got {x.shape}")
    h, w = x.shape[1:3]
    if h % 2 ** POOLS or w % 2 ** POOLS:
        raise ShapeError(f"patch extents {h}x{w} must be divisible by {2 ** POOLS}")
    y = constrained_conv(params, x)
    for i in range(1, POOLS + 1):
        y = ad.conv2d(y, params[f"conv{i}_w"], params[f"conv{i}_b"])
        y = ad.max_pool2d(ad.leaky_relu(y, LEAKY_SLOPE), 2)
    y = ad.leaky_relu(ad.conv2d(y, params["proj_w"], params["proj_b"]), LEAKY_SLOPE)
    y = ad.global_avg_pool(y)
    y = ad.leaky_relu(y @ params["fc1_w"] + params["fc1_b"], LEAKY_SLOPE)
    y = ad.leaky_relu(y @ params["fc2_w"] + params["fc2_b"], LEAKY_SLOPE)
    return y @ params["fc3_w"] + params["fc3_b"]


def fan_forward(params: ParamSet, rgb) -> np.ndarray:
    """Class probabilities; ``[5]`` for a single patch, ``[n, 5]`` for a batch."""
    x = ad.as_tensor(rgb)
    with ad.no_grad():
        probs = ad.softmax(fan_logits(params, x).data)
    return probs[0] if x.ndim == 3 else probs


def project_constrained(params: ParamSet) -> ParamSet:
    """Set each filter's center tap to minus the sum of its other 24 taps (in place)."""
    k = params["constrained_w"].data
    k[2, 2] = 0.0
    # Sum in float64 so the stored taps cancel to within half an ulp of the center.
    k[2, 2] = -k.sum(axis=(0, 1), dtype=np.float64)
    return params


def constraint_violation(params: ParamSet) -> float:
    """Largest absolute tap-sum over all (in, out) filters of the residual layer."""
    return float(np.abs(params["constrained_w"].data.sum(axis=(0, 1), dtype=np.float64)).max())
