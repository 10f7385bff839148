"""Neural imaging pipelines: INet (hand-initialized ISP replica) and UNet.

Both map a packed Bayer stack ``[n, h/2, w/2, 4]`` to RGB ``[n, h, w, 3]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize

from . import autodiff as ad
from .autodiff import InputError, ShapeError, Tensor
from .params import ParamSet
from .raw import COLOR_MATRIX, GAMMA, cfa_masks, bilinear_kernel5

LEAKY_SLOPE = 0.2


class TrainingError(RuntimeError):
    """Optimization diverged or failed to reach its target."""

    def __init__(self, message: str, checkpoint=None, diagnostics: dict | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.diagnostics = diagnostics or {}


# ---------------------------------------------------------------------------
# Gamma toy network: scalar 1 -> 4 (sigmoid) -> 1
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GammaNet:
    w1: np.ndarray  # (4,)
    b1: np.ndarray  # (4,)
    w2: np.ndarray  # (4,)
    b2: float

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        h = 0.5 * (np.tanh(0.5 * (x[..., None] * self.w1 + self.b1)) + 1)
        return h @ self.w2 + self.b2


def _gamma_objective(p, x, t, power):
    w1, b1, w2 = p[:4], p[4:8], p[8:12]
    h = 0.5 * (np.tanh(0.5 * (np.outer(x, w1) + b1)) + 1)
    e = h @ w2 + p[12] - t
    a = np.abs(e)
    m = a.max()
    if m == 0:
        return 0.0, np.zeros_like(p)
    mean_p = np.mean((a / m) ** power)
    value = m * mean_p ** (1 / power)
    de = (a / m) ** (power - 1) * np.sign(e) / (len(x) * mean_p ** (1 - 1 / power))
    dh = de[:, None] * w2 * h * (1 - h)
    grad = np.concatenate([(dh * x[:, None]).sum(0), dh.sum(0), (de[:, None] * h).sum(0), [de.sum()]])
    return value, grad


@lru_cache(maxsize=8)
def train_gamma_toy(gamma: float = GAMMA, seed: int = 0, tol: float = 0.01, restarts: int = 24) -> GammaNet:
    """Fit ``x ** (1/gamma)`` on ``[0, 1]`` with a 4-unit sigmoid network.

    Multi-start L-BFGS on an L^p error norm with ``p`` raised toward the max
    norm.  Raises :class:`TrainingError` if the best max error on a
    1000-point grid exceeds ``tol``.
    """
    if gamma <= 0:
        raise InputError(f"gamma must be positive, got {gamma}")
    x = np.linspace(0.0, 1.0, 1000)
    t = x ** (1.0 / gamma)
    rng = np.random.default_rng(seed)
    best_err, best = np.inf, None
    for _ in range(restarts):
        scales = np.exp(rng.uniform(np.log(2), np.log(400), 4))
        centers = np.exp(rng.uniform(np.log(1e-3), np.log(0.8), 4))
        w1, b1 = scales, -scales * centers
        h = 0.5 * (np.tanh(0.5 * (np.outer(x, w1) + b1)) + 1)
        coef, *_ = np.linalg.lstsq(np.hstack([h, np.ones((len(x), 1))]), t, rcond=None)
        p = np.concatenate([w1, b1, coef])
        for power in (2, 4, 8, 16, 32, 64):
            p = minimize(_gamma_objective, p, args=(x, t, power), jac=True, method="L-BFGS-B",
                         options={"maxiter": 2000}).x
        net = GammaNet(p[:4].copy(), p[4:8].copy(), p[8:12].copy(), float(p[12]))
        err = float(np.abs(net(x) - t).max())
        if err < best_err:
            best_err, best = err, net
    if best_err > tol:
        raise TrainingError(f"gamma toy net reached max error {best_err:.4f} > {tol}",
                            diagnostics={"max_error": best_err, "restarts": restarts})
    return best


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def clip_output(y: Tensor, mode: str) -> Tensor:
    """``pass``: clamp values, identity gradient; ``hard``: ordinary clamp; ``none``: untouched."""
    if mode == "none":
        return y
    if mode == "hard":
        return ad.clamp(y, 0.0, 1.0)
    if mode == "pass":
        return y + Tensor(np.clip(y.data, 0.0, 1.0) - y.data, dtype=y.dtype)
    raise InputError(f"unknown clip mode {mode!r}")


def _as_batch(stack) -> tuple[Tensor, bool]:
    data = stack.data if hasattr(stack, "cfa_order") else stack
    x = ad.as_tensor(data)
    if x.ndim == 3:
        return ad.reshape(x, (1,) + x.shape), True
    if x.ndim != 4 or x.shape[-1] != 4:
        raise ShapeError(f"expected packed stack [n, h/2, w/2, 4], got {x.shape}")
    return x, False


def _he_uniform(rng, shape, fan_in):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# INet
# ---------------------------------------------------------------------------

def inet_init(cfa_order: str = "RGGB", gamma_seed: int = 0) -> ParamSet:
    """INet initialized to reproduce the reference ISP (321 parameters).

    ``demosaic``: 5x5 3->3 bilinear kernels on sparse color planes;
    ``color``: 1x1 3->3 reference color matrix; ``gamma_*``: three copies of
    the gamma toy network arranged block-diagonally (3->12->3).
    """
    net = train_gamma_toy(GAMMA, gamma_seed)
    w_hidden = np.zeros((1, 1, 3, 12))
    w_out = np.zeros((1, 1, 12, 3))
    for c in range(3):
        w_hidden[0, 0, c, 4 * c:4 * c + 4] = net.w1
        w_out[0, 0, 4 * c:4 * c + 4, c] = net.w2
    arrays = {
        "demosaic": bilinear_kernel5(),
        "color": COLOR_MATRIX.T.reshape(1, 1, 3, 3),
        "gamma_hidden_w": w_hidden,
        "gamma_hidden_b": np.tile(net.b1, 3),
        "gamma_out_w": w_out,
        "gamma_out_b": np.full(3, net.b2),
    }
    params = ParamSet.from_arrays(arrays)
    return params


def inet_develop(params: ParamSet, stack, cfa_order: str = "RGGB", clip: str = "pass") -> Tensor:
    """Develop packed stacks with INet; returns ``[n, h, w, 3]`` (or ``[h, w, 3]`` for one stack)."""
    cfa_order = getattr(stack, "cfa_order", cfa_order)
    x, single = _as_batch(stack)
    n, h2, w2, _ = x.shape
    if params["demosaic"].shape != (5, 5, 3, 3):
        raise ShapeError(f"INet demosaic kernel has shape {params['demosaic'].shape}")
    x = ad.pad(x, [(0, 0), (1, 1), (1, 1), (0, 0)], mode="edge")
    mosaic = ad.depth_to_space(x, 2)
    masks = cfa_masks(2 * h2 + 4, 2 * w2 + 4, cfa_order)
    planes = mosaic * ad.tensor(masks)
    rgb = ad.conv2d(planes, params["demosaic"], padding="valid")
    rgb = ad.conv2d(rgb, params["color"])
    hidden = ad.sigmoid(ad.conv2d(rgb, params["gamma_hidden_w"], params["gamma_hidden_b"]))
    out = clip_output(ad.conv2d(hidden, params["gamma_out_w"], params["gamma_out_b"]), clip)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# UNet
# ---------------------------------------------------------------------------

def unet_widths(width: float = 0.25, depth: int = 4, base: int = 32) -> list[int]:
    widths = [int(round(base * width * 2 ** i)) for i in range(depth + 1)]
    if min(widths) < 1:
        raise InputError(f"width multiplier {width} yields empty layers")
    return widths


def unet_init(width: float = 0.25, depth: int = 4, seed: int = 0) -> ParamSet:
    """Encoder-decoder with skip concatenations; ``width=1, depth=4`` has 7,760,268 parameters.

    Each level holds two 3x3 convolutions; upsampling uses bias-free 2x2
    stride-2 transposed convolutions; a final 1x1 convolution emits 12
    channels that ``depth_to_space`` turns into full-resolution RGB.
    """
    rng = np.random.default_rng(seed)
    widths = unet_widths(width, depth)
    arrays: dict[str, np.ndarray] = {}
    cin = 4
    for i, c in enumerate(widths):
        arrays[f"enc{i}_a_w"] = _he_uniform(rng, (3, 3, cin, c), 9 * cin)
        arrays[f"enc{i}_a_b"] = np.zeros(c)
        arrays[f"enc{i}_b_w"] = _he_uniform(rng, (3, 3, c, c), 9 * c)
        arrays[f"enc{i}_b_b"] = np.zeros(c)
        cin = c
    for i in range(depth - 1, -1, -1):
        lo, hi = widths[i], widths[i + 1]
        arrays[f"up{i}_w"] = _he_uniform(rng, (hi, 2, 2, lo), hi)
        arrays[f"dec{i}_a_w"] = _he_uniform(rng, (3, 3, 2 * lo, lo), 18 * lo)
        arrays[f"dec{i}_a_b"] = np.zeros(lo)
        arrays[f"dec{i}_b_w"] = _he_uniform(rng, (3, 3, lo, lo), 9 * lo)
        arrays[f"dec{i}_b_b"] = np.zeros(lo)
    arrays["out_w"] = _he_uniform(rng, (1, 1, widths[0], 12), widths[0]) * 0.1
    arrays["out_b"] = np.full(12, 0.5)
    return ParamSet.from_arrays(arrays)


def _upconv2x2(x: Tensor, w: Tensor) -> Tensor:
    n, h, wd, c = x.shape
    _, _, _, o = w.shape
    y = ad.matmul(ad.reshape(x, (n, h * wd, c)), ad.reshape(w, (c, 4 * o)))
    y = ad.reshape(y, (n, h, wd, 2, 2, o))
    y = ad.transpose(y, (0, 1, 3, 2, 4, 5))
    return ad.reshape(y, (n, 2 * h, 2 * wd, o))


def unet_depth(params: ParamSet) -> int:
    return sum(1 for k in params if k.startswith("up") and k.endswith("_w"))


def unet_develop(params: ParamSet, stack, clip: str = "pass") -> Tensor:
    x, single = _as_batch(stack)
    depth = unet_depth(params)
    if x.shape[1] % 2 ** depth or x.shape[2] % 2 ** depth:
        raise ShapeError(f"UNet of depth {depth} needs stack extents divisible by {2 ** depth}, got {x.shape[1:3]}")

    def block(t, prefix):
        t = ad.leaky_relu(ad.conv2d(t, params[f"{prefix}_a_w"], params[f"{prefix}_a_b"]), LEAKY_SLOPE)
        return ad.leaky_relu(ad.conv2d(t, params[f"{prefix}_b_w"], params[f"{prefix}_b_b"]), LEAKY_SLOPE)

    skips = []
    for i in range(depth + 1):
        x = block(x, f"enc{i}")
        if i < depth:
            skips.append(x)
            x = ad.max_pool2d(x, 2)
    for i in range(depth - 1, -1, -1):
        x = ad.concat([_upconv2x2(x, params[f"up{i}_w"]), skips[i]], axis=-1)
        x = block(x, f"dec{i}")
    x = ad.conv2d(x, params["out_w"], params["out_b"])
    out = clip_output(ad.depth_to_space(x, 2), clip)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def nip_kind(params: ParamSet) -> str:
    return "inet" if "demosaic" in params else "unet"


def develop(params: ParamSet, stack, clip: str = "pass", cfa_order: str = "RGGB") -> Tensor:
    if nip_kind(params) == "inet":
        return inet_develop(params, stack, cfa_order=cfa_order, clip=clip)
    return unet_develop(params, stack, clip=clip)
