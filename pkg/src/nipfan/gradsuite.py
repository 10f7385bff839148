"""Registry of finite-difference gradient checks run in 64-bit precision.

Every differentiable primitive has an entry, plus composites covering the
differentiable JPEG, INet and a reduced FAN with a cross-entropy head.
Each builder returns ``(fn, point, max_coords)`` for :func:`finite_diff_check`.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad

TOLERANCE = 1e-4

REGISTRY: dict[str, Callable] = {}


def register(name: str):
    def deco(builder):
        REGISTRY[name] = builder
        return builder
    return deco


def _rand(rng, *shape, lo=-1.0, hi=1.0) -> ad.Tensor:
    return ad.Tensor(rng.uniform(lo, hi, size=shape), dtype=np.float64)


def _weights(rng, shape) -> ad.Tensor:
    # Fixed random projection so every output element influences the scalar.
    return ad.Tensor(rng.normal(size=shape), dtype=np.float64)


def _unary(name, op, lo=-1.0, hi=1.0):
    @register(name)
    def build(rng):
        x = _rand(rng, 3, 4, lo=lo, hi=hi)
        w = _weights(rng, op(x).shape)
        return (lambda p: ad.sum(op(p) * w)), x, None
    return build


_unary("neg", ad.neg)
_unary("exp", ad.exp)
_unary("log", ad.log, 0.2, 2.0)
_unary("sin", ad.sin, -3, 3)
_unary("cos", ad.cos, -3, 3)
_unary("sqrt", ad.sqrt, 0.2, 2.0)
_unary("sigmoid", ad.sigmoid, -4, 4)
_unary("tanh", ad.tanh, -2, 2)
_unary("power", lambda t: ad.power(t, 2.5), 0.2, 2.0)
_unary("leaky_relu", lambda t: ad.leaky_relu(t, 0.2))
_unary("clamp", lambda t: ad.clamp(t, -0.5, 0.5))
_unary("sum", lambda t: ad.sum(t, axis=1, keepdims=True))
_unary("mean", lambda t: ad.mean(t, axis=0))
_unary("reshape", lambda t: ad.reshape(t, (2, 6)))
_unary("transpose", lambda t: ad.transpose(t, (1, 0)))
_unary("getitem", lambda t: t[1:, ::2])
_unary("getitem_fancy", lambda t: t[np.array([0, 2, 2]), 1:])
_unary("take", lambda t: ad.take(t, np.array([3, 0, 0, 1]), axis=1))
_unary("maximum_channel", lambda t: ad.maximum_channel(t, axis=-1))


def _binary(name, op, lo=-1.0, hi=1.0, shape_b=(3, 4)):
    @register(name)
    def build(rng):
        point = {"a": _rand(rng, 3, 4), "b": _rand(rng, *shape_b, lo=lo, hi=hi)}
        w = _weights(rng, (3, 4))
        return (lambda p: ad.sum(op(p["a"], p["b"]) * w)), point, None
    return build


_binary("add", ad.add, shape_b=(1, 4))
_binary("sub", ad.sub, shape_b=(3, 1))
_binary("mul", ad.mul)
_binary("div", ad.div, 0.5, 2.0)
_binary("where", lambda a, b: ad.where(a.data > 0, a, b))


@register("concat")
def _concat(rng):
    point = {"a": _rand(rng, 2, 3), "b": _rand(rng, 2, 5)}
    w = _weights(rng, (2, 8))
    return (lambda p: ad.sum(ad.concat([p["a"], p["b"]], axis=1) * w)), point, None


@register("matmul")
def _matmul(rng):
    point = {"a": _rand(rng, 2, 3, 4), "b": _rand(rng, 4, 5)}
    w = _weights(rng, (2, 3, 5))
    return (lambda p: ad.sum(ad.matmul(p["a"], p["b"]) * w)), point, None


for _mode in ("constant", "edge", "symmetric"):
    _unary(f"pad_{_mode}", lambda t, m=_mode: ad.pad(t, [(1, 2), (2, 1)], mode=m))


def _conv(name, **kw):
    @register(name)
    def build(rng):
        point = {"x": _rand(rng, 2, 7, 6, 3), "k": _rand(rng, 3, 3, 3, 4), "b": _rand(rng, 4)}
        out_shape = ad.conv2d(point["x"], point["k"], point["b"], **kw).shape
        w = _weights(rng, out_shape)
        return (lambda p: ad.sum(ad.conv2d(p["x"], p["k"], p["b"], **kw) * w)), point, None
    return build


_conv("conv2d_same")
_conv("conv2d_valid", padding="valid")
_conv("conv2d_stride2", stride=2)


@register("space_to_depth")
def _s2d(rng):
    x = _rand(rng, 2, 4, 6, 3)
    w = _weights(rng, (2, 2, 3, 12))
    return (lambda p: ad.sum(ad.space_to_depth(p, 2) * w)), x, None


@register("depth_to_space")
def _d2s(rng):
    x = _rand(rng, 2, 3, 2, 8)
    w = _weights(rng, (2, 6, 4, 2))
    return (lambda p: ad.sum(ad.depth_to_space(p, 2) * w)), x, None


@register("max_pool2d")
def _pool(rng):
    x = _rand(rng, 2, 4, 6, 3)
    w = _weights(rng, (2, 2, 3, 3))
    return (lambda p: ad.sum(ad.max_pool2d(p, 2) * w)), x, None


@register("global_avg_pool")
def _gap(rng):
    x = _rand(rng, 2, 4, 6, 3)
    w = _weights(rng, (2, 3))
    return (lambda p: ad.sum(ad.global_avg_pool(p) * w)), x, None


@register("softmax_cross_entropy")
def _ce(rng):
    x = _rand(rng, 6, 5, lo=-3, hi=3)
    labels = rng.integers(0, 5, size=6)
    return (lambda p: ad.softmax_cross_entropy(p, labels)[0]), x, None


# ---------------------------------------------------------------------------
# Composites
# ---------------------------------------------------------------------------

@register("djpeg_sinusoidal")
def _djpeg(rng):
    from .djpeg import SINUSOIDAL, djpeg_forward
    x = _rand(rng, 16, 16, 3, lo=0.1, hi=0.9)
    w = _weights(rng, (16, 16, 3))
    return (lambda p: ad.sum(djpeg_forward(p, 50, SINUSOIDAL) * w)), x, 200


@register("djpeg_harmonic")
def _djpeg_h(rng):
    from .djpeg import HARMONIC, djpeg_forward
    x = _rand(rng, 8, 8, 3, lo=0.1, hi=0.9)
    w = _weights(rng, (8, 8, 3))
    return (lambda p: ad.sum(djpeg_forward(p, 80, HARMONIC) * w)), x, 100


@register("inet")
def _inet(rng):
    from .nip import inet_develop, inet_init
    params = dict(inet_init().astype(np.float64))
    stack = ad.Tensor(rng.uniform(0.05, 0.6, size=(1, 8, 8, 4)), dtype=np.float64)
    w = _weights(rng, (1, 16, 16, 3))
    # "none" clip keeps the check on the smooth part of the pipeline.
    return (lambda p: ad.sum(inet_develop(p, stack, clip="none") * w)), params, 40


@register("fan_cross_entropy")
def _fan(rng):
    from .fan import fan_init, fan_logits
    params = dict(fan_init(0.25, seed=1).astype(np.float64))
    x = ad.Tensor(rng.random((2, 32, 32, 3)), dtype=np.float64)
    labels = np.array([1, 3])
    return (lambda p: ad.softmax_cross_entropy(fan_logits(p, x), labels)[0]), params, 20


@register("manipulations")
def _manip(rng):
    from .channel import ManipulationClass, apply_manipulation, distribution_channel
    x = _rand(rng, 1, 16, 16, 3, lo=0.2, hi=0.8)
    w = _weights(rng, (1, 8, 8, 3))

    def fn(p):
        total = None
        for cls in ManipulationClass:
            y = ad.sum(distribution_channel(apply_manipulation(cls, p)) * w)
            total = y if total is None else total + y
        return total
    return fn, x, 60


def run(names=None, eps: float = 1e-6, seed: int = 0, tolerance: float = TOLERANCE) -> dict[str, tuple[float, bool]]:
    """Run the selected checks; returns ``name -> (max relative error, passed)``."""
    names = list(REGISTRY) if names is None else list(names)
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        raise KeyError(f"unknown gradient check(s): {', '.join(unknown)}")
    results = {}
    with ad.precision(np.float64):
        for name in names:
            rng = np.random.default_rng(seed)
            fn, point, max_coords = REGISTRY[name](rng)
            err = ad.finite_diff_check(fn, point, eps=eps, max_coords=max_coords, seed=seed)
            results[name] = (err, err <= tolerance)
    return results
