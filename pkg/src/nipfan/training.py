"""Optimizers, losses, patch sampling and the three training procedures.

* ``train_nip``: regress a NIP onto reference-ISP targets (L2 on the 8-bit scale).
* ``train_joint`` in mode ``f``: train the FAN on the output of a frozen NIP.
* ``train_joint`` in mode ``f+n``: the FAN optimizer also updates the NIP, and a
  second optimizer pulls the NIP back towards the targets.  Steps run in that order.

Training state (parameters, optimizer moments, RNG state, history) is held in a
:class:`TrainState` so a run can be checkpointed and resumed bit-exactly.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, InputError, ShapeError, Tensor
from .channel import N_CLASSES, ChannelConfig, branch_all
from .fan import fan_logits, project_constrained
from .metrics import LUMA_WEIGHTS, PEAK, confusion, psnr, ssim
from .nip import TrainingError, develop
from .params import ParamSet
from .raw import reference_develop

MODES = ("nip", "f", "f+n")


class SamplingError(RuntimeError):
    """Patch rejection exhausted its attempt budget."""


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for k in self.m:
            out[f"{prefix}m/{k}"] = self.m[k]
            out[f"{prefix}v/{k}"] = self.v[k]
        return out

    def meta(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step}

    @classmethod
    def restore(cls, meta: dict, arrays: dict, prefix: str) -> "AdamState":
        state = cls(**meta)
        for key, arr in arrays.items():
            if key.startswith(prefix + "m/"):
                state.m[key[len(prefix) + 2:]] = np.array(arr)
            elif key.startswith(prefix + "v/"):
                state.v[key[len(prefix) + 2:]] = np.array(arr)
        return state


def adam_step(state: AdamState, params: dict, grads: dict, group_lr: dict | None = None) -> None:
    """Bias-corrected Adam update of ``params`` (name -> Tensor) in place.

    ``grads`` maps the same names to arrays; names absent from ``grads`` are
    left untouched.  ``group_lr`` maps name prefixes to learning rates that
    replace ``state.lr`` for matching parameters.
    """
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1 ** t
    c2 = 1 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(p.shape, dtype=p.dtype)
            state.v[name] = np.zeros(p.shape, dtype=p.dtype)
        v = state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        lr = state.lr
        for prefix, group in (group_lr or {}).items():
            if name.startswith(prefix):
                lr = group
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)


def lr_schedule(initial: float, epoch: int, period: int = 50, decay: float = 0.85) -> float:
    """Step decay: ``initial * decay ** floor(epoch / period)``."""
    if epoch < 0:
        raise InputError(f"epoch must be non-negative, got {epoch}")
    return initial * decay ** (epoch // period)


# ---------------------------------------------------------------------------
# Configuration and reports
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    mode: str = "nip"
    epochs: int = 20
    iterations_per_epoch: int = 100
    batch_size: int = 20
    lr: float = 1e-4              # NIP lr in mode "nip"; FAN lr otherwise
    nip_lr: float | None = None   # NIP lr in both f+n steps (defaults to lr)
    lr_period: int = 50
    lr_decay: float = 0.85
    patch: int = 64               # developed RGB patch size
    seed: int = 0
    validate_every: int = 1
    val_patches: int = 60         # source patches for accuracy (x5 manipulation classes)
    val_fidelity_patches: int = 20
    val_patch: int | None = None  # fidelity patch size (defaults to patch)
    early_stop_window: int = 5
    early_stop_tol: float = 1e-4
    clip: str = "pass"
    channel: bool = True
    fidelity_first: bool = False  # run the f+n fidelity step before the classification step
    eval_chunk: int = 50

    def validate(self):
        if self.mode not in MODES:
            raise InputError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 1 or self.epochs < 0 or self.iterations_per_epoch < 1:
            raise InputError("batch_size and iterations_per_epoch must be >= 1, epochs >= 0")
        if not self.lr >= 0 or (self.nip_lr is not None and not self.nip_lr >= 0):
            raise InputError("learning rates must be non-negative")
        if self.validate_every < 1 or self.lr_period < 1:
            raise InputError("validate_every and lr_period must be >= 1")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InputError(f"unknown training config key(s): {', '.join(unknown)}")
        return cls(**d).validate()


HISTORY_FIELDS = ("epoch", "lr", "ce_loss", "l2_loss", "psnr", "ssim", "accuracy")


@dataclass
class LossReport:
    """Per-epoch record; ``nan`` marks quantities not computed in a mode."""

    epoch: int
    lr: float
    ce_loss: float = math.nan
    l2_loss: float = math.nan
    psnr: float = math.nan
    ssim: float = math.nan
    accuracy: float = math.nan
    per_class: tuple = ()
    val_l2: float = math.nan

    def row(self) -> list[str]:
        out = [str(self.epoch)]
        for name in HISTORY_FIELDS[1:]:
            v = getattr(self, name)
            out.append("inf" if math.isinf(v) else repr(float(v)))
        return out


def history_csv(history: list[LossReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for r in history:
        w.writerow(r.row())
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Losses and sampling
# ---------------------------------------------------------------------------

def l2_fidelity(output, target) -> Tensor:
    """Mean squared error after scaling both images by 255."""
    output = ad.as_tensor(output)
    target = ad.as_tensor(target)
    if output.shape != target.shape:
        raise ShapeError(f"shape mismatch {output.shape} vs {target.shape}")
    d = (output - target) * PEAK
    return ad.mean(d * d)


def patch_variance(target: np.ndarray) -> float:
    return float(np.var(np.asarray(target, dtype=np.float64) @ LUMA_WEIGHTS))


def accept_patch(variance: float, rng) -> bool:
    """Reject flat patches; keep moderately flat ones with probability 0.5."""
    if variance < 0.01:
        return False
    if variance < 0.02:
        return bool(rng.random() < 0.5)
    return True


def sample_patches(dataset, count: int, patch: int, rng, max_attempts: int | None = None,
                   reject: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Random ``patch x patch`` crops as ``(stacks [n, p/2, p/2, 4], targets [n, p, p, 3])``.

    Crops start on even pixels so every stack keeps the dataset's CFA phase.
    Targets are developed from the cropped stack itself, so patch borders are
    consistent with what a pipeline can see.
    """
    if patch % 2:
        raise InputError(f"patch must be even, got {patch}")
    if not dataset:
        raise InputError("empty dataset")
    for s in dataset:
        if s.target.shape[0] < patch or s.target.shape[1] < patch:
            raise InputError(f"patch {patch} does not fit sample {s.name} of size {s.target.shape[:2]}")
    max_attempts = max_attempts or 100 * count + 1000
    stacks, targets = [], []
    attempts = 0
    while len(stacks) < count:
        if attempts >= max_attempts:
            raise SamplingError(f"accepted {len(stacks)}/{count} patches after {attempts} attempts")
        attempts += 1
        s = dataset[int(rng.integers(len(dataset)))]
        h, w = s.target.shape[:2]
        top = int(rng.integers(0, (h - patch) // 2 + 1))
        left = int(rng.integers(0, (w - patch) // 2 + 1))
        tgt = s.target[2 * top:2 * top + patch, 2 * left:2 * left + patch]
        if reject and not accept_patch(patch_variance(tgt), rng):
            continue
        stack = s.stack.data[top:top + patch // 2, left:left + patch // 2]
        stacks.append(stack)
        targets.append(reference_develop(stack, s.stack.cfa_order).astype(np.float32))
    return np.stack(stacks), np.stack(targets)


# ---------------------------------------------------------------------------
# Training state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    config: TrainConfig
    nip: ParamSet
    fan: ParamSet | None = None
    opt_main: AdamState = field(default_factory=AdamState)
    opt_fidelity: AdamState | None = None
    rng: np.random.Generator = None
    val_stacks: np.ndarray = None
    val_targets: np.ndarray = None
    fid_stacks: np.ndarray = None
    fid_targets: np.ndarray = None
    epoch: int = 0
    history: list = field(default_factory=list)
    stopped_early: bool = False


def _init_state(config: TrainConfig, nip: ParamSet, fan: ParamSet | None, val_dataset) -> TrainState:
    train_seq, val_seq = np.random.SeedSequence(config.seed).spawn(2)
    val_rng = np.random.default_rng(val_seq)
    state = TrainState(config=config, nip=nip, fan=fan, rng=np.random.default_rng(train_seq))
    fid_patch = config.val_patch or config.patch
    if config.val_fidelity_patches:
        state.fid_stacks, state.fid_targets = sample_patches(val_dataset, config.val_fidelity_patches,
                                                             fid_patch, val_rng)
    if config.mode != "nip" and config.val_patches:
        state.val_stacks, state.val_targets = sample_patches(val_dataset, config.val_patches, config.patch, val_rng)
    state.opt_main = AdamState(lr=config.lr)
    if config.mode == "f+n":
        state.opt_fidelity = AdamState(lr=config.nip_lr if config.nip_lr is not None else config.lr)
    return state


def _grads_by_name(grads: dict, params: dict, prefix: str = "") -> dict:
    return {prefix + k: grads[t] for k, t in params.items() if t in grads}


def _check_finite(value: float, what: str, state: TrainState, snapshot):
    if not np.isfinite(value):
        raise TrainingError(f"non-finite {what} at epoch {state.epoch}", checkpoint=snapshot,
                            diagnostics={"epoch": state.epoch, what: value})


def _snapshot(state: TrainState) -> dict:
    snap = {"nip": state.nip.copy()}
    if state.fan is not None:
        snap["fan"] = state.fan.copy()
    return snap


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def evaluate_fidelity(nip: ParamSet, stacks, targets, clip: str = "pass", chunk: int = 20) -> tuple[float, float, float]:
    """Mean ``(l2, psnr, ssim)`` of NIP output against targets."""
    l2s, psnrs, ssims = [], [], []
    with ad.no_grad():
        for i in range(0, len(stacks), chunk):
            out = np.clip(develop(nip, stacks[i:i + chunk], clip).data, 0.0, 1.0)
            for o, t in zip(out, targets[i:i + chunk]):
                l2s.append(float(np.mean(((o.astype(np.float64) - t) * PEAK) ** 2)))
                psnrs.append(psnr(o, t))
                ssims.append(ssim(o, t))
    return float(np.mean(l2s)), float(np.mean(psnrs)), float(np.mean(ssims))


def classify(nip: ParamSet, fan: ParamSet, stacks, channel_cfg: ChannelConfig | None, channel: bool = True,
             clip: str = "pass", chunk: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Labels and FAN predictions for every manipulation of every stack."""
    labels, preds = [], []
    with ad.no_grad():
        for i in range(0, len(stacks), chunk):
            rgb = develop(nip, stacks[i:i + chunk], clip)
            images, lab = branch_all(rgb, channel_cfg, channel)
            preds.append(np.argmax(fan_logits(fan, images).data, axis=1))
            labels.append(lab)
    return np.concatenate(labels), np.concatenate(preds)


def _relative_change_small(history: list[LossReport], window: int, tol: float) -> bool:
    vals = [r.val_l2 for r in history if np.isfinite(r.val_l2)]
    if len(vals) < 2 * window:
        return False
    recent = float(np.mean(vals[-window:]))
    before = float(np.mean(vals[-2 * window:-window]))
    return abs(recent - before) / max(before, 1e-12) < tol


# ---------------------------------------------------------------------------
# Procedures
# ---------------------------------------------------------------------------

def train_nip(config: TrainConfig, dataset, nip: ParamSet, val_dataset=None, resume: TrainState | None = None,
              on_epoch: Callable[[TrainState], None] | None = None) -> TrainState:
    """Fit a NIP to reference targets; stops early once validation loss plateaus."""
    config.validate()
    if config.mode != "nip":
        raise InputError(f"train_nip needs mode 'nip', got {config.mode!r}")
    state = resume or _init_state(config, nip, None, val_dataset or dataset)
    state.config = config
    nip = state.nip
    while state.epoch < config.epochs and not state.stopped_early:
        lr = lr_schedule(config.lr, state.epoch, config.lr_period, config.lr_decay)
        state.opt_main.lr = lr
        losses = []
        for _ in range(config.iterations_per_epoch):
            stacks, targets = sample_patches(dataset, config.batch_size, config.patch, state.rng)
            snapshot = _snapshot(state)
            loss = l2_fidelity(develop(nip, stacks, config.clip), targets)
            _check_finite(float(loss.data), "l2_loss", state, snapshot)
            grads = ad.backward(loss, list(nip.values()))
            adam_step(state.opt_main, nip, _grads_by_name(grads, nip))
            losses.append(float(loss.data))
        report = LossReport(epoch=state.epoch, lr=lr, l2_loss=float(np.mean(losses)))
        if state.fid_stacks is not None and (state.epoch + 1) % config.validate_every == 0:
            report.val_l2, report.psnr, report.ssim = evaluate_fidelity(nip, state.fid_stacks, state.fid_targets,
                                                                       config.clip)
        state.history.append(report)
        state.epoch += 1
        if _relative_change_small(state.history, config.early_stop_window, config.early_stop_tol):
            state.stopped_early = True
        if on_epoch:
            on_epoch(state)
    return state


def train_joint(config: TrainConfig, dataset, nip: ParamSet, fan: ParamSet, val_dataset=None,
                channel_cfg: ChannelConfig | None = None, resume: TrainState | None = None,
                on_epoch: Callable[[TrainState], None] | None = None) -> TrainState:
    """Mode ``f``: FAN only, NIP frozen.  Mode ``f+n``: FAN and NIP jointly plus a fidelity step."""
    config.validate()
    if config.mode not in ("f", "f+n"):
        raise InputError(f"train_joint needs mode 'f' or 'f+n', got {config.mode!r}")
    channel_cfg = channel_cfg or ChannelConfig()
    state = resume or _init_state(config, nip, fan, val_dataset or dataset)
    state.config = config
    nip, fan = state.nip, state.fan
    joint = config.mode == "f+n"
    nip.requires_grad_(joint)
    fan.requires_grad_(True)
    while state.epoch < config.epochs:
        lr = lr_schedule(config.lr, state.epoch, config.lr_period, config.lr_decay)
        state.opt_main.lr = lr
        if joint:
            base = config.nip_lr if config.nip_lr is not None else config.lr
            state.opt_fidelity.lr = lr_schedule(base, state.epoch, config.lr_period, config.lr_decay)
        ce_losses, l2_losses = [], []
        for _ in range(config.iterations_per_epoch):
            stacks, targets = sample_patches(dataset, config.batch_size, config.patch, state.rng)
            snapshot = _snapshot(state)
            if joint and config.fidelity_first:
                l2_losses.append(_fidelity_step(state, stacks, targets, snapshot))
            # Step 1: classification loss through the whole acquisition and distribution chain.
            rgb = develop(nip, stacks, config.clip)
            images, labels = branch_all(rgb, channel_cfg, config.channel)
            ce, _ = ad.softmax_cross_entropy(fan_logits(fan, images), labels)
            _check_finite(float(ce.data), "ce_loss", state, snapshot)
            wrt = list(fan.values()) + (list(nip.values()) if joint else [])
            grads = ad.backward(ce, wrt)
            named = _grads_by_name(grads, fan, "fan/")
            if joint:
                named.update(_grads_by_name(grads, nip, "nip/"))
            adam_step(state.opt_main, _prefixed(fan, nip if joint else None), named,
                      {"nip/": state.opt_fidelity.lr} if joint else None)
            project_constrained(fan)
            ce_losses.append(float(ce.data))
            # Step 2: fidelity loss on a fresh NIP forward pass.
            if joint and not config.fidelity_first:
                l2_losses.append(_fidelity_step(state, stacks, targets, snapshot))
            elif not joint:
                l2_losses.append(float(l2_fidelity(Tensor(rgb.data), targets).data))
        report = LossReport(epoch=state.epoch, lr=lr, ce_loss=float(np.mean(ce_losses)),
                            l2_loss=float(np.mean(l2_losses)))
        if (state.epoch + 1) % config.validate_every == 0:
            _validate_joint(state, channel_cfg, report)
        state.history.append(report)
        state.epoch += 1
        if on_epoch:
            on_epoch(state)
    return state


def _fidelity_step(state: TrainState, stacks, targets, snapshot) -> float:
    nip = state.nip
    l2 = l2_fidelity(develop(nip, stacks, state.config.clip), targets)
    _check_finite(float(l2.data), "l2_loss", state, snapshot)
    adam_step(state.opt_fidelity, nip, _grads_by_name(ad.backward(l2, list(nip.values())), nip))
    return float(l2.data)


def _prefixed(fan: ParamSet, nip: ParamSet | None) -> dict:
    out = {"fan/" + k: v for k, v in fan.items()}
    if nip is not None:
        out.update({"nip/" + k: v for k, v in nip.items()})
    return out


def _validate_joint(state: TrainState, channel_cfg: ChannelConfig, report: LossReport) -> None:
    cfg = state.config
    if state.val_stacks is not None:
        labels, preds = classify(state.nip, state.fan, state.val_stacks, channel_cfg, cfg.channel, cfg.clip,
                                 max(1, cfg.eval_chunk // N_CLASSES))
        cm = confusion(labels, preds)
        report.accuracy = cm.accuracy
        report.per_class = tuple(float(v) for v in cm.per_class_accuracy())
    if state.fid_stacks is not None:
        report.val_l2, report.psnr, report.ssim = evaluate_fidelity(state.nip, state.fid_stacks,
                                                                   state.fid_targets, cfg.clip)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
