"""Binary container for checkpoints and raw samples, plus image file IO.

Layout (all integers little-endian)::

    b"NIPC" | u16 version | u16 len + kind (utf-8) | u32 len + JSON meta
    | u32 tensor count | per tensor: u16 len + name, u8 ndim, u32 dims..., float32 data
    | sha256 of everything above (32 bytes)
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .params import ParamSet
from .raw import BayerStack, RawFrame, Sample

MAGIC = b"NIPC"
VERSION = 1
SUFFIX = ".nipc"
IMAGE_SUFFIXES = (".png", ".ppm", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class IntegrityError(RuntimeError):
    """Container is truncated, corrupted or not a container at all."""


class VersionError(RuntimeError):
    """Container was written by an unsupported format version."""


def encode(kind: str, tensors: dict, meta: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    kb = kind.encode()
    parts += [struct.pack("<H", len(kb)), kb]
    mb = json.dumps(meta or {}, sort_keys=True).encode()
    parts += [struct.pack("<I", len(mb)), mb, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(getattr(arr, "data", arr))
        if arr.dtype != np.float32:
            raise TypeError(f"tensor {name!r} is {arr.dtype}; containers hold float32 only")
        nb = name.encode()
        parts += [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.astype("<f4").tobytes()]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes) -> tuple[str, dict, dict]:
    """Inverse of :func:`encode`; returns ``(kind, tensors, meta)``."""
    if len(blob) < len(MAGIC) + 2 + 32 or blob[:4] != MAGIC:
        raise IntegrityError("not a NIPC container")
    body, digest = blob[:-32], blob[-32:]
    (version,) = struct.unpack_from("<H", body, 4)
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError("checksum mismatch (file truncated or corrupted)")
    if version != VERSION:
        raise VersionError(f"container version {version} is not supported (expected {VERSION})")
    try:
        pos = 6
        (n,) = struct.unpack_from("<H", body, pos)
        kind = body[pos + 2:pos + 2 + n].decode()
        pos += 2 + n
        (n,) = struct.unpack_from("<I", body, pos)
        meta = json.loads(body[pos + 4:pos + 4 + n])
        pos += 4 + n
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2:pos + 2 + n].decode()
            pos += 2 + n
            (ndim,) = struct.unpack_from("<B", body, pos)
            shape = struct.unpack_from(f"<{ndim}I", body, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape)) * 4
            if pos + size > len(body):
                raise IntegrityError(f"tensor {name!r} runs past end of container")
            tensors[name] = np.frombuffer(body, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
            pos += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IntegrityError(f"malformed container: {e}") from e
    if pos != len(body):
        raise IntegrityError("trailing bytes after tensor table")
    return kind, tensors, meta


def write_container(path, kind: str, tensors: dict, meta: dict | None = None) -> None:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(kind, tensors, meta))
    os.replace(tmp, path)


def read_container(path) -> tuple[str, dict, dict]:
    return decode(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Parameter checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ParamSet, meta: dict | None = None, kind: str | None = None) -> None:
    from .nip import nip_kind
    if kind is None:
        kind = "fan" if "constrained_w" in params else nip_kind(params)
    write_container(path, kind, {k: v.data for k, v in params.items()}, meta)


def load_checkpoint(path) -> tuple[ParamSet, dict, str]:
    kind, tensors, meta = read_container(path)
    return ParamSet.from_arrays(tensors), meta, kind


# ---------------------------------------------------------------------------
# Training state (for exact resume)
# ---------------------------------------------------------------------------

def _rng_state_to_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_json(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def save_train_state(path, state) -> None:
    from dataclasses import asdict
    tensors = {f"nip/{k}": v.data for k, v in state.nip.items()}
    if state.fan is not None:
        tensors.update({f"fan/{k}": v.data for k, v in state.fan.items()})
    tensors.update(state.opt_main.arrays("opt_main/"))
    if state.opt_fidelity is not None:
        tensors.update(state.opt_fidelity.arrays("opt_fid/"))
    for name in ("val_stacks", "val_targets", "fid_stacks", "fid_targets"):
        arr = getattr(state, name)
        if arr is not None:
            tensors[f"data/{name}"] = arr
    meta = {
        "config": asdict(state.config),
        "epoch": state.epoch,
        "stopped_early": state.stopped_early,
        "history": [asdict(r) for r in state.history],
        "rng": _rng_state_to_json(state.rng),
        "opt_main": state.opt_main.meta(),
        "opt_fid": state.opt_fidelity.meta() if state.opt_fidelity is not None else None,
    }
    write_container(path, "train-state", tensors, meta)


def load_train_state(path):
    from .training import AdamState, LossReport, TrainConfig, TrainState
    kind, tensors, meta = read_container(path)
    if kind != "train-state":
        raise IntegrityError(f"expected a train-state container, got {kind!r}")

    def group(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    fan = group("fan/")
    state = TrainState(
        config=TrainConfig(**meta["config"]),
        nip=ParamSet.from_arrays(group("nip/")),
        fan=ParamSet.from_arrays(fan) if fan else None,
        opt_main=AdamState.restore(meta["opt_main"], group("opt_main/"), ""),
        opt_fidelity=AdamState.restore(meta["opt_fid"], group("opt_fid/"), "") if meta["opt_fid"] else None,
        rng=_rng_from_json(meta["rng"]),
        epoch=meta["epoch"],
        history=[LossReport(**{**r, "per_class": tuple(r["per_class"])}) for r in meta["history"]],
        stopped_early=meta["stopped_early"],
    )
    for name in ("val_stacks", "val_targets", "fid_stacks", "fid_targets"):
        if f"data/{name}" in tensors:
            setattr(state, name, tensors[f"data/{name}"])
    return state


# ---------------------------------------------------------------------------
# Raw samples and datasets
# ---------------------------------------------------------------------------

def save_sample(path, sample: Sample) -> None:
    f = sample.frame
    meta = {"name": sample.name, "black_level": f.black_level, "saturation": f.saturation,
            "wb_gains": list(f.wb_gains), "cfa_order": f.cfa_order}
    write_container(path, "raw-sample", {"mosaic": f.mosaic, "stack": sample.stack.data,
                                         "target": sample.target}, meta)


def load_sample(path) -> Sample:
    kind, t, meta = read_container(path)
    if kind != "raw-sample":
        raise IntegrityError(f"expected a raw-sample container, got {kind!r}")
    frame = RawFrame(t["mosaic"], meta["black_level"], meta["saturation"], tuple(meta["wb_gains"]),
                     meta["cfa_order"])
    return Sample(frame, BayerStack(t["stack"], meta["cfa_order"]), t["target"], meta["name"])


def save_dataset(directory, samples) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(samples):
        p = directory / f"sample_{i:05d}{SUFFIX}"
        save_sample(p, s)
        paths.append(p)
    return paths


def load_dataset(directory) -> list[Sample]:
    paths = sorted(Path(directory).glob(f"*{SUFFIX}"))
    if not paths:
        raise FileNotFoundError(f"no {SUFFIX} samples in {directory}")
    return [load_sample(p) for p in paths]


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    """8-bit RGB array ``[h, w, 3]``."""
    from PIL import Image
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_image(path, rgb: np.ndarray) -> None:
    """Save an RGB array in ``[0, 1]`` as 8-bit PNG/PPM (format from suffix)."""
    from PIL import Image
    arr = np.round(np.clip(np.asarray(rgb, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def read_image_dir(directory) -> list[np.ndarray]:
    paths = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise FileNotFoundError(f"no images in {directory}")
    return [read_image(p) for p in paths]


# Bundled photographs used when no source directory is given.  The split is
# by image, so validation patches never share content with training patches.
BUILTIN_TRAIN = ("astronaut", "chelsea", "rocket", "immunohistochemistry", "retina", "hubble_deep_field",
                 "sklearn:china.jpg")
BUILTIN_VAL = ("coffee", "sklearn:flower.jpg")


def _builtin_image(name: str) -> np.ndarray:
    if name.startswith("sklearn:"):
        from sklearn.datasets import load_sample_image
        return np.asarray(load_sample_image(name.split(":", 1)[1]))
    import skimage.data
    return np.asarray(getattr(skimage.data, name)())


def builtin_sources(split: str = "train") -> list[np.ndarray]:
    names = {"train": BUILTIN_TRAIN, "val": BUILTIN_VAL}.get(split)
    if names is None:
        raise ValueError(f"unknown builtin split {split!r}")
    return [_builtin_image(n) for n in names]


def load_samples(spec: str, sensor=None) -> list[Sample]:
    """``builtin:train`` / ``builtin:val`` (full-frame synthetic raw) or a directory of sample containers."""
    from .raw import full_frame_sample
    if spec.startswith("builtin:"):
        split = spec.split(":", 1)[1]
        return [full_frame_sample(img, sensor, name=f"{split}{i}") for i, img in enumerate(builtin_sources(split))]
    return load_dataset(spec)
