"""Named collections of trainable tensors."""
from __future__ import annotations

import hashlib

import numpy as np

from .autodiff import Tensor


class ParamSet(dict):
    """Ordered ``name -> Tensor`` mapping holding one model's trainable parameters."""

    def count(self) -> int:
        return int(sum(t.size for t in self.values()))

    def copy(self) -> "ParamSet":
        return ParamSet((k, Tensor(np.array(v.data, order="C"), requires_grad=v.requires_grad, dtype=v.dtype))
                        for k, v in self.items())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def requires_grad_(self, flag: bool = True) -> "ParamSet":
        for t in self.values():
            t.requires_grad = flag
        return self

    def astype(self, dtype) -> "ParamSet":
        return ParamSet((k, Tensor(np.ascontiguousarray(v.data, dtype=dtype), requires_grad=v.requires_grad, dtype=dtype))
                        for k, v in self.items())

    def digest(self) -> str:
        """SHA-256 over names, shapes, dtypes and raw bytes."""
        h = hashlib.sha256()
        for name in sorted(self):
            arr = np.ascontiguousarray(self[name].data)
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.dtype.str.encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    @classmethod
    def from_arrays(cls, arrays: dict, requires_grad: bool = True, dtype=None) -> "ParamSet":
        return cls((k, Tensor(np.array(v, copy=True, order="C"), requires_grad=requires_grad, dtype=dtype))
                   for k, v in arrays.items())


def param_count(params) -> int:
    """Total number of scalar parameters in a mapping of tensors."""
    return int(sum(t.size for t in params.values()))
