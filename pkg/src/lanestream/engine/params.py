"""Named parameter store with deterministic init and flat-file checkpoints.

Checkpoint format: all parameters concatenated into one little-endian
float64 binary blob, plus a JSON sidecar mapping each name to its shape
and element offset.
"""
from __future__ import annotations

import json
import os

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Ordered collection of trainable tensors, created once by name."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}

    def param(self, name: str, shape, init: str = "xavier", scale: float = 1.0) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        shape = tuple(shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "xavier":
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            fan_out = shape[-1]
            bound = scale * np.sqrt(6.0 / (fan_in + fan_out))
            data = self.rng.uniform(-bound, bound, size=shape)
        elif init == "normal":
            data = scale * self.rng.standard_normal(shape)
        elif init == "constant":
            data = np.full(shape, scale)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state_vector(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self._params.values()])

    def save(self, path_base: str) -> tuple[str, str]:
        """Write <base>.bin and <base>.json atomically, return both paths."""
        blob = np.empty(self.num_values(), dtype="<f8")
        index, offset = {}, 0
        for name, t in self._params.items():
            n = t.data.size
            blob[offset : offset + n] = t.data.ravel()
            index[name] = {"shape": list(t.data.shape), "offset": offset}
            offset += n
        bin_path, json_path = path_base + ".bin", path_base + ".json"
        tmp = f"{bin_path}.tmp.{os.getpid()}"
        blob.tofile(tmp)
        os.replace(tmp, bin_path)
        sidecar = {"dtype": "<f8", "total": offset, "params": index}
        tmp = f"{json_path}.tmp.{os.getpid()}"
        with open(tmp, "w") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, json_path)
        return bin_path, json_path

    def load(self, path_base: str):
        with open(path_base + ".json") as fh:
            sidecar = json.load(fh)
        blob = np.fromfile(path_base + ".bin", dtype=sidecar.get("dtype", "<f8"))
        if blob.size != sidecar["total"]:
            raise ValueError(
                f"checkpoint blob has {blob.size} values, sidecar says {sidecar['total']}"
            )
        index = sidecar["params"]
        missing = set(self._params) - set(index)
        extra = set(index) - set(self._params)
        if missing or extra:
            raise ValueError(
                f"checkpoint parameter names mismatch: missing={sorted(missing)}, extra={sorted(extra)}"
            )
        for name, t in self._params.items():
            entry = index[name]
            shape = tuple(entry["shape"])
            if shape != t.data.shape:
                raise ValueError(
                    f"checkpoint shape mismatch for {name!r}: {shape} vs {t.data.shape}"
                )
            start = entry["offset"]
            t.data = blob[start : start + t.data.size].reshape(shape).astype(np.float64)
