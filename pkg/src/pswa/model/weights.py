"""Named tensor bundle holding every model parameter."""

from __future__ import annotations

from collections.abc import Mapping
import hashlib

import numpy as np

from ..tensor import F32, Rng, init_tensor
from .config import ModelConfig, parameter_specs


class ModelWeights(Mapping):
    """Immutable mapping of parameter name to float32 array."""

    def __init__(self, tensors: Mapping[str, np.ndarray]):
        self._tensors = {}
        for name, arr in tensors.items():
            a = np.array(arr, dtype=F32, copy=True)
            a.setflags(write=False)
            self._tensors[name] = a

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def validate(self, cfg: ModelConfig) -> None:
        """Raise unless names and shapes match ``cfg`` exactly."""
        specs = {p.name: p for p in parameter_specs(cfg)}
        missing = [n for n in specs if n not in self._tensors]
        if missing:
            raise ValueError(f"weights missing {len(missing)} tensors, first: {missing[0]}")
        extra = [n for n in self._tensors if n not in specs]
        if extra:
            raise ValueError(f"weights carry unexpected tensor {extra[0]}")
        for name, spec in specs.items():
            if self._tensors[name].shape != spec.shape:
                raise ValueError(f"{name}: shape {self._tensors[name].shape} != expected {spec.shape}")

    def updated(self, mapping: Mapping[str, np.ndarray]) -> "ModelWeights":
        merged = dict(self._tensors)
        merged.update(mapping)
        return ModelWeights(merged)

    def digest(self) -> bytes:
        h = hashlib.sha256()
        for name in sorted(self._tensors):
            arr = self._tensors[name]
            h.update(name.encode())
            h.update(np.asarray(arr.shape, dtype="<u4").tobytes())
            h.update(arr.astype("<f4").tobytes())
        return h.digest()[:8]


def generate_weights(cfg: ModelConfig, seed: int) -> ModelWeights:
    """Deterministic initialisation; each tensor draws from its own named stream."""
    tensors = {}
    for spec in parameter_specs(cfg):
        rng = Rng.for_parameter(seed, spec.name)
        arr = init_tensor(rng, spec.shape, spec.scheme, spec.fan_in)
        if spec.scheme == "ones" and spec.fill != 1.0:
            arr = arr * F32(spec.fill)
        tensors[spec.name] = arr
    w = ModelWeights(tensors)
    w.validate(cfg)
    return w
