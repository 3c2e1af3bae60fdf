"""Named, ordered collections of trainable tensors."""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .exceptions import ConfigurationError


@dataclass
class ParamMeta:
    shape: tuple
    init: str
    regularize: bool = True  # included in the weight-decay term


class ModelParams:
    """Ordered name -> trainable tensor map with initializer provenance."""

    def __init__(self):
        self._tensors = {}
        self._meta = {}

    def add(self, name, tensor, init, regularize=True):
        if name in self._tensors:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        if not isinstance(tensor, Tensor) or not tensor.requires_grad:
            raise ConfigurationError(f"parameter {name!r} must be a requires_grad tensor")
        tensor.name = name
        self._tensors[name] = tensor
        self._meta[name] = ParamMeta(shape=tensor.shape, init=init, regularize=regularize)
        return tensor

    def merge(self, other, prefix):
        for name, tensor in other.items():
            meta = other.meta(name)
            key = f"{prefix}.{name}"
            if key in self._tensors:
                raise ConfigurationError(f"duplicate parameter name {key!r}")
            tensor.name = key
            self._tensors[key] = tensor
            self._meta[key] = meta
        return self

    def __len__(self):
        return len(self._tensors)

    def __contains__(self, name):
        return name in self._tensors

    def __getitem__(self, name):
        return self._tensors[name]

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self):
        return list(self._tensors.values())

    def meta(self, name):
        return self._meta[name]

    def regularized(self):
        return [t for n, t in self._tensors.items() if self._meta[n].regularize]

    def count(self):
        return sum(int(np.prod(t.shape)) for t in self._tensors.values())

    def breakdown(self):
        return {n: int(np.prod(t.shape)) for n, t in self._tensors.items()}

    def zero_grads(self):
        for t in self._tensors.values():
            t.grad = None

    def state_arrays(self):
        """Copies of the raw parameter values, suitable for checkpointing."""
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def load_state_arrays(self, arrays):
        missing = set(self._tensors) - set(arrays)
        extra = set(arrays) - set(self._tensors)
        if missing or extra:
            raise ConfigurationError(
                f"parameter set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for name, tensor in self._tensors.items():
            arr = np.asarray(arrays[name])
            if tuple(arr.shape) != tuple(tensor.shape):
                raise ConfigurationError(
                    f"parameter {name!r}: checkpoint shape {arr.shape} != model shape {tensor.shape}"
                )
            tensor.data = arr.astype(tensor.dtype, copy=True)
