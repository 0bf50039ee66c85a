"""A small module system: parameter discovery, state dicts, common layers."""

from __future__ import annotations

import copy
from typing import Iterator

import numpy as np

from . import tensor as tc
from .tensor import Tensor


class Module:
    """Base class.  Public ``Tensor`` attributes are parameters; public
    ``Module`` attributes (or lists of them) are submodules."""

    _path: str = ""

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for k, v in vars(self).items():
            if k.startswith("_"):
                continue
            if isinstance(v, Module):
                yield k, v
            elif isinstance(v, (list, tuple)) and v and all(isinstance(m, Module) for m in v):
                for i, m in enumerate(v):
                    yield f"{k}.{i}", m

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for k, m in self.children():
            yield from m.named_modules(f"{prefix}.{k}" if prefix else k)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for k, v in vars(self).items():
            if isinstance(v, Tensor) and not k.startswith("_"):
                yield (f"{prefix}.{k}" if prefix else k), v
        for k, m in self.children():
            yield from m.named_parameters(f"{prefix}.{k}" if prefix else k)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters() if p.requires_grad]

    def assign_paths(self, prefix: str = "") -> "Module":
        for name, m in self.named_modules(prefix):
            m._path = name
        return self

    @property
    def path(self) -> str:
        return self._path

    def requires_grad_(self, flag: bool = True) -> "Module":
        for _, p in self.named_parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        for k, p in own.items():
            if k not in state:
                raise KeyError(f"missing tensor {k!r}")
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"tensor {k!r}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        extra = sorted(set(state) - set(own))
        if extra:
            raise KeyError(f"unexpected tensor {extra[0]!r}")

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def clone(self) -> "Module":
        return copy.deepcopy(self)


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


class Linear(Module):
    """Affine map ``x @ weight + bias`` with ``weight`` of shape (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None,
                 bias: bool = True, scale: float = 1.0):
        rng = rng or np.random.default_rng(0)
        self.weight = _param(rng.normal(0.0, scale / np.sqrt(n_in), size=(n_in, n_out)))
        self.bias = _param(np.zeros(n_out)) if bias else None

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def dense_weight_count(self) -> int:
        return self.weight.size

    def __call__(self, x: Tensor, gates=None) -> Tensor:
        return tc.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = _param(np.ones(dim))
        self.shift = _param(np.zeros(dim))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return tc.layernorm(x, axis=-1, eps=self._eps) * self.gain + self.shift


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator | None = None, scale: float = 1.0):
        rng = rng or np.random.default_rng(0)
        self.table = _param(rng.normal(0.0, scale, size=(n, dim)))

    def __call__(self, idx) -> Tensor:
        return tc.embedding(self.table, idx)
