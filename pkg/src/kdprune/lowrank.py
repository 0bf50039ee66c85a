"""Low-rank factorized dense layers with rank gates between the factors."""

from __future__ import annotations

import numpy as np

from . import tensor as tc
from .nn import Module
from .tensor import DimensionError, Tensor


class NumericalError(RuntimeError):
    pass


def init_rank(m: int, n: int) -> int:
    """Rank at which ``r * (m + n)`` matches the dense ``m * n`` budget."""
    if m < 1 or n < 1:
        raise ValueError(f"layer dimensions must be positive, got ({m}, {n})")
    return max(1, (m * n) // (m + n))


class FactorizedLinear(Module):
    """``y = ((x @ A) * z) @ B.T + bias`` with ``A`` (m, r), ``B`` (n, r).

    ``z`` is the rank-gate vector looked up under this layer's path; without a
    gate the layer is the reconstruction ``A @ B.T``.
    """

    def __init__(self, A: np.ndarray, B: np.ndarray, bias: np.ndarray | None = None):
        A, B = np.asarray(A, dtype=tc.get_default_dtype()), np.asarray(B, dtype=tc.get_default_dtype())
        if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
            raise DimensionError(f"factor shapes {A.shape} and {B.shape} do not share a rank axis")
        # C order keeps matmul results independent of how the factors were produced
        self.A = Tensor(np.ascontiguousarray(A), requires_grad=True)
        self.B = Tensor(np.ascontiguousarray(B), requires_grad=True)
        self.bias = None if bias is None else Tensor(bias, requires_grad=True)

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.B.shape[0]

    @property
    def r(self) -> int:
        return self.A.shape[1]

    @property
    def n_in(self) -> int:
        return self.m

    @property
    def n_out(self) -> int:
        return self.n

    def dense_weight_count(self) -> int:
        return self.r * (self.m + self.n)

    def param_count(self) -> int:
        return self.dense_weight_count() + (0 if self.bias is None else self.n)

    def reconstruct(self, z: np.ndarray | None = None) -> np.ndarray:
        A = self.A.data if z is None else self.A.data * np.asarray(z)
        return A @ self.B.data.T

    def __call__(self, x: Tensor, gates=None) -> Tensor:
        z = None if gates is None else gates.get(self._path)
        return lrf_forward(self, x, z)


def lrf_forward(layer: FactorizedLinear, x: Tensor, z=None) -> Tensor:
    if x.shape[-1] != layer.m:
        raise DimensionError(f"{layer.path or 'lrf'}: input width {x.shape[-1]} != m={layer.m}")
    if layer.r == 0:
        shape = x.shape[:-1] + (layer.n,)
        if layer.bias is None:
            return tc.zeros(shape)
        # bias-only map; keep the graph connected to the bias parameter
        return tc.add(tc.zeros(shape), layer.bias)
    h = tc.linear(x, layer.A)
    if z is not None:
        if z.shape != (layer.r,):
            raise DimensionError(f"{layer.path or 'lrf'}: gate length {z.shape} != r={layer.r}")
        h = h * z
    return tc.linear(h, tc.transpose(layer.B), layer.bias)


def factorize(W: np.ndarray, r: int, bias: np.ndarray | None = None) -> FactorizedLinear:
    """Rank-``r`` truncated SVD split ``A = U_r S_r``, ``B = V_r``."""
    W = np.asarray(W, dtype=np.float64)
    m, n = W.shape
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank {r} outside [1, min({m}, {n})]")
    try:
        U, S, Vt = np.linalg.svd(W, full_matrices=False)
    except np.linalg.LinAlgError as e:
        finite = bool(np.all(np.isfinite(W)))
        cond = np.linalg.cond(W) if finite else float("nan")
        raise NumericalError(f"SVD did not converge for {m}x{n} matrix (finite={finite}, cond={cond:.3e})") from e
    A = U[:, :r] * S[:r]
    B = Vt[:r].T.copy()
    return FactorizedLinear(A, B, None if bias is None else np.array(bias, dtype=np.float64))


def prune_ranks(layer: FactorizedLinear, zhat: np.ndarray) -> FactorizedLinear:
    """Drop ranks whose deterministic gate is 0 and fold the rest into ``A``."""
    zhat = np.asarray(zhat.data if isinstance(zhat, Tensor) else zhat, dtype=np.float64)
    if zhat.shape != (layer.r,):
        raise DimensionError(f"gate length {zhat.shape} != r={layer.r}")
    keep = np.flatnonzero(zhat > 0)
    A = layer.A.data[:, keep] * zhat[keep]
    B = layer.B.data[:, keep]
    out = FactorizedLinear(A, B, None if layer.bias is None else layer.bias.data.copy())
    out._path = layer._path
    return out
