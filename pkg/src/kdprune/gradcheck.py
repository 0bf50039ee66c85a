"""Central finite-difference gradient checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad, trace


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    tol: float
    passed: bool
    n_checked: int
    diagnostics: list[str] = field(default_factory=list)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max rel err {self.max_rel_err:.3e} (tol {self.tol:g}, {self.n_checked} entries)"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Entrywise ``|a - n| / max(|a|, |n|, floor)``."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(f: Callable[..., Tensor], x: Tensor | Sequence[Tensor], eps: float = 1e-5,
               tol: float = 1e-4, name: str = "f", max_entries: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*xs)`` with central differences.

    ``f`` must be deterministic: any noise has to be frozen inside the closure.
    When ``max_entries`` is set, a seeded random subset of each input's entries
    is perturbed.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    out = f(*xs)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    diagnostics = _nonfinite_nodes(out)
    if diagnostics:
        return GradCheckReport(name, float("inf"), tol, False, 0, diagnostics)
    if not out.requires_grad:
        analytic = [np.zeros_like(t.data) for t in xs]
    else:
        out.backward()
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in xs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    count = 0
    with no_grad():
        for t, ga in zip(xs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(*xs).data)
                flat[i] = orig - eps
                fm = float(f(*xs).data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * eps)
                if not np.isfinite(num):
                    diagnostics.append(f"non-finite finite difference at {t.name or 'input'}[{i}]")
                    worst = float("inf")
                    continue
                err = float(relative_error(np.array(ga.reshape(-1)[i]), np.array(num)))
                worst = max(worst, err)
                count += 1
    return GradCheckReport(name, worst, tol, worst <= tol and not diagnostics, count, diagnostics)


def _nonfinite_nodes(out: Tensor) -> list[str]:
    msgs = []
    for node in trace(out).nodes:
        if not np.all(np.isfinite(node.output.data)):
            msgs.append(f"non-finite output at node {node.node_id} (op {node.op})")
    return msgs
