"""Shared training-loop plumbing: metrics lines, divergence guard, teacher features."""

from __future__ import annotations

import json
import math
import os
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import tensor as tc
from ..data import Batch, Utterance, fixed_batches


class DivergenceError(FloatingPointError):
    pass


def check_finite(loss, step: int, stage: str, parts: dict | None = None) -> None:
    value = float(loss.data)
    if not math.isfinite(value):
        detail = ""
        if parts:
            detail = " (" + ", ".join(f"{k}={float(getattr(v, 'data', v)):.6g}" for k, v in parts.items()) + ")"
        raise DivergenceError(f"{stage}: non-finite loss {value} at step {step}{detail}")


class MetricsLog:
    """Line-delimited JSON metrics; written every ``every`` steps and on the last step.

    Lines carry no timestamps so two identical runs give identical files.
    """

    def __init__(self, path: str | os.PathLike | None = None, every: int = 10, last_step: int | None = None):
        self.path = None if path is None else Path(path)
        self.every = max(int(every), 1)
        self.last_step = last_step
        self.records: list[dict] = []

    def maybe(self, step: int, **fields) -> None:
        if step % self.every == 0 or step == 1 or step == self.last_step:
            self.write(step=step, **fields)

    def write(self, **fields) -> None:
        rec = {k: _plain(v) for k, v in fields.items()}
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _plain(v):
    if isinstance(v, tc.Tensor):
        v = v.data
    if isinstance(v, np.ndarray):
        return v.tolist() if v.ndim else float(v)
    if isinstance(v, np.generic):
        return v.item()
    return v


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


class TeacherCache:
    """Per-utterance teacher layer outputs, computed once with gradients off.

    Valid frames do not depend on padding (attention and convolution mask
    padded frames), so cached features can be re-padded into any batch.
    """

    def __init__(self, encoder, utts: Sequence[Utterance], batch_size: int = 25):
        self.layers: list[list[np.ndarray]] = [None] * len(utts)
        with tc.no_grad():
            for b in fixed_batches(utts, batch_size):
                out = encoder(b.feats, b.lengths)
                for row, (i, n) in enumerate(zip(b.index, b.lengths)):
                    self.layers[i] = [h.data[row, :n].copy() for h in out.layers]
        self.n_causal = encoder.cfg.causal_layers

    def batch_layers(self, batch: Batch) -> list[np.ndarray]:
        T = batch.feats.shape[1]
        out = []
        for k in range(len(self.layers[batch.index[0]])):
            arr = np.zeros((batch.size, T, self.layers[batch.index[0]][k].shape[1]))
            for row, i in enumerate(batch.index):
                h = self.layers[i][k]
                arr[row, :h.shape[0]] = h
            out.append(arr)
        return out

    def taps(self, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        layers = self.batch_layers(batch)
        return layers[self.n_causal - 1], layers[-1]


class LiveTeacher:
    """Same interface as :class:`TeacherCache`, recomputing each batch.

    Cached features match a live forward only to roundoff (batch padding
    changes BLAS blocking); the live variant is bit-exact, which matters when
    student and teacher are identical and the l1 subgradient would amplify
    that roundoff.
    """

    def __init__(self, encoder):
        self.encoder = encoder
        self.n_causal = encoder.cfg.causal_layers

    def batch_layers(self, batch: Batch) -> list[np.ndarray]:
        with tc.no_grad():
            out = self.encoder(batch.feats, batch.lengths)
        return [h.data for h in out.layers]

    def taps(self, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        layers = self.batch_layers(batch)
        return layers[self.n_causal - 1], layers[-1]


def teacher_features(encoder, utts: Sequence[Utterance], cached: bool = True):
    return TeacherCache(encoder, utts) if cached else LiveTeacher(encoder)
