"""Synthetic speech-like corpus: label sequences rendered to noisy frames.

Each label owns a random prototype vector.  An utterance of 2-8 labels is
rendered by repeating each label's prototype for a random duration (time
dilation) and adding Gaussian noise.  Consecutive labels always differ so
that label boundaries are visible in the frames.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import checkpoint

SPLITS = ("train", "dev", "test")


@dataclass
class CorpusConfig:
    seed: int = 7
    n_train: int = 200
    n_dev: int = 50
    n_test: int = 50
    input_dim: int = 16
    vocab_size: int = 16
    min_labels: int = 2
    max_labels: int = 8
    min_dur: int = 2
    max_dur: int = 4
    noise: float = 0.3


@dataclass
class Utterance:
    feats: np.ndarray
    labels: np.ndarray

    @property
    def num_frames(self) -> int:
        return self.feats.shape[0]


@dataclass
class Corpus:
    prototypes: np.ndarray
    splits: dict[str, list[Utterance]] = field(default_factory=dict)

    def __getitem__(self, split: str) -> list[Utterance]:
        return self.splits[split]


def _render(labels: np.ndarray, prototypes: np.ndarray, cfg: CorpusConfig, rng: np.random.Generator):
    durs = rng.integers(cfg.min_dur, cfg.max_dur + 1, size=len(labels))
    frames = np.repeat(prototypes[labels], durs, axis=0)
    return frames + rng.normal(0.0, cfg.noise, size=frames.shape)


def _labels(cfg: CorpusConfig, rng: np.random.Generator) -> np.ndarray:
    n = int(rng.integers(cfg.min_labels, cfg.max_labels + 1))
    out = [int(rng.integers(cfg.vocab_size))]
    for _ in range(n - 1):
        # uniform over the V-1 labels that differ from the previous one
        k = int(rng.integers(cfg.vocab_size - 1))
        out.append(k if k < out[-1] else k + 1)
    return np.array(out, dtype=np.int64)


def generate_corpus(cfg: CorpusConfig) -> Corpus:
    rng = np.random.default_rng(cfg.seed)
    prototypes = rng.normal(0.0, 1.0, size=(cfg.vocab_size, cfg.input_dim))
    corpus = Corpus(prototypes)
    for split, n in zip(SPLITS, (cfg.n_train, cfg.n_dev, cfg.n_test)):
        utts = []
        for _ in range(n):
            labels = _labels(cfg, rng)
            utts.append(Utterance(_render(labels, prototypes, cfg, rng), labels))
        corpus.splits[split] = utts
    return corpus


# -- on-disk container ------------------------------------------------------

def save_split(path: str | os.PathLike, utts: Sequence[Utterance], meta: dict | None = None) -> None:
    """Frames and labels concatenated, with int64 offset tables."""
    frame_off = np.cumsum([0] + [u.num_frames for u in utts]).astype(np.int64)
    label_off = np.cumsum([0] + [len(u.labels) for u in utts]).astype(np.int64)
    dim = utts[0].feats.shape[1] if utts else 0
    tensors = {
        "features": np.concatenate([u.feats for u in utts]) if utts else np.zeros((0, dim)),
        "frame_offsets": frame_off,
        "labels": np.concatenate([u.labels for u in utts]).astype(np.int64) if utts else np.zeros(0, np.int64),
        "label_offsets": label_off,
    }
    checkpoint.save(path, tensors, {"kind": "corpus_split", "num_utterances": len(utts), **(meta or {})})


def load_split(path: str | os.PathLike) -> list[Utterance]:
    t, _ = checkpoint.load(path)
    fo, lo = t["frame_offsets"], t["label_offsets"]
    return [Utterance(t["features"][fo[i]:fo[i + 1]], t["labels"][lo[i]:lo[i + 1]]) for i in range(len(fo) - 1)]


def write_corpus(directory: str | os.PathLike, corpus: Corpus, cfg: CorpusConfig, force: bool = False) -> list[Path]:
    directory = Path(directory)
    paths = [directory / f"{s}.kdp" for s in SPLITS]
    existing = [p for p in paths if p.exists()]
    if existing and not force:
        raise FileExistsError(f"{existing[0]} exists; pass --force to overwrite")
    directory.mkdir(parents=True, exist_ok=True)
    for split, p in zip(SPLITS, paths):
        save_split(p, corpus.splits[split], {"split": split, "seed": cfg.seed})
    checkpoint.save(directory / "prototypes.kdp", {"prototypes": corpus.prototypes}, {"seed": cfg.seed})
    return paths + [directory / "prototypes.kdp"]


def read_corpus(directory: str | os.PathLike) -> Corpus:
    directory = Path(directory)
    t, _ = checkpoint.load(directory / "prototypes.kdp")
    corpus = Corpus(t["prototypes"])
    for split in SPLITS:
        corpus.splits[split] = load_split(directory / f"{split}.kdp")
    return corpus


# -- batching ---------------------------------------------------------------

@dataclass
class Batch:
    feats: np.ndarray          # (B, T, d), zero padded
    lengths: np.ndarray        # (B,)
    targets: np.ndarray        # (B, U), zero padded
    target_lengths: np.ndarray  # (B,)
    index: np.ndarray          # utterance ids within the split

    @property
    def size(self) -> int:
        return len(self.lengths)


def make_batch(utts: Sequence[Utterance], index=None) -> Batch:
    if not utts:
        raise ValueError("cannot batch an empty list of utterances")
    B = len(utts)
    T = max(u.num_frames for u in utts)
    U = max(len(u.labels) for u in utts)
    d = utts[0].feats.shape[1]
    feats = np.zeros((B, T, d))
    targets = np.zeros((B, U), dtype=np.int64)
    for i, u in enumerate(utts):
        feats[i, :u.num_frames] = u.feats
        targets[i, :len(u.labels)] = u.labels
    return Batch(feats, np.array([u.num_frames for u in utts]), targets,
                 np.array([len(u.labels) for u in utts]), np.arange(B) if index is None else np.asarray(index))


class BatchSampler:
    """Deterministic shuffled mini-batches; epoch ``e`` uses permutation seed ``(seed, e)``."""

    def __init__(self, utts: Sequence[Utterance], batch_size: int, seed: int):
        self.utts = list(utts)
        self.batch_size = batch_size
        self.seed = seed

    def batches_for_epoch(self, epoch: int) -> list[np.ndarray]:
        perm = np.random.default_rng([self.seed, epoch]).permutation(len(self.utts))
        n = len(perm) // self.batch_size
        return [perm[i * self.batch_size:(i + 1) * self.batch_size] for i in range(max(n, 1))]

    def stream(self) -> Iterator[Batch]:
        epoch = 0
        while True:
            for idx in self.batches_for_epoch(epoch):
                yield make_batch([self.utts[i] for i in idx], idx)
            epoch += 1


def fixed_batches(utts: Sequence[Utterance], batch_size: int) -> list[Batch]:
    """Unshuffled batches covering every utterance once (for evaluation)."""
    return [make_batch(utts[i:i + batch_size], np.arange(i, min(i + batch_size, len(utts))))
            for i in range(0, len(utts), batch_size)]
