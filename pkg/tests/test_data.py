import hashlib

import numpy as np
import pytest
from scipy.stats import chisquare

from kdprune.data import BatchSampler, CorpusConfig, fixed_batches, generate_corpus, make_batch, read_corpus, \
    write_corpus


def _digest(paths):
    return [hashlib.sha256(p.read_bytes()).hexdigest() for p in paths]


def test_regeneration_is_byte_identical(tmp_path):
    cfg = CorpusConfig(seed=7)
    a = write_corpus(tmp_path / "a", generate_corpus(cfg), cfg)
    b = write_corpus(tmp_path / "b", generate_corpus(cfg), cfg)
    assert _digest(a) == _digest(b)


def test_refuses_existing_output(tmp_path):
    cfg = CorpusConfig(n_train=3, n_dev=1, n_test=1)
    write_corpus(tmp_path, generate_corpus(cfg), cfg)
    with pytest.raises(FileExistsError):
        write_corpus(tmp_path, generate_corpus(cfg), cfg)
    write_corpus(tmp_path, generate_corpus(cfg), cfg, force=True)


def test_split_sizes_and_readback(tmp_path):
    cfg = CorpusConfig()
    corpus = generate_corpus(cfg)
    assert [len(corpus[s]) for s in ("train", "dev", "test")] == [200, 50, 50]
    write_corpus(tmp_path, corpus, cfg)
    back = read_corpus(tmp_path)
    for s in ("train", "dev", "test"):
        for u, v in zip(corpus[s], back[s]):
            np.testing.assert_array_equal(u.feats, v.feats)
            np.testing.assert_array_equal(u.labels, v.labels)


def test_labels_uniform_and_shaped():
    cfg = CorpusConfig()
    utts = [u for s in ("train", "dev", "test") for u in generate_corpus(cfg)[s]]
    labels = np.concatenate([u.labels for u in utts])
    assert chisquare(np.bincount(labels, minlength=cfg.vocab_size)).pvalue > 0.01
    for u in utts:
        assert cfg.min_labels <= len(u.labels) <= cfg.max_labels
        assert np.all(u.labels[1:] != u.labels[:-1])
        assert len(u.labels) * cfg.min_dur <= u.num_frames <= len(u.labels) * cfg.max_dur


def test_batches_pad_and_are_deterministic():
    utts = generate_corpus(CorpusConfig(n_train=20, n_dev=1, n_test=1))["train"]
    b = make_batch(utts[:3])
    assert b.feats.shape[0] == 3 and b.feats.shape[1] == max(u.num_frames for u in utts[:3])
    s1 = BatchSampler(utts, 4, seed=1).stream()
    s2 = BatchSampler(utts, 4, seed=1).stream()
    for _ in range(7):
        np.testing.assert_array_equal(next(s1).feats, next(s2).feats)
    assert sum(x.size for x in fixed_batches(utts, 6)) == 20
