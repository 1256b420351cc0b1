"""Seeded synthetic datasets standing in for the real corpora."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from matrain.errors import ConfigError

MASK_TOKEN = 0


@dataclass(eq=False)
class Dataset:
    name: str
    train_inputs: np.ndarray
    train_targets: np.ndarray
    val_inputs: np.ndarray
    val_targets: np.ndarray
    seed: int
    train_index: np.ndarray
    val_index: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def d_in(self) -> int:
        return self.train_inputs.shape[1]

    @property
    def d_out(self) -> int:
        return self.train_targets.shape[1]


def _split(n_total: int, n_val: int, rng) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n_total)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _package(name, x, y, n_val, seed, rng, **meta) -> Dataset:
    train_idx, val_idx = _split(x.shape[0], n_val, rng)
    return Dataset(
        name=name,
        train_inputs=x[train_idx],
        train_targets=y[train_idx],
        val_inputs=x[val_idx],
        val_targets=y[val_idx],
        seed=seed,
        train_index=train_idx,
        val_index=val_idx,
        meta=meta,
    )


def teacher_student(
    n_train: int = 64,
    n_val: int = 64,
    d_in: int = 4,
    d_out: int = 1,
    teacher_width: int = 16,
    noise: float = 0.0,
    linear: bool = False,
    seed: int = 0,
) -> Dataset:
    """Gaussian inputs labelled by a frozen random tanh teacher (or a linear map)."""
    _require(n_train >= 4 and n_val >= 4, "teacher_student needs n_train, n_val >= 4")
    _require(d_in >= 1 and d_out >= 1 and teacher_width >= 1, "teacher_student sizes must be positive")
    _require(noise >= 0, "noise must be non-negative")
    rng = np.random.default_rng([seed, 10])
    n = n_train + n_val
    x = rng.standard_normal((n, d_in))
    if linear:
        w = rng.standard_normal((d_in, d_out)) / math.sqrt(d_in)
        y = x @ w
    else:
        w1 = rng.standard_normal((d_in, teacher_width)) / math.sqrt(d_in)
        w2 = rng.standard_normal((teacher_width, d_out)) / math.sqrt(teacher_width)
        y = np.tanh(x @ w1) @ w2
    y = y + noise * rng.standard_normal(y.shape)
    return _package("TeacherStudent", x, y, n_val, seed, rng, noise=noise, linear=linear)


def spiral_classify(
    n: int = 200, val_fraction: float = 0.25, turns: float = 1.5, noise: float = 0.05, seed: int = 0
) -> Dataset:
    """Two interleaved planar spirals with labels +1 / -1, balanced."""
    _require(n >= 4 and n % 2 == 0, "spiral_classify needs an even n >= 4")
    _require(0 < val_fraction < 1, "val_fraction must lie in (0, 1)")
    rng = np.random.default_rng([seed, 11])
    half = n // 2
    t = np.sqrt(rng.uniform(0.05, 1.0, size=n))
    label = np.concatenate([np.ones(half), -np.ones(half)])
    angle = 2 * math.pi * turns * t + np.where(label > 0, 0.0, math.pi)
    x = np.stack([t * np.cos(angle), t * np.sin(angle)], axis=1)
    x = x + noise * rng.standard_normal(x.shape)
    n_val = max(2, int(round(n * val_fraction)))
    return _package("SpiralClassify", x, label[:, None], n_val, seed, rng)


def mask_count(seq_len: int, mask_rate: float, rng) -> int:
    """floor or ceil of ``mask_rate * seq_len``, with the exact rate as mean."""
    expected = mask_rate * seq_len
    base = math.floor(expected)
    return int(base + (rng.random() < expected - base))


def tiny_token_mask(
    n: int = 320,
    seq_len: int = 8,
    vocab: int = 16,
    mask_rate: float = 0.15,
    val_fraction: float = 0.2,
    periods: tuple[int, ...] = (2, 3, 4),
    corruption: float = 0.1,
    seed: int = 0,
) -> Dataset:
    """Masked-token prediction on periodic sequences.

    Every sequence repeats a random motif whose period is drawn from
    ``periods``; each token is then replaced by a random one with
    probability ``corruption``. About ``mask_rate`` of the positions are
    replaced by the mask token 0. Targets are one-hot rows over the vocabulary
    at the masked positions and zero elsewhere, flattened to
    ``seq_len * vocab``.
    """
    _require(n >= 4 and seq_len >= 4, "tiny_token_mask needs n, seq_len >= 4")
    _require(seq_len <= 16 and 3 <= vocab <= 32, "tiny_token_mask keeps seq_len <= 16, vocab in [3, 32]")
    _require(0 < mask_rate < 1 and 0 < val_fraction < 1, "rates must lie in (0, 1)")
    _require(0 <= corruption < 1, "corruption must lie in [0, 1)")
    _require(all(1 <= p <= seq_len for p in periods), "periods must lie in [1, seq_len]")
    rng = np.random.default_rng([seed, 12])
    tokens = np.empty((n, seq_len), dtype=np.int64)
    for i in range(n):
        period = periods[rng.integers(len(periods))]
        motif = rng.integers(1, vocab, size=period)
        tokens[i] = motif[np.arange(seq_len) % period]
    noisy = rng.random(tokens.shape) < corruption
    tokens[noisy] = rng.integers(1, vocab, size=int(noisy.sum()))
    inputs = tokens.copy()
    targets = np.zeros((n, seq_len, vocab))
    for i in range(n):
        k = max(1, mask_count(seq_len, mask_rate, rng))
        pos = rng.choice(seq_len, size=k, replace=False)
        inputs[i, pos] = MASK_TOKEN
        targets[i, pos, tokens[i, pos]] = 1.0
    n_val = max(2, int(round(n * val_fraction)))
    return _package(
        "TinyTokenMask",
        inputs.astype(np.float64),
        targets.reshape(n, seq_len * vocab),
        n_val,
        seed,
        rng,
        vocab=vocab,
        seq_len=seq_len,
    )


GENERATORS = {
    "TeacherStudent": teacher_student,
    "SpiralClassify": spiral_classify,
    "TinyTokenMask": tiny_token_mask,
}


def generate_dataset(kind: str, params: Mapping[str, Any] | None = None, seed: int = 0) -> Dataset:
    try:
        gen = GENERATORS[kind]
    except KeyError:
        raise ConfigError(f"unknown dataset kind {kind!r}") from None
    try:
        return gen(**dict(params or {}), seed=seed)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {kind}: {exc}") from None


def _require(ok: bool, message: str) -> None:
    if not ok:
        raise ConfigError(message)
