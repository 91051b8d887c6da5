"""Negative and modality sampling for training batches."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .data import InteractionMatrix


def _allowed(R: InteractionMatrix, anchor: int, pool: np.ndarray) -> np.ndarray:
    return np.setdiff1d(pool, R.row(anchor), assume_unique=True)


def sample_negatives_batch(
    R: InteractionMatrix,
    anchors,
    n_neg: int,
    gen: np.random.Generator,
    pool: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Draw ``n_neg`` distinct non-interacted targets for every anchor.

    Rows of ``R`` are anchors and columns are targets. Candidates come from
    ``pool`` (all targets by default). Draws are uniform with rejection of
    positives and repeats; anchors with few eligible targets are sampled
    exactly without replacement instead.
    """
    anchors = np.asarray(anchors, dtype=np.int64)
    pool = np.arange(R.n_items) if pool is None else np.asarray(pool, dtype=np.int64)
    B = len(anchors)
    if n_neg < 1:
        raise ValueError("n_neg must be >= 1")
    in_pool = np.zeros(R.n_items, dtype=bool)
    in_pool[pool] = True
    n_pos_in_pool = np.array([in_pool[R.row(a)].sum() for a in anchors], dtype=np.int64)
    n_allowed = len(pool) - n_pos_in_pool
    if B and n_allowed.min() < n_neg:
        a = anchors[np.argmin(n_allowed)]
        raise ValueError(f"anchor {a} has only {n_allowed.min()} eligible negatives, need {n_neg}")

    out = pool[gen.integers(0, len(pool), size=(B, n_neg))] if B else np.zeros((0, n_neg), dtype=np.int64)
    tight = n_allowed <= 4 * n_neg
    for r in np.flatnonzero(tight):
        out[r] = gen.choice(_allowed(R, anchors[r], pool), size=n_neg, replace=False)
    loose = ~tight
    rows = np.repeat(anchors[:, None], n_neg, axis=1)
    while True:
        bad = R.contains(rows, out)
        order = np.argsort(out, axis=1, kind="stable")
        srt = np.take_along_axis(out, order, axis=1)
        dup = np.zeros_like(bad)
        np.put_along_axis(dup, order[:, 1:], srt[:, 1:] == srt[:, :-1], axis=1)
        bad = (bad | dup) & loose[:, None]
        n_bad = int(bad.sum())
        if not n_bad:
            return out
        out[bad] = pool[gen.integers(0, len(pool), size=n_bad)]


def sample_negatives(R: InteractionMatrix, user: int, n_neg: int, gen: np.random.Generator, pool=None) -> np.ndarray:
    return sample_negatives_batch(R, [user], n_neg, gen, pool)[0]


def sample_modalities(avail: np.ndarray, gen: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random order of each row's available modalities.

    ``avail`` is (B, M). Returns ``(first, second, n_available)``; ``second``
    repeats ``first`` when only one modality is available. Exactly ``B * M``
    uniforms are consumed whatever the availability pattern.
    """
    keys = gen.random(avail.shape)
    keys[~avail] = np.inf
    order = np.argsort(keys, axis=1, kind="stable")
    n_avail = avail.sum(axis=1)
    first = order[:, 0]
    second = np.where(n_avail >= 2, order[:, min(1, avail.shape[1] - 1)], first)
    return first, second, n_avail
