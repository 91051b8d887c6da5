"""Ranking and contrastive objectives, and the composite batch loss.

All losses are written in minimisation form: the pairwise ranking term is
``sum_k softplus(-(y_pos - y_k))`` which equals ``-sum_k ln sigmoid(y_pos - y_k)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import DataView, SiBraRModel
from .numerics.autodiff import (
    GradientTape,
    Var,
    as_var,
    getitem,
    logsumexp,
    mul,
    reshape,
    rowdot,
    scatter_rows,
    softplus,
    sum_all,
)
from .sampling import sample_modalities, sample_negatives_batch


@dataclass(frozen=True)
class BatchLossConfig:
    n_neg: int = 10
    ctr_embs: bool = False
    lam: float = 0.0
    tau: float = 1.0

    def __post_init__(self):
        if self.n_neg < 1:
            raise ValueError("n_neg must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")

    @property
    def n_mod(self) -> int:
        return 2 if self.ctr_embs else 1


def bpr_terms(logits: Var) -> Var:
    """Per-row ranking loss for logits (B, 1 + n_neg), positive in column 0."""
    margins = getitem(logits, (slice(None), slice(0, 1))) - getitem(logits, (slice(None), slice(1, None)))
    return softplus(-margins)


def infonce_rows(anchor: Var, others: Var, tau: float) -> Var:
    """Cross-entropy of picking column 0 among ``anchor . others[k] / tau``.

    ``anchor`` is (B, d), ``others`` is (B, K, d); returns (B,).
    """
    logits = rowdot(anchor, others) / tau
    return logsumexp(logits, axis=1) - getitem(logits, (slice(None), 0))


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("loss inputs must be finite")


def bpr_loss(pos_logit: float, neg_logits) -> float:
    neg = np.atleast_1d(np.asarray(neg_logits, dtype=np.float64))
    if neg.ndim != 1 or len(neg) < 1:
        raise ValueError("need at least one negative logit")
    _check_finite(pos_logit, neg)
    logits = np.concatenate([[float(pos_logit)], neg])[None, :]
    return float(sum_all(bpr_terms(as_var(logits))).data)


def sinfonce_loss(mod1, mod2, tau: float) -> float:
    """Symmetric InfoNCE between two modality views of {positive} + negatives.

    ``mod1`` and ``mod2`` are (1 + n_neg, d) with the positive item in row 0.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    a = np.asarray(mod1, dtype=np.float64)
    b = np.asarray(mod2, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"modality lists must have equal (K, d) shapes, got {a.shape} and {b.shape}")
    _check_finite(a, b)
    va, vb = as_var(a[None]), as_var(b[None])
    l12 = infonce_rows(as_var(a[None, 0]), vb, tau)
    l21 = infonce_rows(as_var(b[None, 0]), va, tau)
    return float((l12.data + l21.data).sum())


def batch_loss(
    batch,
    model: SiBraRModel,
    view: DataView,
    cfg: BatchLossConfig,
    rng: np.random.Generator,
    mod_rng: Optional[np.random.Generator] = None,
    pool: Optional[np.ndarray] = None,
) -> tuple[float, GradientTape]:
    """Composite loss of one batch of (anchor, target) training interactions.

    For the item variant anchors are users and targets are items. Negatives
    are drawn from ``rng``; modalities from ``mod_rng`` (defaults to ``rng``).
    Each interaction samples ``n_mod`` of its positive target's available
    modalities; negatives reuse them, substituting a random available modality
    where a negative lacks one. The contrastive term is skipped for
    interactions whose positive has a single available modality.

    Returns the loss value and the tape; ``tape.output`` is the loss node.
    """
    anchors, positives = (np.asarray(x, dtype=np.int64) for x in batch)
    mod_rng = rng if mod_rng is None else mod_rng
    mods = model.training_modalities
    if pool is None:
        pool = view.negative_pool(mods)
    avail = view.availability(mods)
    empty = positives[~avail[positives].any(axis=1)]
    if len(empty):
        raise ValueError(f"targets {empty[:10].tolist()} have no available training modality")

    B, K = len(anchors), cfg.n_neg + 1
    negatives = sample_negatives_batch(view.oriented, anchors, cfg.n_neg, rng, pool)
    targets = np.concatenate([positives[:, None], negatives], axis=1).ravel()
    first, second, n_avail = sample_modalities(avail[positives], mod_rng)
    slots = [first] if cfg.n_mod == 1 else [first, second]

    # (slot, row) -> modality index, with substitution for unavailable ones
    slot_mod = np.concatenate([np.repeat(s, K) for s in slots])
    slot_targets = np.tile(targets, len(slots))
    missing = ~avail[slot_targets, slot_mod]
    if missing.any():
        sub, _, _ = sample_modalities(avail[slot_targets[missing]], mod_rng)
        slot_mod[missing] = sub

    tape = GradientTape()
    bound = model.bind(tape)
    parts, index = [], []
    for m_idx, m in enumerate(mods):
        rows = np.flatnonzero(slot_mod == m_idx)
        if len(rows):
            parts.append(model.project(m, view.table(m).features[slot_targets[rows]], bound))
            index.append(rows)
    pre = scatter_rows(parts, index, len(slot_mod))
    post = model.encode(pre, bound)
    n_rows = B * K
    slot_emb = [reshape(getitem(post, slice(s * n_rows, (s + 1) * n_rows)), (B, K, -1)) for s in range(len(slots))]
    items = slot_emb[0] if len(slots) == 1 else (slot_emb[0] + slot_emb[1]) * 0.5

    users = model.embed_anchors(anchors, view, bound)
    loss = sum_all(bpr_terms(rowdot(users, items)))

    if cfg.ctr_embs:
        z1, z2 = slot_emb
        p1 = getitem(z1, (slice(None), 0))
        p2 = getitem(z2, (slice(None), 0))
        per_row = infonce_rows(p1, z2, cfg.tau) + infonce_rows(p2, z1, cfg.tau)
        active = (n_avail >= 2).astype(np.float64)
        loss = loss + sum_all(mul(per_row, active)) * cfg.lam

    tape.output = loss
    return float(loss.data), tape
