"""Ranking metrics, split-specific evaluation, modality sweeps and significance tests."""

from __future__ import annotations

import csv
import itertools
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from .data import SplitBundle
from .model import SiBraRModel, rank_items

METRICS = ("ndcg", "precision", "recall", "ap")


def _check(ranked, k):
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = list(ranked)
    if len(set(ranked)) != len(ranked):
        raise ValueError("ranked list contains duplicates")
    return ranked[:k]


def ndcg_at_k(ranked, relevant, k: int) -> float:
    """Binary-gain nDCG with a ``log2(rank + 1)`` discount."""
    top = _check(ranked, k)
    relevant = set(relevant)
    if not relevant:
        return 0.0
    dcg = sum(1.0 / math.log2(r + 2) for r, item in enumerate(top) if item in relevant)
    ideal = sum(1.0 / math.log2(r + 2) for r in range(min(len(relevant), k)))
    return dcg / ideal


def metrics_at_k(ranked, relevant, k: int) -> dict[str, float]:
    """Precision, recall and average precision at ``k``.

    AP sums the precision at each hit and divides by ``min(|relevant|, k)``.
    """
    top = _check(ranked, k)
    relevant = set(relevant)
    if not relevant:
        return {"precision": 0.0, "recall": 0.0, "ap": 0.0}
    hits = 0
    ap = 0.0
    for r, item in enumerate(top, start=1):
        if item in relevant:
            hits += 1
            ap += hits / r
    return {
        "precision": hits / k,
        "recall": hits / len(relevant),
        "ap": ap / min(len(relevant), k),
    }


def all_metrics(ranked, relevant, k: int) -> dict[str, float]:
    out = {"ndcg": ndcg_at_k(ranked, relevant, k)}
    out.update(metrics_at_k(ranked, relevant, k))
    return out


@dataclass
class EvalReport:
    k: int
    per_user: dict  # user index -> {metric: value}
    aggregates: dict
    coverage: float
    context: dict = field(default_factory=dict)

    def to_dict(self, user_ids: Optional[Sequence[str]] = None) -> dict:
        name = (lambda u: user_ids[u]) if user_ids is not None else str
        return {
            "k": self.k,
            "n_users": len(self.per_user),
            "aggregates": self.aggregates,
            "coverage": self.coverage,
            "context": self.context,
            "per_user": {name(u): v for u, v in self.per_user.items()},
        }

    def write_json(self, path, user_ids=None) -> None:
        text = json.dumps(self.to_dict(user_ids), indent=1, sort_keys=True)
        Path(path).write_text(text + "\n", encoding="utf-8")

    def write_csv(self, path, user_ids=None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user", *METRICS])
            for u, m in self.per_user.items():
                w.writerow([user_ids[u] if user_ids is not None else u, *(repr(m[k]) for k in METRICS)])


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SIBRAR_THREADS", "1")))
    except ValueError:
        return 1


def _scorer(model, view, subset):
    if isinstance(model, SiBraRModel):
        U, I = model.user_item_embeddings(view, subset)
        return lambda users: U[users] @ I.T
    return lambda users: model.score_matrix(users, view, subset)


def evaluate_split(
    model,
    bundle: SplitBundle,
    k: int = 10,
    split: str = "test",
    view=None,
    subset=None,
    context: Optional[dict] = None,
) -> EvalReport:
    """Rank the evaluation-split candidates for every user who has some.

    Candidates are the items with at least one interaction in the evaluated
    matrix. In the warm split each user's training items are excluded.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    M = bundle.matrix(split)
    if M.nnz == 0:
        raise ValueError(f"{split} matrix has no interactions")
    users = np.flatnonzero(M.row_counts() > 0)
    candidates = M.col_counts() > 0
    exclude_train = bundle.kind == "warm"
    score = _scorer(model, view, subset)

    def run(chunk):
        S = score(chunk)
        out = []
        for row, u in zip(S, chunk):
            allowed = candidates.copy()
            if exclude_train:
                allowed[bundle.train.row(u)] = False
            out.append(rank_items(row, allowed, k))
        return out

    chunks = [users[s : s + 256] for s in range(0, len(users), 256)]
    n_threads = _threads()
    if n_threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as ex:
            ranked = [r for part in ex.map(run, chunks) for r in part]
    else:
        ranked = [r for c in chunks for r in run(c)]

    per_user = {}
    recommended = set()
    for u, rec in zip(users, ranked):
        per_user[int(u)] = all_metrics(rec, M.row(u).tolist(), k)
        recommended.update(rec)
    aggregates = {m: float(np.mean([v[m] for v in per_user.values()])) for m in METRICS}
    ctx = {"split_kind": bundle.kind, "split": split, "seed": bundle.seed}
    if subset is not None:
        ctx["modality_subset"] = sorted(subset)
    ctx.update(context or {})
    return EvalReport(k, per_user, aggregates, len(recommended) / int(candidates.sum()), ctx)


def subset_bitmask(subset, modalities: Sequence[str]) -> int:
    return sum(1 << i for i, m in enumerate(modalities) if m in subset)


def missing_modality_sweep(model: SiBraRModel, bundle: SplitBundle, k: int = 10, split: str = "test", view=None):
    """Evaluate every non-empty subset of the model's training modalities.

    Returns ``(subset, report)`` pairs sorted by aggregate nDCG descending
    (ties by bitmask).
    """
    mods = model.training_modalities
    results = []
    for r in range(1, len(mods) + 1):
        for subset in itertools.combinations(mods, r):
            rep = evaluate_split(model, bundle, k, split, view=view, subset=subset)
            rep.context["bitmask"] = subset_bitmask(subset, mods)
            results.append((subset, rep))
    results.sort(key=lambda sr: (-sr[1].aggregates["ndcg"], sr[1].context["bitmask"]))
    return results


def write_sweep_csv(results, modalities: Sequence[str], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bitmask", "modalities", "n_modalities", *METRICS, "coverage"])
        for subset, rep in results:
            w.writerow(
                [
                    subset_bitmask(subset, modalities),
                    ";".join(subset),
                    len(subset),
                    *(repr(rep.aggregates[m]) for m in METRICS),
                    repr(rep.coverage),
                ]
            )


# ---------------------------------------------------------------- significance


@dataclass
class SignificanceEntry:
    model_a: str
    model_b: str
    n: int
    mean_diff: float
    t: Optional[float]
    p: float
    p_corrected: float
    significant: bool
    degenerate: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def paired_t_test(a, b, n_comparisons: int = 1, alpha: float = 0.05, names=("A", "B")) -> SignificanceEntry:
    """Two-sided paired t-test with Bonferroni correction.

    When the differences have zero variance the test is degenerate: ``p`` is
    reported as 1 and ``t`` is 0 for identical samples, otherwise undefined.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("paired samples need equal lengths >= 2")
    if n_comparisons < 1:
        raise ValueError("n_comparisons must be >= 1")
    d = a - b
    n = len(d)
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    # spread at the rounding level of the inputs counts as none
    noise = 1e-12 * max(float(np.abs(a).max()), float(np.abs(b).max()))
    if sd <= noise:
        t = 0.0 if abs(mean) <= noise else None
        return SignificanceEntry(names[0], names[1], n, mean, t, 1.0, 1.0, False, True)
    t = mean / (sd / math.sqrt(n))
    p = float(2.0 * stats.t.sf(abs(t), df=n - 1))
    pc = min(1.0, p * n_comparisons)
    return SignificanceEntry(names[0], names[1], n, mean, t, p, pc, pc < alpha)


def compare_reports(per_user: Mapping[str, Mapping[str, dict]], metric: str = "ndcg", alpha: float = 0.05):
    """Paired tests for every pair of named reports over their common users."""
    names = list(per_user)
    pairs = list(itertools.combinations(names, 2))
    if not pairs:
        pairs = [(names[0], names[0])]
    entries = []
    for x, y in pairs:
        common = sorted(set(per_user[x]) & set(per_user[y]))
        va = [per_user[x][u][metric] for u in common]
        vb = [per_user[y][u][metric] for u in common]
        entries.append(paired_t_test(va, vb, len(pairs), alpha, (x, y)))
    return entries


def write_significance(entries, path_csv, path_json=None) -> None:
    cols = ["model_a", "model_b", "n", "mean_diff", "t", "p", "p_corrected", "significant", "degenerate"]
    with open(path_csv, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for e in entries:
            d = e.to_dict()
            w.writerow(["" if d[c] is None else d[c] for c in cols])
    if path_json is not None:
        Path(path_json).write_text(
            json.dumps([e.to_dict() for e in entries], indent=1, sort_keys=True) + "\n", encoding="utf-8"
        )
