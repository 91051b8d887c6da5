"""Modality-gap diagnostics before and after the shared branch."""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import DataView, SiBraRModel
from .numerics import pca
from .numerics import rng as make_rng

N_COMPONENTS = 10


@dataclass
class GapReport:
    stage: str
    modalities: list
    entities: np.ndarray
    pairs: dict  # "a|b" -> statistics
    projections: np.ndarray  # (len(entities) * len(modalities), 10)
    labels: list  # (entity, modality) per projection row
    n_components: int
    explained_variance_ratio: list = field(default_factory=list)

    def pair(self, a: str, b: str) -> dict:
        return self.pairs["|".join(sorted((a, b)))]

    def summary(self) -> dict:
        return {
            "stage": self.stage,
            "modalities": self.modalities,
            "sample_size": int(len(self.entities)),
            "n_components": self.n_components,
            "explained_variance_ratio": self.explained_variance_ratio,
            "pairs": self.pairs,
        }


def _cosines(a: np.ndarray, b: np.ndarray) -> tuple[Optional[float], int]:
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    if not ok.any():
        return None, 0
    cos = np.einsum("ij,ij->i", a[ok], b[ok]) / (na[ok] * nb[ok])
    return float(np.clip(cos, -1.0, 1.0).mean()), int(ok.sum())


def _matching(n: int, gen: np.random.Generator) -> np.ndarray:
    """A random involution pairing entities; an odd one out maps to itself."""
    perm = gen.permutation(n)
    partner = np.arange(n)
    for x, y in zip(perm[0::2], perm[1::2]):
        partner[x], partner[y] = y, x
    return partner


def _stage_report(stage, outputs: dict, mods, entities, partner) -> GapReport:
    pairs = {}
    paired = partner != np.arange(len(entities))
    for a, b in itertools.combinations(mods, 2):
        A, B = outputs[a], outputs[b]
        same, n_same = _cosines(A, B)
        # averaged over both orientations so the statistic is symmetric in (a, b)
        r1, n1 = _cosines(A[paired], B[partner[paired]])
        r2, _ = _cosines(B[paired], A[partner[paired]])
        rand = None if r1 is None or r2 is None else 0.5 * (r1 + r2)
        pairs[f"{a}|{b}"] = {
            "centroid_distance": float(np.linalg.norm(A.mean(axis=0) - B.mean(axis=0))),
            "same_entity_cosine": same,
            "random_pair_cosine": rand,
            "n_same": n_same,
            "n_random": n1,
            "cosine_defined": same is not None and rand is not None,
        }
    pooled = np.vstack([outputs[m] for m in mods])
    labels = [(int(e), m) for m in mods for e in entities]
    k = min(N_COMPONENTS, pooled.shape[0], pooled.shape[1])
    proj = np.zeros((pooled.shape[0], N_COMPONENTS))
    ratio: list = []
    if pooled.shape[0] >= 2 and np.any(pooled != pooled[0]):
        res = pca(pooled, k)
        proj[:, :k] = res.projections
        ratio = res.explained_variance_ratio.tolist()
    return GapReport(stage, list(mods), entities, pairs, proj, labels, k, ratio)


def gap_report(model: SiBraRModel, view: DataView, sample_size: int = 3000, seed: int = 0):
    """Compare modality embeddings at the projector output and the branch output.

    Entities are sampled uniformly among those with every training modality
    available; the same sample is used for both stages. ``sample_size`` is
    capped at the number of eligible entities.
    """
    mods = list(model.training_modalities)
    if len(mods) < 2:
        raise ValueError("gap analysis needs a model trained with at least two modalities")
    avail = view.availability(mods)
    if not (avail.sum(axis=1) >= 2).any():
        raise ValueError("no entity has two or more available modalities")
    eligible = np.flatnonzero(avail.all(axis=1))
    if not len(eligible):
        raise ValueError("no entity has every training modality available")
    gen = make_rng(seed, "gap")
    n = min(int(sample_size), len(eligible))
    entities = np.sort(gen.choice(eligible, size=n, replace=False))
    partner = _matching(n, gen)
    reports = []
    for stage in ("pre", "post"):
        outputs = {m: model.modality_outputs(view, m, entities, stage=stage) for m in mods}
        reports.append(_stage_report(f"{stage}_branch", outputs, mods, entities, partner))
    return reports[0], reports[1]


def write_gap_outputs(pre: GapReport, post: GapReport, out_dir, entity_ids: Optional[Sequence[str]] = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {"pre_branch": pre.summary(), "post_branch": post.summary()}
    (out / "gap_report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    with open(out / "projections.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["entity_id", "modality", *(f"c{i}" for i in range(1, N_COMPONENTS + 1)), "stage"])
        for rep in (pre, post):
            for (e, m), row in zip(rep.labels, rep.projections):
                eid = entity_ids[e] if entity_ids is not None else e
                w.writerow([eid, m, *(repr(float(v)) for v in row), rep.stage])
