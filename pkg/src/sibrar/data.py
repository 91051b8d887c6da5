"""Interaction matrices, modality tables, split protocols and synthetic data."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .numerics import rng as make_rng

SIDES = ("user", "item")
KINDS = ("vector", "categorical", "multilabel", "discrete", "profile", "id")
SPLIT_KINDS = ("warm", "user_cold", "item_cold")


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class InteractionMatrix:
    """Binary implicit-feedback matrix in compressed-row form.

    Row ``u`` holds the strictly increasing item indices user ``u`` interacted
    with. :meth:`transpose` gives the item-profile view.
    """

    n_users: int
    n_items: int
    indptr: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        indptr = np.asarray(self.indptr, dtype=np.int64)
        indices = np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        if indptr.shape != (self.n_users + 1,) or indptr[0] != 0 or indptr[-1] != len(indices):
            raise ValueError("indptr inconsistent with n_users / indices")
        if np.any(np.diff(indptr) < 0):
            raise ValueError("indptr must be non-decreasing")
        if len(indices) and (indices.min() < 0 or indices.max() >= self.n_items):
            raise ValueError("item index out of range")
        starts = np.zeros(len(indices), dtype=bool)
        starts[indptr[:-1][np.diff(indptr) > 0]] = True
        steps = np.diff(indices)
        if np.any((steps <= 0) & ~starts[1:]):
            raise ValueError("row indices must be strictly increasing")

    @classmethod
    def from_pairs(cls, users, items, n_users: int, n_items: int) -> "InteractionMatrix":
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if len(users) != len(items):
            raise ValueError("users and items must have equal length")
        if len(users) and (users.min() < 0 or users.max() >= n_users):
            raise ValueError("user index out of range")
        if len(items) and (items.min() < 0 or items.max() >= n_items):
            raise ValueError("item index out of range")
        keys = np.unique(users * n_items + items) if len(users) else np.zeros(0, dtype=np.int64)
        u, i = np.divmod(keys, n_items) if n_items else (keys, keys)
        indptr = np.zeros(n_users + 1, dtype=np.int64)
        np.add.at(indptr, u + 1, 1)
        return cls(n_users, n_items, np.cumsum(indptr), i)

    @classmethod
    def from_dense(cls, dense) -> "InteractionMatrix":
        dense = np.asarray(dense)
        u, i = np.nonzero(dense)
        return cls.from_pairs(u, i, dense.shape[0], dense.shape[1])

    @property
    def nnz(self) -> int:
        return len(self.indices)

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_users, self.n_items

    def row(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u] : self.indptr[u + 1]]

    def row_counts(self) -> np.ndarray:
        return np.diff(self.indptr)

    def col_counts(self) -> np.ndarray:
        return np.bincount(self.indices, minlength=self.n_items)

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        users = np.repeat(np.arange(self.n_users), self.row_counts())
        return users, self.indices.copy()

    @cached_property
    def csr(self) -> sp.csr_matrix:
        data = np.ones(self.nnz)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=self.shape)

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        u, i = self.pairs()
        out[u, i] = 1.0
        return out

    @cached_property
    def _transposed(self) -> "InteractionMatrix":
        u, i = self.pairs()
        return InteractionMatrix.from_pairs(i, u, self.n_items, self.n_users)

    def transpose(self) -> "InteractionMatrix":
        return self._transposed

    @property
    def T(self) -> "InteractionMatrix":
        return self._transposed

    def contains(self, users, items) -> np.ndarray:
        """Vectorised membership test for (user, item) pairs."""
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        keys = self._keys
        q = users * self.n_items + items
        pos = np.searchsorted(keys, q)
        pos = np.minimum(pos, max(len(keys) - 1, 0))
        return (keys[pos] == q) if len(keys) else np.zeros(q.shape, dtype=bool)

    @cached_property
    def _keys(self) -> np.ndarray:
        u, i = self.pairs()
        return u * self.n_items + i

    def __eq__(self, other):
        if not isinstance(other, InteractionMatrix):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
        )

    __hash__ = None


@dataclass(frozen=True)
class IdMap:
    ids: tuple[str, ...]

    @cached_property
    def index(self) -> dict[str, int]:
        return {s: k for k, s in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)


@dataclass(eq=False)
class ModalityTable:
    name: str
    side: str
    kind: str
    features: np.ndarray
    available: np.ndarray
    vocabulary: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.available = np.asarray(self.available, dtype=bool)
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.features.ndim != 2 or self.available.shape != (self.features.shape[0],):
            raise ValueError("features must be (n_entities, d) with one availability flag per row")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"modality {self.name!r} has non-finite features")
        avail = self.features[self.available]
        if self.kind == "categorical" and len(avail):
            if not (np.isin(avail, (0.0, 1.0)).all() and np.all(avail.sum(axis=1) == 1)):
                raise ValueError(f"categorical modality {self.name!r} must be one-hot")
        if self.kind == "multilabel" and not np.isin(avail, (0.0, 1.0)).all():
            raise ValueError(f"multilabel modality {self.name!r} must be multi-hot")
        if self.kind == "discrete" and self.features.shape[1] != 1:
            raise ValueError("discrete modality must be a single column")

    @property
    def n_entities(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(eq=False)
class SplitBundle:
    kind: str
    train: InteractionMatrix
    valid: InteractionMatrix
    test: InteractionMatrix
    ratios: tuple[float, float, float]
    seed: int

    def __post_init__(self):
        if self.kind not in SPLIT_KINDS:
            raise ValueError(f"kind must be one of {SPLIT_KINDS}")

    def matrix(self, split: str) -> InteractionMatrix:
        if split not in ("train", "valid", "test"):
            raise ValueError(f"unknown split {split!r}")
        return getattr(self, split)

    @property
    def n_users(self) -> int:
        return self.train.n_users

    @property
    def n_items(self) -> int:
        return self.train.n_items


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int
    n_items: int
    latent_dim: int = 8
    interactions_per_user: int = 20
    modalities: tuple = (("content", 16, 0.1),)
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if not 1 <= self.interactions_per_user <= self.n_items:
            raise ValueError("interactions_per_user must lie in [1, n_items]")
        for name, dim, noise in self.modalities:
            if dim < 1 or noise < 0:
                raise ValueError(f"bad modality spec {(name, dim, noise)}")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        mods = d.pop("modalities", None)
        if mods is not None:
            d["modalities"] = tuple(
                (m["name"], int(m["dim"]), float(m["noise_std"])) if isinstance(m, dict) else tuple(m)
                for m in mods
            )
        return cls(**d)


# --------------------------------------------------------------------- ingestion


def _rows(path: Path):
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if row and any(c.strip() for c in row):
                yield lineno, [c.strip() for c in row]


def load_interactions(path) -> tuple[InteractionMatrix, IdMap, IdMap]:
    """Read ``user_id,item_id`` rows; ids are re-indexed by first appearance."""
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    pu, pi = [], []
    for lineno, row in _rows(Path(path)):
        if lineno == 1 and [c.lower() for c in row] == ["user_id", "item_id"]:
            continue
        if len(row) != 2 or not row[0] or not row[1]:
            raise DataFormatError(f"{path}: line {lineno}: expected 'user_id,item_id', got {row!r}")
        pu.append(users.setdefault(row[0], len(users)))
        pi.append(items.setdefault(row[1], len(items)))
    if not pu:
        raise DataFormatError(f"{path}: no interactions")
    R = InteractionMatrix.from_pairs(pu, pi, len(users), len(items))
    return R, IdMap(tuple(users)), IdMap(tuple(items))


def load_modality(path, name: str, side: str, kind: str, id_map: IdMap) -> ModalityTable:
    """Read one modality file and align it to ``id_map``.

    Entities missing from the file get a zero row and ``available=False``.
    """
    if kind not in ("vector", "categorical", "multilabel", "discrete"):
        raise ValueError(f"kind {kind!r} cannot be loaded from a file")
    entries: dict[str, list[str]] = {}
    unknown = []
    for lineno, row in _rows(Path(path)):
        if lineno == 1 and row[0].lower() in ("entity_id", "user_id", "item_id", "id"):
            continue
        if len(row) < 2:
            raise DataFormatError(f"{path}: line {lineno}: missing feature values")
        if row[0] not in id_map.index:
            unknown.append(row[0])
            continue
        if row[0] in entries:
            raise DataFormatError(f"{path}: line {lineno}: duplicate entity {row[0]!r}")
        entries[row[0]] = row[1:]
    if unknown:
        raise DataFormatError(f"{path}: unknown {side} ids: {', '.join(sorted(set(unknown)))}")

    n = len(id_map)
    available = np.zeros(n, dtype=bool)
    vocab = None
    if kind in ("vector", "discrete"):
        dims = {len(v) for v in entries.values()}
        if len(dims) > 1:
            raise DataFormatError(f"{path}: inconsistent vector dimensionality {sorted(dims)}")
        d = dims.pop() if dims else 1
        if kind == "discrete" and d != 1:
            raise DataFormatError(f"{path}: discrete modality must have one value per entity")
        features = np.zeros((n, d))
        for eid, vals in entries.items():
            try:
                features[id_map.index[eid]] = [float(v) for v in vals]
            except ValueError as exc:
                raise DataFormatError(f"{path}: entity {eid!r}: {exc}") from None
            available[id_map.index[eid]] = True
    else:
        labels = {eid: [s.strip() for s in ";".join(v).split(";") if s.strip()] for eid, v in entries.items()}
        if kind == "categorical":
            bad = [eid for eid, ls in labels.items() if len(ls) != 1]
            if bad:
                raise DataFormatError(f"{path}: categorical entities need exactly one label: {bad}")
        vocab = tuple(sorted({lab for ls in labels.values() for lab in ls}))
        col = {lab: k for k, lab in enumerate(vocab)}
        features = np.zeros((n, len(vocab)))
        for eid, ls in labels.items():
            r = id_map.index[eid]
            features[r, [col[lab] for lab in ls]] = 1.0
            available[r] = bool(ls)
    return ModalityTable(name, side, kind, features, available, vocab)


def profile_modality(R: InteractionMatrix, side: str, name: str = "profile") -> ModalityTable:
    """Interaction profiles as a modality; empty profiles are unavailable."""
    if side == "user":
        feats = R.dense()
    elif side == "item":
        feats = R.dense().T.copy()
    else:
        raise ValueError(f"side must be one of {SIDES}")
    return ModalityTable(name, side, "profile", feats, feats.any(axis=1))


def id_modality(n: int, side: str, name: str = "id") -> ModalityTable:
    """One-hot entity identifiers; a linear projector on it is an embedding table."""
    return ModalityTable(name, side, "id", np.eye(n), np.ones(n, dtype=bool))


# ------------------------------------------------------------------------ splits


def _check_ratios(ratios) -> tuple[float, float, float]:
    r = tuple(float(x) for x in ratios)
    if len(r) != 3 or any(x < 0 for x in r) or not math.isclose(sum(r), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must be three non-negative fractions summing to 1, got {ratios}")
    return r


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_warm(R: InteractionMatrix, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitBundle:
    """Per-user random partition of interactions.

    Each user keeps at least one validation and one test interaction:
    ``n_test = max(1, round(r_test * n))``, likewise for validation, with the
    remainder going to training.
    """
    ratios = _check_ratios(ratios)
    counts = R.row_counts()
    short = np.flatnonzero(counts < 3)
    if len(short):
        raise ValueError(f"users with fewer than 3 interactions cannot be split: {short[:20].tolist()}")
    gen = make_rng(seed, "warm")
    parts = {"train": ([], []), "valid": ([], []), "test": ([], [])}
    for u in range(R.n_users):
        row = gen.permutation(R.row(u))
        n = len(row)
        n_test = max(1, _round_half_up(ratios[2] * n))
        n_valid = max(1, _round_half_up(ratios[1] * n))
        chunks = {"test": row[:n_test], "valid": row[n_test : n_test + n_valid], "train": row[n_test + n_valid :]}
        for key, chunk in chunks.items():
            parts[key][0].append(np.full(len(chunk), u))
            parts[key][1].append(chunk)
    mats = {
        k: InteractionMatrix.from_pairs(np.concatenate(us), np.concatenate(its), R.n_users, R.n_items)
        for k, (us, its) in parts.items()
    }
    return SplitBundle("warm", mats["train"], mats["valid"], mats["test"], ratios, seed)


def partition_entities(n: int, ratios, seed: int, tag: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shuffle ``range(n)`` and cut it into train / valid / test groups."""
    perm = make_rng(seed, tag).permutation(n)
    n_valid = _round_half_up(ratios[1] * n)
    n_test = _round_half_up(ratios[2] * n)
    n_train = n - n_valid - n_test
    return perm[:n_train], perm[n_train : n_train + n_valid], perm[n_train + n_valid :]


def split_cold(R: InteractionMatrix, side: str, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitBundle:
    """Partition users (or items) into disjoint train / valid / test groups."""
    ratios = _check_ratios(ratios)
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}")
    n = R.n_users if side == "user" else R.n_items
    if n < 10:
        raise ValueError(f"need at least 10 {side}s for a cold split, got {n}")
    groups = partition_entities(n, ratios, seed, f"{side}_cold")
    owner = np.empty(n, dtype=np.int64)
    for k, g in enumerate(groups):
        owner[g] = k
    u, i = R.pairs()
    who = owner[u] if side == "user" else owner[i]
    mats = [InteractionMatrix.from_pairs(u[who == k], i[who == k], R.n_users, R.n_items) for k in range(3)]
    return SplitBundle(f"{side}_cold", mats[0], mats[1], mats[2], ratios, seed)


def make_split(R: InteractionMatrix, kind: str, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> SplitBundle:
    if kind == "warm":
        return split_warm(R, ratios, seed)
    if kind in ("user_cold", "item_cold"):
        return split_cold(R, kind.split("_")[0], ratios, seed)
    raise ValueError(f"unknown split kind {kind!r}")


def _write_pairs(path: Path, M: InteractionMatrix, users: IdMap, items: IdMap) -> None:
    u, i = M.pairs()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "item_id"])
        for a, b in zip(u, i):
            w.writerow([users.ids[a], items.ids[b]])


def save_split(bundle: SplitBundle, out_dir, users: IdMap, items: IdMap, extra: Optional[dict] = None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "valid", "test"):
        _write_pairs(out / f"{name}.csv", bundle.matrix(name), users, items)
    manifest = {
        "kind": bundle.kind,
        "ratios": list(bundle.ratios),
        "seed": bundle.seed,
        "user_ids": list(users.ids),
        "item_ids": list(items.ids),
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_split(split_dir) -> tuple[SplitBundle, IdMap, IdMap]:
    d = Path(split_dir)
    manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    users, items = IdMap(tuple(manifest["user_ids"])), IdMap(tuple(manifest["item_ids"]))
    mats = {}
    for name in ("train", "valid", "test"):
        pu, pi = [], []
        for lineno, row in _rows(d / f"{name}.csv"):
            if lineno == 1 and row == ["user_id", "item_id"]:
                continue
            try:
                pu.append(users.index[row[0]])
                pi.append(items.index[row[1]])
            except (KeyError, IndexError):
                raise DataFormatError(f"{d / name}.csv: line {lineno}: id not in manifest: {row!r}") from None
        mats[name] = InteractionMatrix.from_pairs(pu, pi, len(users), len(items))
    bundle = SplitBundle(
        manifest["kind"], mats["train"], mats["valid"], mats["test"], tuple(manifest["ratios"]), manifest["seed"]
    )
    return bundle, users, items


# --------------------------------------------------------------------- synthetic


def synth_factors(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth user and item factors behind :func:`synth_generate`."""
    gen = make_rng(spec.seed, "factors")
    P = gen.standard_normal((spec.n_users, spec.latent_dim))
    Q = gen.standard_normal((spec.n_items, spec.latent_dim))
    return P, Q


def _isometry(latent: int, dim: int, gen: np.random.Generator) -> np.ndarray:
    """A (latent, dim) map with orthonormal rows (dim >= latent) or columns."""
    if dim >= latent:
        q, _ = np.linalg.qr(gen.standard_normal((dim, latent)))
        return q.T
    q, _ = np.linalg.qr(gen.standard_normal((latent, dim)))
    return q


def synth_generate(spec: SyntheticSpec) -> tuple[InteractionMatrix, list[ModalityTable]]:
    P, Q = synth_factors(spec)
    scores = P @ Q.T
    k = spec.interactions_per_user
    top = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    R = InteractionMatrix.from_pairs(np.repeat(np.arange(spec.n_users), k), top.ravel(), spec.n_users, spec.n_items)
    tables = []
    for idx, (name, dim, noise) in enumerate(spec.modalities):
        gen = make_rng(spec.seed, "modality", idx)
        W = _isometry(spec.latent_dim, int(dim), gen)
        feats = Q @ W + noise * gen.standard_normal((spec.n_items, int(dim)))
        tables.append(ModalityTable(name, "item", "vector", feats, np.ones(spec.n_items, dtype=bool)))
    return R, tables


def write_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write a synthetic dataset as CSV files plus a ``modalities.json`` index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    R, tables = synth_generate(spec)
    users = IdMap(tuple(f"u{k}" for k in range(spec.n_users)))
    items = IdMap(tuple(f"i{k}" for k in range(spec.n_items)))
    _write_pairs(out / "interactions.csv", R, users, items)
    # items nobody interacted with are not part of the written id space
    seen = np.flatnonzero(R.col_counts() > 0)
    index = []
    for t in tables:
        fname = f"item_{t.name}.csv"
        with open(out / fname, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for k in seen:
                w.writerow([items.ids[k], *(repr(float(v)) for v in t.features[k])])
        index.append({"name": t.name, "side": t.side, "kind": t.kind, "path": fname})
    (out / "modalities.json").write_text(json.dumps({"modalities": index}, indent=1) + "\n", encoding="utf-8")
    return out


def load_feature_index(path, users: IdMap, items: IdMap) -> list[ModalityTable]:
    """Load every modality listed in a ``modalities.json`` index file."""
    path = Path(path)
    spec = json.loads(path.read_text(encoding="utf-8"))
    tables = []
    for m in spec["modalities"]:
        id_map = users if m["side"] == "user" else items
        tables.append(load_modality(path.parent / m["path"], m["name"], m["side"], m["kind"], id_map))
    return tables
