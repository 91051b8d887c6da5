"""The single-branch recommender and the baseline recommenders.

Roles are oriented around the *multimodal side*. For the item variant the
targets are items (embedded through per-modality projectors and the shared
branch) and the anchors are users (embedded by the counterpart: a lookup
table or a profile network). The user variant swaps the roles and works on
the transposed interaction matrix, so both variants share every code path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .data import InteractionMatrix, ModalityTable, id_modality, profile_modality
from .numerics import rng as make_rng
from .numerics.autodiff import GradientTape, Var, as_var, take_rows
from .numerics.layers import DenseLayer, Network, constants

RESERVED_MODALITIES = ("profile", "id")


class DataView:
    """Everything a model reads at train or inference time.

    ``tables`` holds the modalities of the multimodal side, including the
    ``profile`` pseudo-modality derived from ``train`` and the ``id`` one-hot
    table. Cold entities have an unavailable (empty) profile.
    """

    def __init__(self, train: InteractionMatrix, side: str = "item", tables: Iterable[ModalityTable] = ()):
        if side not in ("user", "item"):
            raise ValueError("side must be 'user' or 'item'")
        self.train = train
        self.side = side
        self.oriented = train if side == "item" else train.T
        self.tables: dict[str, ModalityTable] = {}
        for t in tables:
            if t.side != side:
                continue
            if t.name in RESERVED_MODALITIES:
                raise ValueError(f"modality name {t.name!r} is reserved")
            if t.n_entities != self.n_targets:
                raise ValueError(f"modality {t.name!r} has {t.n_entities} rows, expected {self.n_targets}")
            self.tables[t.name] = t
        self.tables["profile"] = profile_modality(train, side)
        self._id = None
        self._anchor_profiles = None
        self._pools: dict = {}

    @property
    def n_anchors(self) -> int:
        return self.oriented.n_users

    @property
    def n_targets(self) -> int:
        return self.oriented.n_items

    def table(self, name: str) -> ModalityTable:
        if name == "id":
            if self._id is None:
                self._id = id_modality(self.n_targets, self.side)
            return self._id
        try:
            return self.tables[name]
        except KeyError:
            raise KeyError(f"unknown modality {name!r}; known: {sorted(self.known_modalities())}") from None

    def known_modalities(self) -> list[str]:
        return sorted(set(self.tables) | {"id"})

    @property
    def anchor_profiles(self) -> np.ndarray:
        if self._anchor_profiles is None:
            self._anchor_profiles = self.oriented.dense()
        return self._anchor_profiles

    def availability(self, modalities: Sequence[str]) -> np.ndarray:
        """(n_targets, len(modalities)) availability mask."""
        return np.stack([self.table(m).available for m in modalities], axis=1)

    def negative_pool(self, modalities: Sequence[str]) -> np.ndarray:
        """Targets eligible as negatives: seen in training, with some modality available."""
        key = tuple(modalities)
        if key not in self._pools:
            seen = self.oriented.col_counts() > 0
            self._pools[key] = np.flatnonzero(seen & self.availability(key).any(axis=1))
        return self._pools[key]


@dataclass
class EmbeddingTable:
    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or not np.all(np.isfinite(self.vectors)):
            raise ValueError("embedding table must be a finite matrix")

    @classmethod
    def init(cls, n: int, d: int, gen: np.random.Generator, std: float = 0.1):
        return cls(gen.normal(0.0, std, size=(n, d)))


class SiBraRModel:
    def __init__(
        self,
        side: str,
        training_modalities: Sequence[str],
        projectors: Mapping[str, DenseLayer],
        branch: Network,
        counterpart,
        config: Optional[dict] = None,
        variant: str = "sibrar",
    ):
        self.side = side
        self.training_modalities = tuple(sorted(training_modalities))
        if not self.training_modalities:
            raise ValueError("at least one training modality is required")
        self.projectors = dict(projectors)
        self.branch = branch
        self.counterpart = counterpart
        self.config = dict(config or {})
        self.variant = variant
        missing = [m for m in self.training_modalities if m not in self.projectors]
        if missing:
            raise ValueError(f"no projector for modalities {missing}")
        outs = {p.d_out for p in self.projectors.values()}
        if len(outs) != 1:
            raise ValueError(f"projector output dims differ: {sorted(outs)}")
        self.proj_dim = outs.pop()
        if branch.layers and branch.d_in != self.proj_dim:
            raise ValueError("projector output dim must equal the branch input dim")
        self.d_emb = branch.d_out if branch.layers else self.proj_dim
        c_out = counterpart.vectors.shape[1] if isinstance(counterpart, EmbeddingTable) else counterpart.d_out
        if c_out != self.d_emb:
            raise ValueError(f"counterpart output dim {c_out} != embedding dim {self.d_emb}")

    # ------------------------------------------------------------------ build

    @classmethod
    def build(
        cls,
        view: DataView,
        training_modalities: Sequence[str],
        *,
        proj_dim: int = 32,
        branch_hidden: Sequence[int] = (64,),
        d_emb: int = 32,
        use_branch: bool = True,
        counterpart: str = "profile",
        counterpart_hidden: Sequence[int] = (64,),
        projector_activation: str = "relu",
        projector_bias: bool = True,
        seed: int = 0,
        variant: str = "sibrar",
    ) -> "SiBraRModel":
        mods = sorted(training_modalities)
        for m in mods:
            view.table(m)
        gen = make_rng(seed, "init")
        projectors = {
            m: DenseLayer.init(view.table(m).dim, proj_dim, gen, projector_activation, bias=projector_bias)
            for m in mods
        }
        if use_branch:
            branch = Network.mlp([proj_dim, *branch_hidden, d_emb], gen)
        else:
            if proj_dim != d_emb:
                raise ValueError("without a branch network proj_dim must equal d_emb")
            branch = Network([])
        if counterpart == "lookup":
            cp = EmbeddingTable.init(view.n_anchors, d_emb, gen)
        elif counterpart == "profile":
            cp = Network.mlp([view.n_targets, *counterpart_hidden, d_emb], gen)
        else:
            raise ValueError(f"unknown counterpart {counterpart!r}")
        config = dict(
            side=view.side,
            training_modalities=mods,
            proj_dim=proj_dim,
            branch_hidden=list(branch_hidden),
            d_emb=d_emb,
            use_branch=use_branch,
            counterpart=counterpart,
            counterpart_hidden=list(counterpart_hidden),
            projector_activation=projector_activation,
            projector_bias=projector_bias,
            seed=seed,
            modality_dims={m: view.table(m).dim for m in mods},
            n_anchors=view.n_anchors,
            n_targets=view.n_targets,
        )
        return cls(view.side, mods, projectors, branch, cp, config, variant)

    @property
    def counterpart_kind(self) -> str:
        return "lookup" if isinstance(self.counterpart, EmbeddingTable) else "profile"

    # ------------------------------------------------------------- parameters

    def parameters(self) -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for m in self.training_modalities:
            params.update(self.projectors[m].parameters(f"proj.{m}."))
        params.update(self.branch.parameters("branch."))
        if isinstance(self.counterpart, EmbeddingTable):
            params["counterpart.table"] = self.counterpart.vectors
        else:
            params.update(self.counterpart.parameters("counterpart."))
        return params

    def load_parameters(self, values: Mapping[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(values) != set(params):
            raise ValueError(f"parameter names differ: {sorted(set(values) ^ set(params))}")
        for k, p in params.items():
            v = np.asarray(values[k], dtype=np.float64)
            if v.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {p.shape}")
            p[...] = v

    def bind(self, tape: Optional[GradientTape] = None) -> dict[str, Var]:
        params = self.parameters()
        if tape is None:
            return constants(params)
        return {k: tape.watch(k, v) for k, v in params.items()}

    # ---------------------------------------------------------------- forward

    def project(self, modality: str, x, bound) -> Var:
        return self.projectors[modality].apply(as_var(x), bound, f"proj.{modality}.")

    def encode(self, pre: Var, bound) -> Var:
        return self.branch.apply(pre, bound, "branch.")

    def embed_anchors(self, anchors, view: DataView, bound) -> Var:
        anchors = np.asarray(anchors, dtype=np.int64)
        if isinstance(self.counterpart, EmbeddingTable):
            return take_rows(bound["counterpart.table"], anchors)
        return self.counterpart.apply(Var(view.anchor_profiles[anchors]), bound, "counterpart.")

    # -------------------------------------------------------------- inference

    def modality_outputs(self, view: DataView, modality: str, entities=None, stage: str = "post") -> np.ndarray:
        """Projector (``pre``) or branch (``post``) outputs of one modality."""
        X = view.table(modality).features
        if entities is not None:
            X = X[np.asarray(entities, dtype=np.int64)]
        bound = self.bind()
        pre = self.project(modality, X, bound)
        if stage == "pre":
            return pre.data
        if stage != "post":
            raise ValueError("stage must be 'pre' or 'post'")
        return self.encode(pre, bound).data

    def _subset(self, subset) -> tuple[str, ...]:
        if subset is None:
            return self.training_modalities
        subset = tuple(sorted(set(subset)))
        unknown = [m for m in subset if m not in self.training_modalities]
        if unknown:
            raise ValueError(f"modalities {unknown} were not used in training {list(self.training_modalities)}")
        return subset

    def target_embeddings(self, view: DataView, subset=None) -> tuple[np.ndarray, np.ndarray]:
        """Average of branch outputs over each target's available modalities.

        Returns ``(embeddings, defined)``; targets with no available modality in
        the subset get a zero row and ``defined=False``.
        """
        total = np.zeros((view.n_targets, self.d_emb))
        count = np.zeros(view.n_targets)
        for m in self._subset(subset):
            avail = view.table(m).available
            rows = np.flatnonzero(avail)
            if len(rows):
                total[rows] += self.modality_outputs(view, m, rows)
                count[rows] += 1
        defined = count > 0
        total[defined] /= count[defined, None]
        return total, defined

    def anchor_embeddings(self, view: DataView, anchors=None) -> np.ndarray:
        if anchors is None:
            anchors = np.arange(view.n_anchors)
        return self.embed_anchors(anchors, view, self.bind()).data

    def user_item_embeddings(self, view: DataView, subset=None) -> tuple[np.ndarray, np.ndarray]:
        targets, _ = self.target_embeddings(view, subset)
        anchors = self.anchor_embeddings(view)
        return (anchors, targets) if self.side == "item" else (targets, anchors)

    def score_matrix(self, users, view: DataView, subset=None) -> np.ndarray:
        U, I = self.user_item_embeddings(view, subset)
        return U[np.asarray(users, dtype=np.int64)] @ I.T

    def spec(self) -> dict:
        return {
            "variant": self.variant,
            "side": self.side,
            "training_modalities": list(self.training_modalities),
            "counterpart": self.counterpart_kind,
            "dims": {"proj_dim": self.proj_dim, "d_emb": self.d_emb},
            "config": self.config,
        }


def embed_entity_multimodal(model: SiBraRModel, entity: int, modality_subset, view: DataView) -> np.ndarray:
    """Mean of branch outputs over the entity's available modalities in the subset."""
    subset = model._subset(modality_subset)
    usable = [m for m in subset if view.table(m).available[entity]]
    if not usable:
        raise ValueError(f"entity {entity} has no available modality among {list(subset)}")
    total = np.zeros(model.d_emb)
    for m in usable:
        total += model.modality_outputs(view, m, [entity])[0]
    return total / len(usable)


def score(user_emb, item_emb) -> float:
    return float(np.dot(user_emb, item_emb))


# ---------------------------------------------------------------- baselines


class PopModel:
    variant = "pop"

    def __init__(self, counts):
        self.counts = np.asarray(counts, dtype=np.float64)

    def parameters(self):
        return {"counts": self.counts}

    def score_matrix(self, users, view=None, subset=None) -> np.ndarray:
        return np.tile(self.counts, (len(users), 1))

    def spec(self):
        return {"variant": "pop", "n_items": len(self.counts)}


class RandModel:
    """Uniformly random scores, reproducible per (seed, user)."""

    variant = "rand"

    def __init__(self, n_items: int, seed: int = 0):
        self.n_items = n_items
        self.seed = seed

    def parameters(self):
        return {}

    def score_matrix(self, users, view=None, subset=None) -> np.ndarray:
        out = np.empty((len(users), self.n_items))
        for r, u in enumerate(users):
            out[r] = make_rng(self.seed, "rand", int(u)).random(self.n_items)
        return out

    def spec(self):
        return {"variant": "rand", "n_items": self.n_items, "seed": self.seed}


class MFModel:
    variant = "mf"

    def __init__(self, user_factors: EmbeddingTable, item_factors: EmbeddingTable):
        if user_factors.vectors.shape[1] != item_factors.vectors.shape[1]:
            raise ValueError("user and item factors must share a dimension")
        self.user_factors = user_factors
        self.item_factors = item_factors

    @classmethod
    def init(cls, n_users: int, n_items: int, d_emb: int, seed: int = 0) -> "MFModel":
        gen = make_rng(seed, "init")
        return cls(EmbeddingTable.init(n_users, d_emb, gen), EmbeddingTable.init(n_items, d_emb, gen))

    @property
    def d_emb(self) -> int:
        return self.user_factors.vectors.shape[1]

    def parameters(self):
        return {"user_factors": self.user_factors.vectors, "item_factors": self.item_factors.vectors}

    def load_parameters(self, values):
        for k, p in self.parameters().items():
            p[...] = values[k]

    def score_matrix(self, users, view=None, subset=None) -> np.ndarray:
        return self.user_factors.vectors[np.asarray(users, dtype=np.int64)] @ self.item_factors.vectors.T

    def spec(self):
        u, i = self.user_factors.vectors.shape[0], self.item_factors.vectors.shape[0]
        return {"variant": "mf", "n_users": u, "n_items": i, "d_emb": self.d_emb}


def build_baseline(variant: str, train: InteractionMatrix, config: Optional[dict] = None, seed: int = 0):
    """Construct an (untrained) baseline from the training interactions."""
    config = dict(config or {})
    if variant == "pop":
        return PopModel(train.col_counts())
    if variant == "rand":
        return RandModel(train.n_items, seed)
    if variant == "mf":
        return MFModel.init(train.n_users, train.n_items, int(config.get("d_emb", 32)), seed)
    if variant == "deepmf":
        view = DataView(train, "item")
        hidden = list(config.get("hidden", [64]))
        d_emb = int(config.get("d_emb", 32))
        return SiBraRModel.build(
            view,
            ["profile"],
            proj_dim=hidden[0] if hidden else d_emb,
            branch_hidden=hidden[1:],
            d_emb=d_emb,
            use_branch=bool(hidden),
            counterpart="profile",
            counterpart_hidden=hidden,
            seed=seed,
            variant="deepmf",
        )
    raise ValueError(f"unknown baseline {variant!r}")


# ------------------------------------------------------------------- ranking


def rank_items(scores: np.ndarray, allowed: np.ndarray, k: int) -> list[int]:
    """Top-``k`` allowed indices by descending score, ties by ascending index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    cand = np.flatnonzero(allowed)
    order = np.lexsort((cand, -scores[cand]))
    return cand[order[:k]].tolist()


def recommend_top_k(model, user: int, candidate_items, exclusions=(), k: int = 10, view=None, subset=None) -> list[int]:
    if k < 1:
        raise ValueError("k must be >= 1")
    candidate_items = np.asarray(list(candidate_items), dtype=np.int64)
    if len(candidate_items) == 0:
        raise ValueError("candidate set is empty")
    row = model.score_matrix([user], view, subset)[0]
    allowed = np.zeros(len(row), dtype=bool)
    allowed[candidate_items] = True
    allowed[np.asarray(list(exclusions), dtype=np.int64)] = False
    return rank_items(row, allowed, k)
