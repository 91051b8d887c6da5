"""Mini-batch training with early stopping, and random hyperparameter search."""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from .data import ModalityTable, SplitBundle
from .evaluation import evaluate_split
from .losses import BatchLossConfig, batch_loss
from .model import DataView, MFModel, PopModel, RandModel, SiBraRModel, build_baseline
from .numerics import OptimizerState, adam_step, backward, derive_seed
from .numerics import rng as make_rng
from .sampling import sample_negatives, sample_negatives_batch

log = logging.getLogger(__name__)

MODEL_KINDS = ("sibrar", "mf", "deepmf", "pop", "rand")

__all__ = [
    "EarlyStopping",
    "FitResult",
    "SearchSpace",
    "TrainConfig",
    "TrainingError",
    "build_model",
    "fit",
    "fit_mf",
    "random_search",
    "sample_negatives",
    "sample_negatives_batch",
]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: str = "sibrar"
    side: str = "item"
    training_modalities: list = field(default_factory=lambda: ["profile"])
    lr: float = 1e-3
    weight_decay: float = 0.0
    d_emb: int = 32
    proj_dim: int = 32
    branch_hidden: list = field(default_factory=lambda: [64])
    use_branch: bool = True
    counterpart: str = "profile"
    counterpart_hidden: list = field(default_factory=lambda: [64])
    projector_activation: str = "relu"
    projector_bias: bool = True
    batch_size: int = 256
    n_neg: int = 10
    ctr_embs: bool = False
    lam: float = 0.0
    tau: float = 1.0
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    k: int = 10

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"model must be one of {MODEL_KINDS}")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("max_epochs, patience and batch_size must be >= 1")
        if not self.training_modalities:
            raise ValueError("training_modalities must be non-empty")
        self.training_modalities = list(self.training_modalities)
        self.branch_hidden = list(self.branch_hidden)
        self.counterpart_hidden = list(self.counterpart_hidden)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        return config_hash(self.to_dict())

    def loss_config(self) -> BatchLossConfig:
        return BatchLossConfig(self.n_neg, self.ctr_embs, self.lam, self.tau)


def config_hash(obj: Any) -> str:
    canon = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


@dataclass
class FitResult:
    best_params: dict
    train_loss: list
    val_ndcg: list
    stopped_epoch: int
    best_epoch: int

    @property
    def best_val(self) -> float:
        if self.best_epoch:
            return self.val_ndcg[self.best_epoch - 1]
        return self.val_ndcg[0] if self.val_ndcg else float("nan")


class EarlyStopping:
    """Tracks the best validation value and signals when patience runs out."""

    def __init__(self, patience: int, max_epochs: int):
        self.patience = patience
        self.max_epochs = max_epochs
        self.best = -np.inf
        self.best_epoch = 0
        self.epoch = 0
        self.bad_epochs = 0

    def update(self, value: float) -> bool:
        self.epoch += 1
        if value > self.best:
            self.best, self.best_epoch, self.bad_epochs = value, self.epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience or self.epoch >= self.max_epochs


def _run_epochs(model, cfg: TrainConfig, train_epoch, validate) -> FitResult:
    params = model.parameters()
    stopper = EarlyStopping(cfg.patience, cfg.max_epochs)
    losses, vals = [], []
    best = {k: v.copy() for k, v in params.items()}
    while not stopper.should_stop:
        epoch = stopper.epoch + 1
        losses.append(train_epoch(epoch))
        val = validate()
        vals.append(val)
        if stopper.update(val):
            best = {k: v.copy() for k, v in params.items()}
        log.info("epoch %d loss %.6f val_ndcg@%d %.6f", epoch, losses[-1], cfg.k, val)
    model.load_parameters(best)
    return FitResult(best, losses, vals, stopper.epoch, stopper.best_epoch)


def _validator(model, bundle: SplitBundle, cfg: TrainConfig, view):
    def validate():
        return evaluate_split(model, bundle, cfg.k, split="valid", view=view).aggregates["ndcg"]

    return validate


def _epoch_streams(seed: int, epoch: int):
    return (
        make_rng(seed, "shuffle", epoch),
        make_rng(seed, "negatives", epoch),
        make_rng(seed, "modalities", epoch),
    )


def _check_loss(value: float, epoch: int, batch: int):
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {batch}")


def fit_sibrar(model: SiBraRModel, bundle: SplitBundle, cfg: TrainConfig, view: DataView) -> FitResult:
    missing = [m for m in model.training_modalities if m not in view.known_modalities()]
    if missing:
        raise ValueError(f"modalities {missing} not available; known: {view.known_modalities()}")
    anchors, targets = view.oriented.pairs()
    if not len(anchors):
        raise ValueError("training matrix is empty")
    loss_cfg = cfg.loss_config()
    pool = view.negative_pool(model.training_modalities)
    params = model.parameters()
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)

    def train_epoch(epoch):
        shuffle, neg_gen, mod_gen = _epoch_streams(cfg.seed, epoch)
        order = shuffle.permutation(len(anchors))
        total = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            value, tape = batch_loss((anchors[idx], targets[idx]), model, view, loss_cfg, neg_gen, mod_gen, pool)
            _check_loss(value, epoch, b)
            adam_step(opt, params, backward(tape, tape.output))
            total += value
        return total / len(order)

    return _run_epochs(model, cfg, train_epoch, _validator(model, bundle, cfg, view))


def mf_batch_gradients(P, Q, users, positives, negatives):
    """Closed-form pairwise-ranking loss and gradients for matrix factorisation."""
    U = P[users]
    diff = Q[positives][:, None, :] - Q[negatives]
    margin = np.einsum("bd,bkd->bk", U, diff)
    loss = float(np.logaddexp(0.0, -margin).sum())
    coef = -np.exp(-np.logaddexp(0.0, margin))  # d loss / d margin = -sigmoid(-margin)
    gP = np.zeros_like(P)
    gQ = np.zeros_like(Q)
    np.add.at(gP, users, np.einsum("bk,bkd->bd", coef, diff))
    np.add.at(gQ, positives, coef.sum(axis=1)[:, None] * U)
    np.add.at(gQ, negatives.ravel(), (-coef[:, :, None] * U[:, None, :]).reshape(-1, P.shape[1]))
    return loss, gP, gQ


def fit_mf(model: MFModel, bundle: SplitBundle, cfg: TrainConfig) -> FitResult:
    """Matrix factorisation with the pairwise ranking loss, trained directly."""
    R = bundle.train
    users, items = R.pairs()
    if not len(users):
        raise ValueError("training matrix is empty")
    pool = np.flatnonzero(R.col_counts() > 0)
    P, Q = model.user_factors.vectors, model.item_factors.vectors
    params = model.parameters()
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)

    def train_epoch(epoch):
        shuffle, neg_gen, _ = _epoch_streams(cfg.seed, epoch)
        order = shuffle.permutation(len(users))
        total = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            neg = sample_negatives_batch(R, users[idx], cfg.n_neg, neg_gen, pool)
            value, gP, gQ = mf_batch_gradients(P, Q, users[idx], items[idx], neg)
            _check_loss(value, epoch, b)
            adam_step(opt, params, {"user_factors": gP, "item_factors": gQ})
            total += value
        return total / len(order)

    return _run_epochs(model, cfg, train_epoch, _validator(model, bundle, cfg, None))


def build_model(cfg: TrainConfig, bundle: SplitBundle, tables: Iterable[ModalityTable] = ()):
    """Instantiate the configured model and the data view it reads."""
    if cfg.model == "sibrar":
        view = DataView(bundle.train, cfg.side, tables)
        model = SiBraRModel.build(
            view,
            cfg.training_modalities,
            proj_dim=cfg.proj_dim,
            branch_hidden=cfg.branch_hidden,
            d_emb=cfg.d_emb,
            use_branch=cfg.use_branch,
            counterpart=cfg.counterpart,
            counterpart_hidden=cfg.counterpart_hidden,
            projector_activation=cfg.projector_activation,
            projector_bias=cfg.projector_bias,
            seed=cfg.seed,
        )
        return model, view
    if cfg.model == "deepmf":
        hidden = [cfg.proj_dim, *cfg.branch_hidden] if cfg.use_branch else []
        model = build_baseline("deepmf", bundle.train, {"hidden": hidden, "d_emb": cfg.d_emb}, cfg.seed)
        return model, DataView(bundle.train, "item")
    return build_baseline(cfg.model, bundle.train, {"d_emb": cfg.d_emb}, cfg.seed), None


def fit(model, bundle: SplitBundle, cfg: TrainConfig, view: Optional[DataView] = None, tables=()) -> FitResult:
    """Train ``model`` on ``bundle.train`` and keep the best validation weights."""
    if bundle.train.nnz == 0:
        raise ValueError("training matrix is empty")
    if isinstance(model, SiBraRModel):
        view = view if view is not None else DataView(bundle.train, model.side, tables)
        return fit_sibrar(model, bundle, cfg, view)
    if isinstance(model, MFModel):
        return fit_mf(model, bundle, cfg)
    if isinstance(model, (PopModel, RandModel)):
        val = _validator(model, bundle, cfg, None)()
        return FitResult({}, [], [val], 0, 0)
    raise TypeError(f"cannot fit {type(model).__name__}")


def write_metrics_csv(result: FitResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_ndcg@10"])
        for e, (loss, val) in enumerate(zip(result.train_loss, result.val_ndcg), start=1):
            w.writerow([e, repr(float(loss)), repr(float(val))])


# ------------------------------------------------------------------- search


@dataclass
class SearchSpace:
    """Per-field choices for :class:`TrainConfig`.

    ``values`` maps a field name to a list of options or to a range dict
    ``{"low": a, "high": b, "log": bool, "int": bool}``. Training modalities
    are drawn from ``modalities`` under ``policy``: ``one`` picks a single
    modality, ``one_or_more`` any non-empty subset.
    """

    values: dict = field(default_factory=dict)
    modalities: list = field(default_factory=lambda: ["profile"])
    policy: str = "one_or_more"
    base: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.policy not in ("one", "one_or_more"):
            raise ValueError("policy must be 'one' or 'one_or_more'")
        if not self.modalities:
            raise ValueError("modalities must be non-empty")
        for name, spec in self.values.items():
            if isinstance(spec, dict):
                if not spec["low"] <= spec["high"]:
                    raise ValueError(f"empty range for {name}")
            elif not spec:
                raise ValueError(f"empty value set for {name}")

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        return cls(**d)

    def modality_subsets(self) -> list[tuple[str, ...]]:
        mods = sorted(self.modalities)
        if self.policy == "one":
            return [(m,) for m in mods]
        return [c for r in range(1, len(mods) + 1) for c in itertools.combinations(mods, r)]

    def sample(self, gen: np.random.Generator) -> dict:
        out = {}
        for name in sorted(self.values):
            spec = self.values[name]
            if isinstance(spec, dict):
                lo, hi = float(spec["low"]), float(spec["high"])
                if spec.get("log"):
                    val = float(np.exp(gen.uniform(np.log(lo), np.log(hi))))
                else:
                    val = float(gen.uniform(lo, hi))
                out[name] = int(round(val)) if spec.get("int") else val
            else:
                out[name] = spec[int(gen.integers(len(spec)))]
        subsets = self.modality_subsets()
        out["training_modalities"] = list(subsets[int(gen.integers(len(subsets)))])
        return out


def random_search(
    space: SearchSpace,
    budget: int,
    bundle: SplitBundle,
    seed: int = 0,
    tables: Sequence[ModalityTable] = (),
    leaderboard_path=None,
):
    """Fit ``budget`` randomly drawn configurations and rank them on validation.

    Returns ``(best_config, leaderboard, best_model, best_result)``; the
    leaderboard is sorted by validation nDCG descending, ties by config hash.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    gen = make_rng(seed, "search")
    rows, fitted = [], {}
    for trial in range(budget):
        draw = space.sample(gen)
        cfg = TrainConfig.from_dict({**space.base, **draw, "seed": derive_seed(seed, "trial", trial)})
        model, view = build_model(cfg, bundle, tables)
        result = fit(model, bundle, cfg, view=view)
        h = cfg.fingerprint()
        rows.append(
            {
                "trial": trial,
                "val_ndcg": result.best_val,
                "best_epoch": result.best_epoch,
                "stopped_epoch": result.stopped_epoch,
                "config_hash": h,
                "config": cfg.to_dict(),
            }
        )
        fitted[trial] = (cfg, model, result)
    rows.sort(key=lambda r: (-r["val_ndcg"], r["config_hash"]))
    if leaderboard_path is not None:
        write_leaderboard(rows, leaderboard_path)
    best_cfg, best_model, best_result = fitted[rows[0]["trial"]]
    return best_cfg, rows, best_model, best_result


def write_leaderboard(rows, path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "trial", "val_ndcg@10", "best_epoch", "stopped_epoch", "config_hash", "config"])
        for rank, r in enumerate(rows, start=1):
            w.writerow(
                [
                    rank,
                    r["trial"],
                    repr(float(r["val_ndcg"])),
                    r["best_epoch"],
                    r["stopped_epoch"],
                    r["config_hash"],
                    json.dumps(r["config"], sort_keys=True),
                ]
            )
