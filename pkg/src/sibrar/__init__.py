"""Recommendation with one embedding network shared by all modalities."""

from .analysis import GapReport, gap_report
from .data import (
    IdMap,
    InteractionMatrix,
    ModalityTable,
    SplitBundle,
    SyntheticSpec,
    load_interactions,
    load_modality,
    make_split,
    split_cold,
    split_warm,
    synth_generate,
)
from .evaluation import (
    EvalReport,
    all_metrics,
    evaluate_split,
    metrics_at_k,
    missing_modality_sweep,
    ndcg_at_k,
    paired_t_test,
)
from .losses import BatchLossConfig, batch_loss, bpr_loss, sinfonce_loss
from .model import DataView, MFModel, PopModel, RandModel, SiBraRModel, build_baseline, embed_entity_multimodal
from .training import EarlyStopping, FitResult, SearchSpace, TrainConfig, build_model, fit, random_search

__all__ = [
    "BatchLossConfig",
    "DataView",
    "EarlyStopping",
    "EvalReport",
    "FitResult",
    "GapReport",
    "IdMap",
    "InteractionMatrix",
    "MFModel",
    "ModalityTable",
    "PopModel",
    "RandModel",
    "SearchSpace",
    "SiBraRModel",
    "SplitBundle",
    "SyntheticSpec",
    "TrainConfig",
    "all_metrics",
    "batch_loss",
    "bpr_loss",
    "build_baseline",
    "build_model",
    "embed_entity_multimodal",
    "evaluate_split",
    "fit",
    "gap_report",
    "load_interactions",
    "load_modality",
    "make_split",
    "metrics_at_k",
    "missing_modality_sweep",
    "ndcg_at_k",
    "paired_t_test",
    "random_search",
    "sinfonce_loss",
    "split_cold",
    "split_warm",
    "synth_generate",
]
