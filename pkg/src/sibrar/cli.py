"""Command-line entry point: ``sibrar <command> ...``.

Every command takes its randomness from one ``--seed`` and writes UTF-8
CSV/JSON next to any figures. Exit status is 0 only when all requested
artifacts were written; errors print one line to stderr and exit 1 (usage
errors exit 2).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import plotting
from .analysis import gap_report, write_gap_outputs
from .data import (
    SPLIT_KINDS,
    DataFormatError,
    SyntheticSpec,
    load_feature_index,
    load_interactions,
    load_split,
    make_split,
    save_split,
    write_synthetic,
)
from .evaluation import compare_reports, evaluate_split, missing_modality_sweep, write_significance, write_sweep_csv
from .model import RESERVED_MODALITIES, SiBraRModel
from .persist import FingerprintError, RunManifest, load_model, save_model, write_json
from .training import SearchSpace, TrainConfig, build_model, fit, random_search, write_metrics_csv

log = logging.getLogger("sibrar")


class CommandError(RuntimeError):
    pass


def _ratios(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"ratios must be three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3 or min(parts) < 0 or abs(sum(parts) - 1.0) > 1e-9:
        raise argparse.ArgumentTypeError(f"ratios must be three non-negative numbers summing to 1, got {text!r}")
    return parts


def _names(text: str) -> list[str]:
    names = [x.strip() for x in text.split(",") if x.strip()]
    if not names:
        raise argparse.ArgumentTypeError("expected a comma-separated list of modality names")
    return names


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CommandError(f"{path}: invalid JSON ({e})") from None


# -------------------------------------------------------------- data helpers


def _inputs_of_split(split_dir: Path) -> list[Path]:
    return [split_dir / f for f in ("train.csv", "valid.csv", "test.csv", "manifest.json")]


def _inputs_of_features(features: Optional[Path]) -> list[Path]:
    if features is None:
        return []
    index = _read_json(features)
    return [features, *(features.parent / m["path"] for m in index["modalities"])]


def _load_data(split_dir: Path, features: Optional[Path]):
    bundle, users, items = load_split(split_dir)
    tables = load_feature_index(features, users, items) if features is not None else []
    return bundle, users, items, tables


def _check_modalities(cfg: TrainConfig, tables) -> None:
    if cfg.model != "sibrar":
        return
    known = sorted({t.name for t in tables if t.side == cfg.side} | set(RESERVED_MODALITIES))
    unknown = [m for m in cfg.training_modalities if m not in known]
    if unknown:
        raise CommandError(f"unknown modality {', '.join(unknown)}; known modalities: {', '.join(known)}")


def _open_run(run_dir: Path):
    """Verify a run directory and rebuild its model and data."""
    man_path = run_dir / "run_manifest.json"
    if not man_path.exists():
        raise CommandError(f"{run_dir} is not a run directory (no run_manifest.json)")
    man = RunManifest.read(man_path, verify=True)
    split_dir = Path(man.config["split_dir"])
    features = Path(man.config["features"]) if man.config.get("features") else None
    bundle, users, items, tables = _load_data(split_dir, features)
    model, view, cfg = load_model(run_dir, bundle, tables)
    if cfg.fingerprint() != man.config["fingerprint"]:
        raise FingerprintError("run manifest and model sidecar disagree on the config fingerprint")
    return man, bundle, users, items, model, view, cfg


def _write_run(run_dir: Path, command: str, model, cfg, result, inputs, split_dir, features, started) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    write_json(run_dir / "config.json", cfg.to_dict())
    write_metrics_csv(result, run_dir / "metrics.csv")
    save_model(run_dir, model, cfg)
    if result.train_loss:
        plotting.plot_training_curves(result.train_loss, result.val_ndcg, run_dir / "training_curves.png", result.best_epoch)
    outputs = {p: RunManifest.digests([run_dir / p])[str(run_dir / p)] for p in ("checkpoint.json", "model.json", "metrics.csv", "config.json")}
    man = RunManifest(
        command=command,
        config={
            "train": cfg.to_dict(),
            "fingerprint": cfg.fingerprint(),
            "split_dir": str(split_dir.resolve()),
            "features": str(features.resolve()) if features else None,
            "best_epoch": result.best_epoch,
            "stopped_epoch": result.stopped_epoch,
        },
        seed=cfg.seed,
        inputs=RunManifest.digests(p.resolve() for p in inputs),
        outputs=outputs,
        started=started,
        finished=RunManifest.now(),
    )
    man.write(run_dir / "run_manifest.json")


def _command_manifest(out: Path, name: str, command: str, config: dict, seed: int, inputs, started) -> None:
    RunManifest(
        command=command,
        config=config,
        seed=seed,
        inputs=RunManifest.digests(Path(p).resolve() for p in inputs),
        started=started,
        finished=RunManifest.now(),
    ).write(out / name)


# ------------------------------------------------------------------ commands


def cmd_synth(args) -> None:
    started = RunManifest.now()
    doc = _read_json(args.spec) if args.spec else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = SyntheticSpec.from_dict(doc)
    out = write_synthetic(spec, args.out)
    write_json(out / "synth_spec.json", doc)
    _command_manifest(out, "run_manifest.json", "synth", doc, spec.seed, [args.spec] if args.spec else [], started)


def cmd_split(args) -> None:
    started = RunManifest.now()
    R, users, items = load_interactions(args.interactions)
    bundle = make_split(R, args.kind, args.ratios, args.seed)
    out = Path(args.out)
    save_split(bundle, out, users, items)
    config = {"kind": args.kind, "ratios": list(args.ratios), "interactions": str(Path(args.interactions).resolve())}
    _command_manifest(out, "run_manifest.json", "split", config, args.seed, [args.interactions], started)


def _train_config(args) -> TrainConfig:
    doc = _read_json(args.config) if args.config else {}
    if args.model is not None:
        doc["model"] = args.model
    if args.modalities is not None:
        doc["training_modalities"] = args.modalities
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.max_epochs is not None:
        doc["max_epochs"] = args.max_epochs
    return TrainConfig.from_dict(doc)


def cmd_train(args) -> None:
    started = RunManifest.now()
    cfg = _train_config(args)
    split_dir = Path(args.split_dir)
    features = Path(args.features) if args.features else None
    bundle, _, _, tables = _load_data(split_dir, features)
    _check_modalities(cfg, tables)
    model, view = build_model(cfg, bundle, tables)
    result = fit(model, bundle, cfg, view=view)
    inputs = [*_inputs_of_split(split_dir), *_inputs_of_features(features)]
    if args.config:
        inputs.append(Path(args.config))
    _write_run(Path(args.out), "train", model, cfg, result, inputs, split_dir, features, started)
    print(f"best epoch {result.best_epoch}: val nDCG@{cfg.k} = {result.best_val:.4f}")


def cmd_eval(args) -> None:
    started = RunManifest.now()
    run_dir = Path(args.run_dir)
    man, bundle, users, _, model, view, cfg = _open_run(run_dir)
    subset = args.modalities
    ctx = {"fingerprint": cfg.fingerprint(), "model": cfg.model}
    report = evaluate_split(model, bundle, args.k, args.split, view=view, subset=subset, context=ctx)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / f"report_{args.split}.json", users.ids)
    report.write_csv(out / f"report_{args.split}.csv", users.ids)
    _command_manifest(
        out, f"eval_{args.split}_manifest.json", "eval",
        {"split": args.split, "k": args.k, "fingerprint": cfg.fingerprint(), "modalities": subset},
        cfg.seed, [run_dir / "checkpoint.json"], started,
    )
    agg = report.aggregates
    print(" ".join(f"{m}@{args.k}={agg[m]:.4f}" for m in agg) + f" coverage={report.coverage:.4f}")


def _require_sibrar(model, what: str) -> SiBraRModel:
    if not isinstance(model, SiBraRModel):
        raise CommandError(f"{what} needs a single-branch model, this run holds {model.variant!r}")
    return model


def cmd_sweep(args) -> None:
    started = RunManifest.now()
    run_dir = Path(args.run_dir)
    _, bundle, _, _, model, view, cfg = _open_run(run_dir)
    model = _require_sibrar(model, "the modality sweep")
    results = missing_modality_sweep(model, bundle, args.k, args.split, view)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    mods = list(model.training_modalities)
    write_sweep_csv(results, mods, out / f"sweep_{args.split}.csv")
    plotting.plot_sweep([(s, r.aggregates["ndcg"]) for s, r in results], mods, out / f"sweep_{args.split}.png")
    _command_manifest(
        out, f"sweep_{args.split}_manifest.json", "sweep",
        {"split": args.split, "k": args.k, "fingerprint": cfg.fingerprint()},
        cfg.seed, [run_dir / "checkpoint.json"], started,
    )
    print(f"{len(results)} modality subsets evaluated")


def cmd_gap(args) -> None:
    started = RunManifest.now()
    run_dir = Path(args.run_dir)
    _, _, users, items, model, view, cfg = _open_run(run_dir)
    model = _require_sibrar(model, "the gap analysis")
    pre, post = gap_report(model, view, args.sample_size, args.seed)
    out = Path(args.out) if args.out else run_dir
    ids = items.ids if model.side == "item" else users.ids
    write_gap_outputs(pre, post, out, ids)
    plotting.plot_gap(pre, post, out / "gap_pca.png")
    _command_manifest(
        out, "gap_manifest.json", "gap",
        {"sample_size": args.sample_size, "fingerprint": cfg.fingerprint()},
        args.seed, [run_dir / "checkpoint.json"], started,
    )


def cmd_search(args) -> None:
    started = RunManifest.now()
    space = SearchSpace.from_dict(_read_json(args.space))
    split_dir = Path(args.split_dir)
    features = Path(args.features) if args.features else None
    bundle, _, _, tables = _load_data(split_dir, features)
    for m in space.modalities:
        _check_modalities(TrainConfig(training_modalities=[m]), tables)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg, rows, model, result = random_search(space, args.budget, bundle, args.seed, tables, out / "leaderboard.csv")
    inputs = [*_inputs_of_split(split_dir), *_inputs_of_features(features), Path(args.space)]
    _write_run(out / "best", "search", model, cfg, result, inputs, split_dir, features, started)
    _command_manifest(
        out, "run_manifest.json", "search", {"budget": args.budget, "best": rows[0]["config_hash"]},
        args.seed, inputs, started,
    )
    print(f"best trial {rows[0]['trial']}: val nDCG = {rows[0]['val_ndcg']:.4f}")


def cmd_compare(args) -> None:
    started = RunManifest.now()
    paths = [Path(p) for p in args.reports]
    names = args.names or [p.parent.name + "/" + p.stem if p.parent.name else p.stem for p in paths]
    if len(names) != len(paths):
        raise CommandError("--names must give one name per report")
    if len(set(names)) != len(names):
        raise CommandError(f"report names must be distinct, got {names}")
    per_user = {}
    for name, p in zip(names, paths):
        doc = _read_json(p)
        if "per_user" not in doc:
            raise CommandError(f"{p} is not an evaluation report")
        per_user[name] = doc["per_user"]
    entries = compare_reports(per_user, args.metric, args.alpha)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_significance(entries, out / "significance.csv", out / "significance.json")
    _command_manifest(
        out, "run_manifest.json", "compare", {"metric": args.metric, "alpha": args.alpha, "names": names},
        0, paths, started,
    )


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sibrar", description="Single-branch multimodal recommender toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--spec", help="JSON file with SyntheticSpec fields")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("split", help="split interactions into train/valid/test")
    s.add_argument("--interactions", required=True)
    s.add_argument("--kind", choices=SPLIT_KINDS, required=True)
    s.add_argument("--ratios", type=_ratios, default=(0.8, 0.1, 0.1))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train a model on a split")
    s.add_argument("--split-dir", required=True)
    s.add_argument("--modalities", type=_names)
    s.add_argument("--config", help="JSON file with TrainConfig fields")
    s.add_argument("--features", help="modalities.json index of feature files")
    s.add_argument("--model", choices=("sibrar", "mf", "deepmf", "pop", "rand"))
    s.add_argument("--seed", type=int)
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a trained run"), ("sweep", cmd_sweep, "evaluate every modality subset")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--run-dir", required=True)
        s.add_argument("--split", choices=("valid", "test"), default="test")
        s.add_argument("--k", type=int, default=10)
        s.add_argument("--out")
        if name == "eval":
            s.add_argument("--modalities", type=_names, help="restrict inference to these training modalities")
        s.set_defaults(func=func)

    s = sub.add_parser("gap", help="modality-gap statistics before and after the branch")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--sample-size", type=int, default=3000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_gap)

    s = sub.add_parser("search", help="random hyperparameter search")
    s.add_argument("--space", required=True)
    s.add_argument("--budget", type=int, required=True)
    s.add_argument("--split-dir", required=True)
    s.add_argument("--features")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("compare", help="paired t-tests between evaluation reports")
    s.add_argument("--reports", nargs="+", required=True)
    s.add_argument("--names", type=_names)
    s.add_argument("--metric", choices=("ndcg", "precision", "recall", "ap"), default="ndcg")
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_compare)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "k", 1) < 1:
        parser.error("--k must be >= 1")
    try:
        args.func(args)
    except (CommandError, FingerprintError, DataFormatError, ValueError, KeyError, FileNotFoundError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"sibrar {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
