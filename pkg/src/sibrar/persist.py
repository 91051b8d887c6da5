"""Checkpoints, model sidecars and tamper-checked run manifests."""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Optional

import numpy as np

from .data import SplitBundle
from .training import TrainConfig, build_model


class FingerprintError(RuntimeError):
    """Stored artifacts do not match the inputs or configuration they claim."""


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def toolkit_version() -> str:
    try:
        return metadata.version("sibrar")
    except metadata.PackageNotFoundError:
        return "unknown"


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------- checkpoints


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(block: dict) -> np.ndarray:
    raw = base64.b64decode(block["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(block["shape"]).astype(np.float64)


def save_checkpoint(path, params: dict, fingerprint: str) -> None:
    doc = {"fingerprint": fingerprint, "parameters": {k: encode_array(v) for k, v in sorted(params.items())}}
    write_json(path, doc)


def load_checkpoint(path, fingerprint: Optional[str] = None) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if fingerprint is not None and doc.get("fingerprint") != fingerprint:
        raise FingerprintError(
            f"checkpoint {path} was written for config {doc.get('fingerprint')}, expected {fingerprint}"
        )
    return {k: decode_array(v) for k, v in doc["parameters"].items()}


def save_model(run_dir, model, cfg: TrainConfig) -> None:
    """Write ``checkpoint.json`` and the ``model.json`` sidecar."""
    run_dir = Path(run_dir)
    fp = cfg.fingerprint()
    save_checkpoint(run_dir / "checkpoint.json", model.parameters(), fp)
    write_json(run_dir / "model.json", {"fingerprint": fp, "model": model.spec(), "config": cfg.to_dict()})


def load_model(run_dir, bundle: SplitBundle, tables=()):
    """Rebuild a model from its sidecar and checkpoint; returns ``(model, view, cfg)``."""
    run_dir = Path(run_dir)
    side = json.loads((run_dir / "model.json").read_text(encoding="utf-8"))
    cfg = TrainConfig.from_dict(side["config"])
    if cfg.fingerprint() != side["fingerprint"]:
        raise FingerprintError("model.json config does not hash to its recorded fingerprint")
    params = load_checkpoint(run_dir / "checkpoint.json", side["fingerprint"])
    model, view = build_model(cfg, bundle, tables)
    if cfg.model in ("pop", "rand"):
        current = model.parameters()
        for k, v in params.items():
            if k not in current or not np.array_equal(current[k], v):
                raise FingerprintError(f"stored {cfg.model} parameters disagree with the training split")
    else:
        model.load_parameters(params)
    return model, view, cfg


# ----------------------------------------------------------------- manifests


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict  # path -> sha256
    outputs: dict = field(default_factory=dict)
    version: str = field(default_factory=toolkit_version)
    started: str = ""
    finished: str = ""

    @staticmethod
    def now() -> str:
        return datetime.now(timezone.utc).isoformat(timespec="seconds")

    @staticmethod
    def digests(paths) -> dict:
        return {str(Path(p)): file_digest(p) for p in sorted({str(Path(p)) for p in paths})}

    def write(self, path) -> None:
        write_json(path, self.__dict__)

    @classmethod
    def read(cls, path, verify: bool = True) -> "RunManifest":
        """Load a manifest; with ``verify`` every recorded digest is recomputed."""
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        man = cls(**doc)
        if verify:
            base = Path(path).parent
            for group in (man.inputs, man.outputs):
                for p, digest in group.items():
                    q = Path(p) if Path(p).is_absolute() else base / p
                    if not q.exists():
                        raise FingerprintError(f"{p} recorded in {path} no longer exists")
                    if file_digest(q) != digest:
                        raise FingerprintError(f"{p} changed since {path} was written (digest mismatch)")
        return man
