"""Checkpoints, run manifests and atomic file writes."""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import io
import json
import os
import uuid
from pathlib import Path

import torch

from . import __version__
from .classifiers import ClassifierSpec, TrainedClassifier, build_classifier
from .errors import ConfigError, IntegrityError
from .generator import ConditionedGenerator, GeneratorSpec, build_generator

MANIFEST = "manifest.json"
CLASSIFIER_WEIGHTS = "weights.pt"
CLASSIFIER_META = "classifier.json"
GENERATOR_WEIGHTS = "generator.pt"
GENERATOR_META = "generator.json"
HISTORY = "history.csv"
TIMING = "timing.csv"


def now():
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def atomic_bytes(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
    return path


def atomic_json(path, obj) -> Path:
    return atomic_bytes(path, (json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n").encode())


def atomic_torch(path, obj) -> Path:
    buf = io.BytesIO()
    torch.save(obj, buf)
    return atomic_bytes(path, buf.getvalue())


def read_json(path) -> dict:
    with open(path) as f:
        return json.load(f)


# --- classifier checkpoints ---------------------------------------------------


def save_classifier(classifier: TrainedClassifier, out_dir) -> dict:
    if not classifier.frozen:
        raise ConfigError("only frozen classifiers are checkpointed")
    out_dir = Path(out_dir)
    weights = atomic_torch(out_dir / CLASSIFIER_WEIGHTS, classifier.model.state_dict())
    meta = {
        "spec": classifier.spec.as_dict(),
        **classifier.manifest,
        "frozen_at": now(),
        "weights_sha256": sha256_file(weights),
    }
    atomic_json(out_dir / CLASSIFIER_META, meta)
    return meta


def load_classifier(ckpt_dir) -> TrainedClassifier:
    ckpt_dir = Path(ckpt_dir)
    meta_path, weights = ckpt_dir / CLASSIFIER_META, ckpt_dir / CLASSIFIER_WEIGHTS
    if not meta_path.exists() or not weights.exists():
        raise ConfigError(f"{ckpt_dir} is not a classifier checkpoint (needs {CLASSIFIER_META} and {CLASSIFIER_WEIGHTS})")
    meta = read_json(meta_path)
    actual = sha256_file(weights)
    if actual != meta["weights_sha256"]:
        raise IntegrityError(f"{weights}: digest {actual[:12]} does not match manifest {meta['weights_sha256'][:12]}")
    spec = ClassifierSpec.from_dict(meta["spec"])
    clf = build_classifier(spec, meta.get("init_seed", 0))
    clf.model.load_state_dict(torch.load(weights, weights_only=True))
    clf.manifest = meta
    return clf.freeze()


# --- generator checkpoints ----------------------------------------------------


def save_generator(generator: ConditionedGenerator, state: dict, meta: dict, out_dir) -> dict:
    out_dir = Path(out_dir)
    path = atomic_torch(out_dir / GENERATOR_WEIGHTS, {"model": generator.state_dict(), "state": state})
    meta = {**meta, "spec": generator.spec.as_dict(), "step": state["step"], "weights_sha256": sha256_file(path)}
    atomic_json(out_dir / GENERATOR_META, meta)
    return meta


def load_generator(ckpt_dir):
    """Returns (generator, optimizer/rng state, metadata)."""
    ckpt_dir = Path(ckpt_dir)
    meta_path, path = ckpt_dir / GENERATOR_META, ckpt_dir / GENERATOR_WEIGHTS
    if not meta_path.exists() or not path.exists():
        raise ConfigError(f"{ckpt_dir} is not a generator checkpoint (needs {GENERATOR_META} and {GENERATOR_WEIGHTS})")
    meta = read_json(meta_path)
    actual = sha256_file(path)
    if actual != meta["weights_sha256"]:
        raise IntegrityError(f"{path}: digest {actual[:12]} does not match manifest {meta['weights_sha256'][:12]}")
    blob = torch.load(path, weights_only=False)
    gen = build_generator(GeneratorSpec(**meta["spec"]), 0)
    gen.load_state_dict(blob["model"])
    gen.eval()
    return gen, blob["state"], meta


# --- loss history -------------------------------------------------------------


class HistoryLog:
    """Append-only CSV of logged loss rows; wall-clock times go to a sidecar CSV."""

    def __init__(self, path, columns, timing_path=None):
        self.path = Path(path)
        self.columns = list(columns)
        self.timing_path = Path(timing_path) if timing_path else None

    def reset(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(self.columns)
        if self.timing_path:
            with open(self.timing_path, "w", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow(["step", "wall_time"])

    def truncate(self, before_step: int):
        """Drop rows logged at or after ``before_step`` (used on resume)."""
        for path in filter(None, (self.path, self.timing_path)):
            if not path.exists():
                continue
            with open(path, newline="") as f:
                rows = list(csv.reader(f))
            kept = [rows[0]] + [r for r in rows[1:] if int(r[0]) < before_step]
            with open(path, "w", newline="") as f:
                csv.writer(f, lineterminator="\n").writerows(kept)

    def append(self, row: dict, wall_time: float = None):
        with open(self.path, "a", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow([_cell(row[c]) for c in self.columns])
        if self.timing_path and wall_time is not None:
            with open(self.timing_path, "a", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow([row["step"], f"{wall_time:.3f}"])

    def read(self) -> list:
        with open(self.path, newline="") as f:
            return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in csv.DictReader(f)]


def _cell(v):
    return v if isinstance(v, int) else repr(float(v))


# --- run manifests ------------------------------------------------------------


class RunManifest:
    def __init__(self, command, config, seeds, inputs=None, run_id=None):
        self.data = {
            "run_id": run_id or uuid.uuid4().hex[:12],
            "command": command,
            "config": config,
            "config_digest": config_digest(config),
            "seeds": seeds,
            "inputs": inputs or {},
            "outputs": {},
            "started_at": now(),
            "finished_at": None,
            "status": "running",
            "version": __version__,
        }

    @property
    def digest(self):
        return self.data["config_digest"]

    def add_output(self, path, base):
        path, base = Path(path), Path(base)
        self.data["outputs"][str(path.relative_to(base))] = sha256_file(path)

    def write(self, out_dir, status="ok", **extra):
        self.data.update(extra)
        self.data["status"] = status
        self.data["finished_at"] = now()
        return atomic_json(Path(out_dir) / MANIFEST, self.data)


def input_digest(path) -> dict:
    return {"path": str(path), "sha256": sha256_file(path)}


def verify_tree(root) -> list:
    """Re-hash every manifest output under ``root``. Returns a list of problem strings."""
    root = Path(root)
    problems, tracked = [], set()
    manifests = sorted(root.rglob(MANIFEST))
    if not manifests:
        return [f"no {MANIFEST} found under {root}"]
    for m in manifests:
        tracked.add(m.resolve())
        data = read_json(m)
        for rel, digest in data.get("outputs", {}).items():
            p = (m.parent / rel).resolve()
            tracked.add(p)
            if not p.exists():
                problems.append(f"missing: {p}")
            elif sha256_file(p) != digest:
                problems.append(f"drift: {p}")
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.resolve() not in tracked and not p.name.startswith("."):
            problems.append(f"untracked: {p}")
    return problems
