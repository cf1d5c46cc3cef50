"""Command-line entry point: train-classifier, invert, evaluate, benchmark, verify."""

from __future__ import annotations

import argparse
import concurrent.futures as cf
import hashlib
import logging
import subprocess
import sys
import time
from pathlib import Path

import torch

from . import artifacts as art
from . import config as C
from .classifiers import ARCHS, ClassifierSpec, build_classifier, classification_loss_grad_norm, forward_features, input_sensitivity, train_classifier
from .data import ALIASES as DATASET_ALIASES
from .data import DatasetSpec, canonical_name, load_dataset
from .errors import AuditError, ConfigError, DatasetError, IntegrityError, NumericalError
from .evaluation import (
    ARCH_ORDER,
    SSIMConfig,
    build_report,
    grid_rows,
    match_reconstructions,
    save_grid,
    ssim_matrix,
    write_table,
)
from .generator import GeneratorSpec, build_generator, generate, sample_conditioning
from .inversion import HISTORY_COLUMNS, PerturbationSpec, ReconConfig, ReconLossWeights, initial_state, run_reconstruction

log = logging.getLogger("inversion_audit")

COMMANDS = {
    "train-classifier": C.TRAIN_DEFAULTS,
    "invert": C.INVERT_DEFAULTS,
    "evaluate": C.EVALUATE_DEFAULTS,
    "benchmark": C.BENCHMARK_DEFAULTS,
}


def _dataset_spec(cfg_or_dict) -> DatasetSpec:
    d = dict(cfg_or_dict)
    return DatasetSpec(
        d["name"],
        image_shape=tuple(d["image_shape"]),
        num_classes=d["num_classes"],
        subset_size=d.get("subset_size"),
        split=d.get("split", "train"),
        seed=d.get("seed", 0),
        source=d.get("source", "auto"),
    )


# --- train-classifier ----------------------------------------------------------


def cmd_train_classifier(cfg: dict) -> dict:
    C.require(cfg, "arch", "dataset")
    name = canonical_name(cfg["dataset"])
    out = Path(cfg["out"] or f"runs/classifier_{cfg['arch'].lower()}_{name.lower()}_s{cfg['seed']}")
    extra = {"num_classes": cfg["num_classes"]} if cfg["num_classes"] else {}
    train_spec = DatasetSpec(name, subset_size=cfg["subset_size"], seed=cfg["data_seed"], **extra)
    train_set = load_dataset(train_spec, cfg["cache_dir"])
    try:
        test_set = load_dataset(DatasetSpec(name, split="test", seed=cfg["data_seed"], **extra), cfg["cache_dir"])
    except (DatasetError, ConfigError) as exc:
        log.warning("test split unavailable, test accuracy not recorded: %s", exc)
        test_set = None

    spec = ClassifierSpec(cfg["arch"], train_spec.image_shape, train_spec.num_classes, cnn_features=cfg["cnn_features"])
    manifest = art.RunManifest(
        "train-classifier",
        _portable(cfg),
        {"seed": cfg["seed"], "data_seed": cfg["data_seed"]},
        inputs={"dataset": train_set.provenance},
    )
    clf = build_classifier(spec, cfg["seed"])
    train_classifier(clf, train_set, cfg["epochs"], cfg["lr"], cfg["seed"], cfg["batch_size"], test_set=test_set)
    meta = art.save_classifier(clf, out)
    for f in (art.CLASSIFIER_WEIGHTS, art.CLASSIFIER_META):
        manifest.add_output(out / f, out)
    manifest.write(out, metrics={"train_accuracy": meta["train_accuracy"], "test_accuracy": meta["test_accuracy"]})
    log.info("%s on %s: train acc %.4f -> %s", spec.arch, name, meta["train_accuracy"], out)
    return {"out": out, "classifier": meta}


def _portable(cfg):
    """Config minus locations, so digests do not depend on where a run is written."""
    return {k: v for k, v in cfg.items() if k not in ("out", "cache_dir", "classifier", "generator", "resume")}


# --- invert ------------------------------------------------------------------


def recon_config(cfg: dict) -> ReconConfig:
    return ReconConfig(
        steps=cfg["steps"],
        batch_size=cfg["batch_size"],
        lr=cfg["lr"],
        weights=ReconLossWeights(**C.section(cfg, "weights")),
        pert=PerturbationSpec(cfg["pert.kind"], cfg["pert.magnitude"]),
        seed=cfg["seed"],
        mode=cfg["mode"],
        smoothing=cfg["smoothing"],
        clip_norm=cfg["clip_norm"],
        log_every=cfg["log_every"],
        checkpoint_every=cfg["checkpoint_every"],
    )


def cmd_invert(cfg: dict) -> dict:
    C.require(cfg, "classifier")
    clf_dir = Path(cfg["classifier"])
    clf = art.load_classifier(clf_dir)  # refuses on digest mismatch
    rc = recon_config(cfg)
    out = Path(cfg["out"] or f"runs/inversion_{clf_dir.name}_s{cfg['seed']}")
    gspec = GeneratorSpec(clf.spec.num_classes, clf.spec.input_shape, cfg["latent_dim"], cfg["base_channels"])
    portable = _portable(cfg)
    digest = art.config_digest({k: v for k, v in portable.items() if k != "steps"})
    history = art.HistoryLog(out / art.HISTORY, HISTORY_COLUMNS, out / art.TIMING)

    state = None
    if cfg["resume"] and (out / art.GENERATOR_WEIGHTS).exists():
        gen, state, prev = art.load_generator(out)
        if prev["resume_digest"] != digest or prev["classifier"]["sha256"] != clf.manifest["weights_sha256"]:
            raise ConfigError("resume: config or classifier differs from the checkpointed run")
        history.truncate(state["step"])
        log.info("resuming %s from step %d", out, state["step"])
    else:
        gen = build_generator(gspec, cfg["seed"])
        history.reset()

    meta = {
        "classifier": {"path": str(clf_dir), "sha256": clf.manifest["weights_sha256"], "arch": clf.spec.arch},
        "dataset": clf.manifest.get("dataset"),
        "recon": {**rc.as_dict(), "steps": rc.steps},
        "seed": cfg["seed"],
        "resume_digest": digest,
    }
    manifest = art.RunManifest(
        "invert",
        portable,
        {"seed": cfg["seed"]},
        inputs={"classifier": art.input_digest(clf_dir / art.CLASSIFIER_WEIGHTS)},
    )
    t0 = time.monotonic()

    def on_log(row):
        history.append(row, time.monotonic() - t0)

    def on_checkpoint(g, st):
        art.save_generator(g, st, meta, out)

    if state is None:
        state = initial_state(gen, rc)
        on_checkpoint(gen, state)
    status, error = "ok", None
    try:
        run_reconstruction(clf, gen, rc, state=state, on_log=on_log, on_checkpoint=on_checkpoint)
    except NumericalError as exc:
        status, error = "failed", f"{exc} (last good checkpoint: step {exc.last_good_step})"
    for f in (art.GENERATOR_WEIGHTS, art.GENERATOR_META, art.HISTORY, art.TIMING):
        manifest.add_output(out / f, out)
    manifest.write(out, status=status, error=error)
    if error:
        raise NumericalError("total", error)
    return {"out": out, "history": history.read()}


# --- evaluate ----------------------------------------------------------------


def _noise_like(shape, n, seed):
    return torch.rand((n,) + tuple(shape), generator=torch.Generator().manual_seed(seed))


def reconstruct_per_class(gen, classes, per_class, seed):
    pixels, labels = [], []
    for k in classes:
        g = torch.Generator().manual_seed(seed * 7919 + k)
        bundle = sample_conditioning(gen.spec.num_classes, per_class, "one_hot_target", g, gen.spec.latent_dim, class_index=k)
        pixels.append(generate(gen, bundle).pixels)
        labels.append(bundle.class_index)
    if not pixels:
        return torch.empty((0,) + gen.spec.output_shape), torch.empty(0, dtype=torch.long)
    return torch.cat(pixels), torch.cat(labels)


def diagnostics(clf, recons, classes, seed) -> dict:
    """Classifier-side statistics of reconstructions vs uniform noise."""
    if len(recons) == 0:
        return {}
    noise = _noise_like(recons.shape[1:], len(recons), seed + 1)
    scored = recons.clamp(0, 1)
    with torch.no_grad():
        p_rec = forward_features(clf, scored).logits.softmax(1)
        p_noise = forward_features(clf, noise).logits.softmax(1)
        raw_pred = forward_features(clf, recons).logits.argmax(1)
    noise_labels = p_noise.argmax(1)
    return {
        "conditioning_accuracy": (p_rec.argmax(1) == classes).double().mean().item(),
        "conditioning_accuracy_unclamped": (raw_pred == classes).double().mean().item(),
        "confidence_recon": p_rec.max(1).values.mean().item(),
        "confidence_noise": p_noise.max(1).values.mean().item(),
        "grad_norm_recon": classification_loss_grad_norm(clf, scored, classes, create_graph=False).item(),
        "grad_norm_noise": classification_loss_grad_norm(clf, noise, noise_labels, create_graph=False).item(),
        "input_sensitivity_recon": input_sensitivity(clf, scored).mean().item(),
        "input_sensitivity_noise": input_sensitivity(clf, noise).mean().item(),
    }


def cmd_evaluate(cfg: dict) -> dict:
    C.require(cfg, "generator")
    gen_dir = Path(cfg["generator"])
    gen, _, gmeta = art.load_generator(gen_dir)
    clf = art.load_classifier(gmeta["classifier"]["path"])
    if clf.manifest["weights_sha256"] != gmeta["classifier"]["sha256"]:
        raise IntegrityError("classifier checkpoint changed since the generator was trained")
    n = clf.spec.num_classes
    train = load_dataset(_dataset_spec(clf.manifest["dataset"]), cfg["cache_dir"])
    ssim_cfg = SSIMConfig(cfg["ssim.window"], cfg["ssim.sigma"], cfg["ssim.k1"], cfg["ssim.k2"])
    if cfg["match_scope"] not in ("class", "global"):
        raise ConfigError(f"match_scope: expected 'class' or 'global', got {cfg['match_scope']!r}")
    classes = list(range(n)) if cfg["classes"] in (None, "", "all") else _int_list(cfg["classes"], n)

    recons, labels = reconstruct_per_class(gen, classes, cfg["per_class"], cfg["seed"])
    matches = match_reconstructions(recons, labels, train, ssim_cfg, cfg["match_scope"], cfg["candidate_cap"], cfg["seed"])
    out = Path(cfg["out"] or f"runs/evaluation_{gen_dir.name}")
    portable = {**_portable(cfg), "generator_sha256": gmeta["weights_sha256"]}
    digest = art.config_digest(portable)
    extras = {
        "per_class_requested": cfg["per_class"],
        "match_scope": cfg["match_scope"],
        "candidate_cap": cfg["candidate_cap"],
        "train_size": len(train),
        **diagnostics(clf, recons, labels, cfg["seed"]),
    }
    report = build_report(matches, train.spec.name, clf.spec.arch, n, digest, out_dir=out, extras=extras)
    if not report.valid:
        log.warning("classes %s have no reconstructions; cell marked invalid", report.missing_classes)

    outputs = [out / "report.csv", out / "report.json", out / "table.csv"]
    rows = grid_rows(recons, matches, train, cfg["grid_per_class"], n)
    if rows:
        outputs.append(save_grid(rows, out / "grid.png"))
    art.atomic_torch(
        out / "recons.pt",
        {"pixels": recons, "classes": labels, "matched_train_index": torch.tensor([m.train_index for m in matches], dtype=torch.long)},
    )
    outputs.append(out / "recons.pt")
    manifest = art.RunManifest(
        "evaluate",
        portable,
        {"seed": cfg["seed"]},
        inputs={
            "generator": art.input_digest(gen_dir / art.GENERATOR_WEIGHTS),
            "classifier": {"path": gmeta["classifier"]["path"], "sha256": gmeta["classifier"]["sha256"]},
            "dataset": train.provenance,
        },
    )
    for p in outputs:
        manifest.add_output(p, out)
    manifest.write(out, summary={"mean_ssim": report.cell, "valid": report.valid})
    log.info("%s/%s mean SSIM %s", train.spec.name, clf.spec.arch, report.cell)
    return {"out": out, "report": report, "matches": matches}


def _int_list(raw, n):
    vals = [int(x) for x in str(raw).split(",") if x.strip()]
    if any(not 0 <= v < n for v in vals):
        raise ConfigError(f"classes: values must be in [0, {n})")
    return vals


# --- benchmark ---------------------------------------------------------------


def cell_seed(master_seed: int, dataset: str, arch: str) -> int:
    h = hashlib.sha256(f"{master_seed}:{dataset}:{arch}".encode()).hexdigest()
    return int(h[:8], 16) % (2**31)


def parse_cells(raw: str):
    cells = []
    for item in str(raw).split(","):
        item = item.strip()
        if not item:
            continue
        if ":" not in item:
            raise ConfigError(f"cells: expected dataset:arch, got {item!r}")
        d, a = item.split(":", 1)
        name = canonical_name(d)
        arch = next((x for x in ARCHS if x.lower() == a.strip().lower()), None)
        if arch is None:
            raise ConfigError(f"cells: unknown arch {a!r}")
        cells.append((name, arch))
    if not cells:
        raise ConfigError("cells: empty")
    return cells


def _run_cell(cfg, dataset, arch, root: Path):
    seed = cell_seed(cfg["master_seed"], dataset, arch)
    cell = root / "cells" / f"{dataset.lower()}_{arch.lower()}"
    py = [sys.executable, "-m", "inversion_audit"]
    common = ["--cache-dir", cfg["cache_dir"]] if cfg["cache_dir"] else []
    steps = [
        py + ["train-classifier", "--arch", arch.lower(), "--dataset", dataset, "--epochs", cfg["epochs"],
              "--subset-size", cfg["subset_size"], "--seed", seed, "--out", cell / "classifier"] + common,
        py + ["invert", "--classifier", cell / "classifier", "--steps", cfg["steps"], "--batch-size",
              cfg["batch_size"], "--seed", seed, "--out", cell / "inversion"],
        py + ["evaluate", "--generator", cell / "inversion", "--per-class", cfg["per_class"], "--candidate-cap",
              cfg["candidate_cap"], "--grid-per-class", cfg["grid_per_class"], "--match-scope", cfg["match_scope"],
              "--seed", seed, "--out", cell / "evaluation"] + common,
    ]
    for argv in steps:
        argv = [str(a) for a in argv]
        proc = subprocess.run(argv, capture_output=True, text=True)
        if proc.returncode != 0:
            return {"dataset": dataset, "arch": arch, "seed": seed, "status": "failed", "dir": str(cell),
                    "failed_command": argv[3], "exit_code": proc.returncode, "stderr": proc.stderr[-2000:]}
    report = art.read_json(cell / "evaluation" / "report.json")
    return {"dataset": dataset, "arch": arch, "seed": seed, "status": "ok", "dir": str(cell), "mean_ssim": report["cell"]}


def merged_grid(results, dataset, rows_per_class, path):
    """Column 1: training sample matched by the first architecture; then each arch's closest reconstruction."""
    ok = [r for r in results if r["dataset"] == dataset and r["status"] == "ok"]
    ok.sort(key=lambda r: ARCH_ORDER.index(r["arch"]) if r["arch"] in ARCH_ORDER else 99)
    if not ok:
        return None
    blobs = [torch.load(Path(r["dir"]) / "evaluation" / "recons.pt", weights_only=True) for r in ok]
    ref = ok[0]
    clf = art.read_json(Path(ref["dir"]) / "classifier" / art.CLASSIFIER_META)
    train = load_dataset(_dataset_spec(clf["dataset"]))
    rows = []
    for k in sorted(set(blobs[0]["classes"].tolist())):
        ref_idx = blobs[0]["matched_train_index"][blobs[0]["classes"] == k][:rows_per_class]
        for ti in ref_idx.tolist():
            target = train.pixels[ti][None]
            row = [train.pixels[ti]]
            for b in blobs:
                cand = b["pixels"][b["classes"] == k]
                if len(cand):
                    row.append(cand[int(ssim_matrix(target, cand).argmax())])
            rows.append(row)
    return save_grid(rows, path) if rows else None


def cmd_benchmark(cfg: dict) -> dict:
    cells = parse_cells(cfg["cells"])
    root = Path(cfg["out"] or f"runs/benchmark_s{cfg['master_seed']}")
    root.mkdir(parents=True, exist_ok=True)
    manifest = art.RunManifest(
        "benchmark", _portable(cfg), {"master_seed": cfg["master_seed"],
                                      **{f"{d}:{a}": cell_seed(cfg["master_seed"], d, a) for d, a in cells}}
    )
    with cf.ThreadPoolExecutor(max_workers=max(1, cfg["workers"])) as pool:
        results = list(pool.map(lambda c: _run_cell(cfg, c[0], c[1], root), cells))
    for r in results:
        if r["status"] != "ok":
            log.error("cell %s:%s failed in %s (exit %s)", r["dataset"], r["arch"], r["failed_command"], r["exit_code"])
        else:
            manifest.data["inputs"][f"{r['dataset']}:{r['arch']}"] = art.input_digest(Path(r["dir"]) / "evaluation" / art.MANIFEST)

    table = write_table([(r["dataset"], r["arch"], r.get("mean_ssim")) for r in results], root / "table.csv")
    manifest.add_output(table, root)
    for d in dict.fromkeys(d for d, _ in cells):
        try:
            grid = merged_grid(results, d, cfg["grid_per_class"], root / f"grid_{d.lower()}.png")
        except AuditError as exc:
            log.warning("grid for %s skipped: %s", d, exc)
            grid = None
        if grid:
            manifest.add_output(grid, root)
    failed = [r for r in results if r["status"] != "ok"]
    manifest.write(root, status="failed" if failed else "ok", cells=results)
    if failed:
        raise AuditError(f"{len(failed)} of {len(results)} cells failed; see {root / art.MANIFEST}")
    return {"out": root, "cells": results, "table": table}


# --- argument parsing -----------------------------------------------------------


def _flag(key):
    return "--" + key.replace("_", "-")


def build_parser():
    parser = argparse.ArgumentParser(prog="inversion-audit", description=__doc__)
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, defaults in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat 'key = value' config file; flags override it")
        for key, default in defaults.items():
            kwargs = {"dest": key, "default": None}
            if key == "resume":
                p.add_argument("--resume", dest="resume", action="store_const", const="true", default=None)
                continue
            if key == "arch":
                kwargs.update(type=str.lower, choices=[a.lower() for a in ARCHS])
            elif key == "dataset":
                kwargs.update(type=str.lower, choices=sorted(DATASET_ALIASES))
            flags = [_flag(key)] + ([f"--{key}"] if "_" in key else [])
            p.add_argument(*flags, metavar=key.upper().replace(".", "_"), help=f"default: {default}", **kwargs)
    v = sub.add_parser("verify", help="re-hash every manifest output under a directory")
    v.add_argument("path")
    return parser


def resolve_config(args) -> dict:
    defaults = COMMANDS[args.command]
    file_values = C.read_config_file(args.config) if args.config else {}
    flags = {k: v for k, v in vars(args).items() if k in defaults and v is not None}
    cfg = C.resolve(defaults, file_values, flags)
    if cfg.get("cache_dir") is None:
        cfg["cache_dir"] = None  # falls back to $INVERSION_AUDIT_CACHE inside data
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        if args.command == "verify":
            problems = art.verify_tree(args.path)
            for p in problems:
                print(p)
            if problems:
                return IntegrityError.exit_code
            print(f"ok: all manifest outputs under {args.path} verified")
            return 0
        cfg = resolve_config(args)
        {
            "train-classifier": cmd_train_classifier,
            "invert": cmd_invert,
            "evaluate": cmd_evaluate,
            "benchmark": cmd_benchmark,
        }[args.command](cfg)
    except AuditError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
