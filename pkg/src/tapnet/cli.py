"""``tapnet`` command line: synth, ingest, train, transfer, cv, eval, embed.

Every command reads one JSON config (``--config``), writes its outputs and a
``manifest.json`` into ``--out``, and exits 0 only when all outputs were
written. Failures print a JSON object to stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__, backend
from .architectures import build, resolve_spec
from .data import (
    LabelGrid,
    SynthSpec,
    apply_label_grid,
    file_digest,
    generate_synthetic,
    read_dataset,
    read_recording,
    segment_taps,
    write_dataset,
)
from .errors import ConfigError, TapnetError
from .evaluation import MetricsBundle, evaluate, export_embeddings
from .signals import Dataset, DefectClass, label_fraction_mask, reference_counts, stratified_folds
from .training import (
    TrainConfig,
    cross_validate,
    json_safe_spec,
    train_classifier,
    train_transfer,
    write_metrics_csv,
)

log = logging.getLogger("tapnet")

MANIFEST = "manifest.json"


def _write_text_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _write_json(path: Path, obj) -> None:
    _write_text_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


class RunManifest:
    """Config snapshot, seed, version, input digests, outputs and timings.

    Rewritten atomically at start (status "running") and on completion.
    """

    def __init__(self, out: Path, command: str, config: dict, seed: int | None):
        self.path = out / MANIFEST
        self.data = {
            "command": command,
            "config": config,
            "seed": seed,
            "version": __version__,
            "python": platform.python_version(),
            "torch": torch.__version__,
            "numpy": np.__version__,
            "inputs": {},
            "outputs": {},
            "timings": {},
            "status": "running",
        }
        self._t0 = time.perf_counter()

    def add_input(self, key: str, path) -> None:
        self.data["inputs"][key] = {"path": str(path), "sha256": file_digest(path)}

    def add_output(self, key: str, path) -> None:
        self.data["outputs"][key] = str(path)

    def timing(self, key: str, seconds: float) -> None:
        self.data["timings"][key] = seconds

    def write(self) -> None:
        _write_json(self.path, self.data)

    def finish(self) -> None:
        self.timing("total_s", time.perf_counter() - self._t0)
        self.data["status"] = "complete"
        self.write()


# ---------------------------------------------------------------------------
# helpers


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top-level JSON value must be an object")
    return cfg


def _resolve_path(base: Path | None, value) -> Path:
    p = Path(value)
    if not p.is_absolute() and base is not None:
        p = base / p
    if not p.exists():
        raise ConfigError(f"file not found: {p}")
    return p


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigError(f"config is missing required key {key!r}")
    return cfg[key]


def _check_keys(cfg: dict, allowed: set[str], where: str) -> None:
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} key(s): {sorted(unknown)}")


def _train_config(cfg: dict, args, transfer: bool, base: Path | None) -> TrainConfig:
    d = dict(cfg.get("training", {}))
    arch = d.get("architecture")
    if isinstance(arch, str) and arch not in ("plain", "residual", "dense"):
        d["architecture"] = json_safe_spec(_resolve_path(base, arch))
    if args.seed is not None:
        d["seed"] = args.seed
    d["deterministic"] = args.deterministic
    if args.threads is not None:
        d["threads"] = args.threads
    if transfer:
        d.setdefault("batch_size", 64)
    return TrainConfig.from_dict(d)


def _model_from_checkpoint(cfg: dict, base: Path | None, manifest: RunManifest):
    ckpt = _resolve_path(base, _require(cfg, "checkpoint"))
    manifest.add_input("checkpoint", ckpt)
    arch = cfg.get("architecture", "dense")
    if isinstance(arch, str) and arch not in ("plain", "residual", "dense"):
        arch = _resolve_path(base, arch)
    model = build(resolve_spec(arch), seed=0)
    backend.load_model_state(model, backend.load_checkpoint(ckpt))
    model.eval()
    return model


def _dataset(cfg: dict, key: str, base: Path | None, manifest: RunManifest) -> Dataset:
    path = _resolve_path(base, _require(cfg, key))
    manifest.add_input(key, path)
    return read_dataset(path)


def _write_bundle(out: Path, bundle: MetricsBundle, manifest: RunManifest, prefix: str = "") -> None:
    # wall-clock inference time goes to the manifest so metrics files stay reproducible
    if bundle.inference_ms is not None:
        manifest.timing(f"{prefix}inference_ms_per_signal", bundle.inference_ms)
    clean = MetricsBundle(bundle.confusion, bundle.fold_accuracies, None)
    files = {
        "metrics_json": (f"{prefix}metrics.json", clean.to_json() + "\n"),
        "confusion_csv": (f"{prefix}confusion.csv", clean.confusion_csv()),
        "confusion_normalized_csv": (f"{prefix}confusion_normalized.csv", clean.confusion_csv(normalized=True)),
    }
    for key, (name, text) in files.items():
        _write_text_atomic(out / name, text)
        manifest.add_output(prefix + key, out / name)


def _finish_training(out: Path, result, manifest: RunManifest, seconds: float) -> None:
    backend.save_checkpoint(out / "checkpoint.tapw", backend.model_state(result.model))
    manifest.add_output("checkpoint", out / "checkpoint.tapw")
    write_metrics_csv(out / "metrics.csv", result.log)
    manifest.add_output("metrics_csv", out / "metrics.csv")
    manifest.timing("train_s", seconds)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg, args, out, base):
    """Synthetic dataset: {"spec": {...SynthSpec...}, "counts": {...} | "total": N, "seed": s}."""
    _check_keys(cfg, {"spec", "counts", "total", "seed", "folds"}, "synth config")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    spec = SynthSpec.from_dict(cfg.get("spec", {}))
    if "counts" in cfg:
        counts = {DefectClass.parse(k) if isinstance(k, str) and not k.isdigit() else DefectClass(int(k)): int(v)
                  for k, v in cfg["counts"].items()}
    else:
        counts = reference_counts(cfg.get("total"))
    manifest = RunManifest(out, "synth", {**cfg, "spec": spec.to_dict()}, seed)
    manifest.write()
    t0 = time.perf_counter()
    ds = generate_synthetic(spec, counts, seed)
    if cfg.get("folds"):
        ds = stratified_folds(ds, int(cfg["folds"]), seed)
    write_dataset(out / "dataset.tapd", ds)
    manifest.add_output("dataset", out / "dataset.tapd")
    manifest.timing("generate_s", time.perf_counter() - t0)
    return manifest


def cmd_ingest(cfg, args, out, base):
    """Recordings + label grids -> dataset.

    {"domain": "GFRP", "recordings": [...], "grids": [...csv...], "mode": "all",
     "serpentine": false, "stride_mm": 2, "exclusion_margin": 0,
     "segmentation": {...segment_taps kwargs...}}
    """
    _check_keys(cfg, {"domain", "recordings", "grids", "mode", "serpentine", "stride_mm", "exclusion_margin", "segmentation"}, "ingest config")
    manifest = RunManifest(out, "ingest", cfg, args.seed)
    domain = _require(cfg, "domain")
    seg_kw = dict(cfg.get("segmentation", {}))
    signals = []
    for i, rec_path in enumerate(_require(cfg, "recordings")):
        p = _resolve_path(base, rec_path)
        manifest.add_input(f"recording{i}", p)
        seg = segment_taps(read_recording(p), domain=domain, **seg_kw)
        if seg.warning:
            log.warning("%s: %s", p, seg.warning)
        signals.extend(seg)
    grids = []
    for i, g in enumerate(cfg.get("grids", [])):
        p = _resolve_path(base, g)
        manifest.add_input(f"grid{i}", p)
        grid = LabelGrid.from_csv(p, float(cfg.get("stride_mm", 2.0)))
        grids.append(grid.with_boundary_margin(int(cfg.get("exclusion_margin", 0))))
    manifest.write()
    if grids:
        signals = apply_label_grid(signals, grids, cfg.get("mode", "all"), bool(cfg.get("serpentine", False)))
    ds = Dataset.from_signals(signals) if signals else Dataset.empty((domain,))
    write_dataset(out / "dataset.tapd", ds)
    manifest.add_output("dataset", out / "dataset.tapd")
    return manifest


def cmd_train(cfg, args, out, base):
    """{"dataset": path, "test_dataset": path?, "training": {...TrainConfig...}}"""
    _check_keys(cfg, {"dataset", "test_dataset", "training"}, "train config")
    tc = _train_config(cfg, args, transfer=False, base=base)
    manifest = RunManifest(out, "train", {**cfg, "training": tc.to_dict()}, tc.seed)
    ds = _dataset(cfg, "dataset", base, manifest)
    test = _dataset(cfg, "test_dataset", base, manifest) if "test_dataset" in cfg else ds
    manifest.write()
    t0 = time.perf_counter()
    result = train_classifier(ds, tc)
    _finish_training(out, result, manifest, time.perf_counter() - t0)
    _write_bundle(out, evaluate(result.model, test), manifest)
    return manifest


def cmd_transfer(cfg, args, out, base):
    """{"source": path, "target": path, "test_dataset": path?, "label_fraction": f, "training": {...}}

    The target's labels are masked down to ``label_fraction`` before
    training; evaluation uses the held-out test set, or the target's
    ground truth when none is given.
    """
    _check_keys(cfg, {"source", "target", "test_dataset", "label_fraction", "training"}, "transfer config")
    if "label_fraction" in cfg:
        cfg.setdefault("training", {})["label_fraction"] = cfg["label_fraction"]
    tc = _train_config(cfg, args, transfer=True, base=base)
    manifest = RunManifest(out, "transfer", {**cfg, "training": tc.to_dict()}, tc.seed)
    source = _dataset(cfg, "source", base, manifest)
    target = _dataset(cfg, "target", base, manifest)
    test = _dataset(cfg, "test_dataset", base, manifest) if "test_dataset" in cfg else None
    manifest.write()
    if target.labeled_mask.any():
        masked = label_fraction_mask(target, tc.label_fraction, tc.seed)
    elif test is None:
        raise ConfigError("target has no labels; give a labeled test_dataset to evaluate on")
    else:
        masked = target
    t0 = time.perf_counter()
    result = train_transfer(source, masked, tc)
    _finish_training(out, result, manifest, time.perf_counter() - t0)
    bundle = evaluate(result.model, test) if test is not None else evaluate(result.model, masked, use_ground_truth=True)
    _write_bundle(out, bundle, manifest)
    return manifest


def cmd_cv(cfg, args, out, base):
    """{"dataset": path, "source": path?, "folds": 3, "training": {...}}

    Without ``source``: classification CV over ``dataset``. With it: the
    transfer protocol, folds split the target ``dataset``.
    """
    _check_keys(cfg, {"dataset", "source", "folds", "label_fraction", "training"}, "cv config")
    if "label_fraction" in cfg:
        cfg.setdefault("training", {})["label_fraction"] = cfg["label_fraction"]
    transfer = "source" in cfg
    tc = _train_config(cfg, args, transfer=transfer, base=base)
    folds = int(cfg.get("folds", 3))
    manifest = RunManifest(out, "cv", {**cfg, "training": tc.to_dict()}, tc.seed)
    ds = _dataset(cfg, "dataset", base, manifest)
    source = _dataset(cfg, "source", base, manifest) if transfer else None
    manifest.write()
    if ds.folds is None or ds.num_folds != folds:
        ds = stratified_folds(ds, folds, tc.seed)

    def on_fold(fold, result, bundle):
        ckpt = out / f"fold{fold}.tapw"
        backend.save_checkpoint(ckpt, backend.model_state(result.model))
        write_metrics_csv(out / f"fold{fold}_metrics.csv", result.log)
        manifest.add_output(f"fold{fold}_checkpoint", ckpt)
        manifest.add_output(f"fold{fold}_metrics_csv", out / f"fold{fold}_metrics.csv")
        manifest.timing(f"fold{fold}_accuracy", bundle.accuracy)

    t0 = time.perf_counter()
    bundle = cross_validate(ds, tc, folds, source=source, on_fold=on_fold)
    manifest.timing("cv_s", time.perf_counter() - t0)
    _write_bundle(out, bundle, manifest)
    return manifest


def cmd_eval(cfg, args, out, base):
    """{"checkpoint": path, "dataset": path, "architecture": "dense" | spec path}"""
    _check_keys(cfg, {"checkpoint", "dataset", "architecture"}, "eval config")
    manifest = RunManifest(out, "eval", cfg, args.seed)
    model = _model_from_checkpoint(cfg, base, manifest)
    ds = _dataset(cfg, "dataset", base, manifest)
    manifest.write()
    _write_bundle(out, evaluate(model, ds, use_ground_truth=True), manifest)
    return manifest


def cmd_embed(cfg, args, out, base):
    """{"checkpoint": path, "dataset": path, "architecture": ..., "layer": "gap"}"""
    _check_keys(cfg, {"checkpoint", "dataset", "architecture", "layer"}, "embed config")
    manifest = RunManifest(out, "embed", cfg, args.seed)
    model = _model_from_checkpoint(cfg, base, manifest)
    ds = _dataset(cfg, "dataset", base, manifest)
    manifest.write()
    emb = export_embeddings(model, ds, cfg.get("layer", "gap"))
    _write_text_atomic(out / "embeddings.csv", emb.to_csv())
    manifest.add_output("embeddings_csv", out / "embeddings.csv")
    return manifest


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic dataset"),
    "ingest": (cmd_ingest, "segment recordings and apply label grids"),
    "train": (cmd_train, "train a classifier"),
    "transfer": (cmd_transfer, "domain-transfer training (MMD + pseudo labels)"),
    "cv": (cmd_cv, "F-fold cross-validation"),
    "eval": (cmd_eval, "evaluate a checkpoint on a dataset"),
    "embed": (cmd_embed, "export feature embeddings as CSV"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tapnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory (created if missing)")
        p.add_argument("--seed", type=int, help="overrides the seed in the config")
        p.add_argument(
            "--deterministic",
            action=argparse.BooleanOptionalAction,
            default=True,
            help="bit-reproducible kernels (default: on)",
        )
        p.add_argument("--threads", type=int, help="intra-op thread count")
    return parser


def _error(command: str | None, exc: BaseException, code: int) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "command": command, "exit_code": code}
    offset = getattr(exc, "offset", None)
    if offset is not None:
        payload["offset"] = offset
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("TAPNET_LOG", "WARNING").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            raise ConfigError(f"config file not found: {cfg_path}")
        cfg = _load_config(cfg_path)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        backend.configure_determinism(args.threads if args.threads is not None else 1, args.deterministic)
        manifest = COMMANDS[args.command][0](cfg, args, out, cfg_path.parent)
        manifest.finish()
    except (TapnetError, ValueError, KeyError, OSError) as exc:
        return _error(args.command, exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
