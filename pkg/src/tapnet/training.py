"""Momentum SGD, cosine learning rate, and the classification / transfer loops.

Mini-batches are drawn uniformly with replacement. The indices for
iteration ``t`` come from a generator keyed on ``(seed, stream, t)``, so
the batch stream does not depend on how many iterations ran before: a run
resumed from a checkpoint sees exactly the batches an uninterrupted run
would have seen.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

from . import backend
from .architectures import TapNet, build, resolve_spec
from .errors import BatchSizeError, ConfigError, LabelingError, TrainingError
from .losses import KernelSpec, LossReport, LossWeights, combined_loss
from .signals import UNLABELED, Dataset, label_fraction_mask

log = logging.getLogger(__name__)

SOURCE_STREAM = 1
TARGET_STREAM = 2
METRIC_FIELDS = ("t", "l_c", "l_da", "l_pll", "l_1", "total", "alpha", "lr")


@dataclass
class TrainConfig:
    iterations: int = 50_000
    batch_size: int = 32
    lr0: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    beta: float = 1.0
    lam: float = 1e-4
    alpha_mode: str = "segmented"
    sigma: float = 1.0
    feature_layer: str = "gap"
    architecture: object = "dense"
    bn_mode: str = "mixed"
    label_fraction: float = 0.0
    deterministic: bool = True
    threads: int | None = 1

    def __post_init__(self):
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.lr0 < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need lr0 >= 0 and momentum in [0, 1)")
        if self.bn_mode not in ("mixed", "per_domain"):
            raise ConfigError("bn_mode must be 'mixed' or 'per_domain'")
        try:
            self.loss_weights
            self.kernel
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def for_transfer(cls, **kw) -> "TrainConfig":
        kw.setdefault("batch_size", 64)
        return cls(**kw)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.beta, self.lam, self.alpha_mode)

    @property
    def kernel(self) -> KernelSpec:
        return KernelSpec(self.sigma)

    def to_dict(self) -> dict:
        d = asdict(self)
        arch = self.architecture
        if not isinstance(arch, (str, dict)):
            d["architecture"] = json_safe_spec(arch)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config key(s): {sorted(unknown)}")
        return cls(**d)


def json_safe_spec(spec) -> dict:
    return json.loads(resolve_spec(spec).to_json())


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    velocity: "OrderedDict[str, torch.Tensor]"
    momentum: float = 0.9
    lr: float = 0.0

    @classmethod
    def zeros_like(cls, params: Mapping[str, torch.Tensor], momentum: float = 0.9) -> "OptimizerState":
        return cls(OrderedDict((k, torch.zeros_like(p)) for k, p in params.items()), momentum)


def sgd_momentum_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor], state: OptimizerState, lr: float):
    """v <- momentum * v + g;  theta <- theta - lr * v  (in place)."""
    state.lr = lr
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            if not torch.isfinite(g).all():
                bad = int((~torch.isfinite(g)).sum())
                raise TrainingError(f"non-finite gradient in {name!r} ({bad} entries); aborting")
            v = state.velocity[name]
            if v.shape != p.shape:
                raise TrainingError(f"velocity shape {tuple(v.shape)} != parameter shape {tuple(p.shape)} for {name!r}")
            v.mul_(state.momentum).add_(g)
            p.sub_(lr * v)
    return params, state


def cosine_lr(t: float, total: float, lr0: float = 0.01) -> float:
    """Cosine annealing from ``lr0`` at t=0 to 0 at t=total."""
    if total <= 0:
        raise ValueError("total must be positive")
    if t >= total:
        return 0.0
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * t / total))


# ---------------------------------------------------------------------------
# loops


@dataclass
class TrainResult:
    model: TapNet
    log: list[dict]
    optimizer: OptimizerState
    iteration: int
    config: TrainConfig


def batch_indices(seed: int, stream: int, t: int, n: int, size: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(stream), int(t)]).integers(0, n, size=size)


def _tensor(samples: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.array(samples, dtype=np.float32))


def save_train_state(path, model: torch.nn.Module, opt: OptimizerState, iteration: int) -> None:
    records = OrderedDict(backend.model_state(model))
    for k, v in opt.velocity.items():
        records[f"optim.velocity.{k}"] = v
    records["optim.iteration"] = np.array(float(iteration), dtype=np.float32)
    backend.save_checkpoint(path, records)


def load_train_state(path, model: torch.nn.Module, momentum: float) -> tuple[OptimizerState, int]:
    records = backend.load_checkpoint(path)
    backend.load_model_state(model, records)
    params = OrderedDict(model.named_parameters())
    opt = OptimizerState.zeros_like(params, momentum)
    for k in params:
        key = f"optim.velocity.{k}"
        if key in records:
            opt.velocity[k].copy_(torch.from_numpy(np.array(records[key])))
    iteration = int(records["optim.iteration"]) if "optim.iteration" in records else 0
    return opt, iteration


def _fit(
    source: Dataset,
    target: Dataset | None,
    cfg: TrainConfig,
    model: TapNet | None = None,
    resume=None,
    stop_at: int | None = None,
    checkpoint_path=None,
    checkpoint_every: int | None = None,
    on_iteration: Callable[[int, LossReport], None] | None = None,
) -> TrainResult:
    backend.configure_determinism(cfg.threads, cfg.deterministic)
    if len(source) == 0:
        raise ConfigError("empty training set")
    if target is not None and len(target) == 0:
        raise ConfigError("empty target set")
    if model is None:
        model = build(cfg.architecture, seed=cfg.seed)
    if cfg.feature_layer not in model.layer_names():
        raise ConfigError(f"unknown feature layer {cfg.feature_layer!r}")
    params = OrderedDict(model.named_parameters())
    opt = OptimizerState.zeros_like(params, cfg.momentum)
    start = 0
    if resume is not None:
        opt, start = load_train_state(resume, model, cfg.momentum)
        params = OrderedDict(model.named_parameters())
    T = cfg.iterations
    stop = T if stop_at is None else min(stop_at, T)
    lw, kernel = cfg.loss_weights, cfg.kernel
    B = cfg.batch_size
    xs_all = _tensor(source.samples)
    ys_all = torch.from_numpy(source.labels.astype(np.int64))
    if target is not None:
        if B < 2 and lw.beta > 0:
            raise BatchSizeError("MMD needs target batches of at least 2")
        xt_all = _tensor(target.samples)
        yt_all = torch.from_numpy(target.labels.astype(np.int64))
        has_target_labels = bool(np.any(target.labels != UNLABELED))
    rows: list[dict] = []
    model.train()
    for t in range(start, stop):
        alpha = lw.alpha(t, T)
        si = torch.from_numpy(batch_indices(cfg.seed, SOURCE_STREAM, t, len(source), B))
        xs, ys = xs_all[si].unsqueeze(1), ys_all[si]
        use_target = target is not None and (lw.beta > 0 or alpha > 0 or has_target_labels)
        if use_target:
            ti = torch.from_numpy(batch_indices(cfg.seed, TARGET_STREAM, t, len(target), B))
            xt, yt = xt_all[ti].unsqueeze(1), yt_all[ti]
            if cfg.bn_mode == "mixed":
                logits, feats = model.forward_features(torch.cat([xs, xt]), cfg.feature_layer)
            else:
                ls, fs = model.forward_features(xs, cfg.feature_layer)
                lt, ft = model.forward_features(xt, cfg.feature_layer)
                logits, feats = torch.cat([ls, lt]), torch.cat([fs, ft])
            probs = backend.softmax(logits[:, :, 0], dim=1)
            ps, pt = probs[:B], probs[B:]
            fs, ft = feats[:B], feats[B:]
            keep = yt != UNLABELED
            if bool(keep.any()):
                class_probs = torch.cat([ps, pt[keep]])
                class_labels = torch.cat([ys, yt[keep]])
            else:
                class_probs, class_labels = ps, ys
            total, report = combined_loss(class_probs, class_labels, fs, ft, pt, params, lw, t, T, kernel)
        else:
            logits, feats = model.forward_features(xs, cfg.feature_layer)
            ps = backend.softmax(logits[:, :, 0], dim=1)
            total, report = combined_loss(ps, ys, None, None, None, params, lw, t, T, kernel)
        if not math.isfinite(report.total):
            raise TrainingError(f"non-finite loss at iteration {t}: {report}")
        grads = torch.autograd.grad(total, list(params.values()), allow_unused=True)
        grad_map = {k: g for k, g in zip(params, grads) if g is not None}
        lr = cosine_lr(t, T, cfg.lr0)
        sgd_momentum_step(params, grad_map, opt, lr)
        rows.append(
            dict(t=t, l_c=report.l_c, l_da=report.l_da, l_pll=report.l_pll, l_1=report.l_1,
                 total=report.total, alpha=report.alpha, lr=lr)
        )
        if on_iteration is not None:
            on_iteration(t, report)
        done = t + 1
        if checkpoint_path is not None and checkpoint_every and done % checkpoint_every == 0 and done < stop:
            save_train_state(checkpoint_path, model, opt, done)
    end = max(stop, start)
    if checkpoint_path is not None:
        save_train_state(checkpoint_path, model, opt, end)
    model.eval()
    return TrainResult(model, rows, opt, end, cfg)


def train_classifier(ds: Dataset, cfg: TrainConfig, **kw) -> TrainResult:
    """Supervised training on labeled signals: L_c + lambda * L_1."""
    if len(ds) == 0:
        raise ConfigError("empty training set")
    if not ds.is_labeled:
        raise LabelingError("train_classifier needs every signal labeled")
    return _fit(ds, None, replace(cfg, beta=0.0, alpha_mode="off"), **kw)


def train_transfer(source: Dataset, target: Dataset, cfg: TrainConfig, **kw) -> TrainResult:
    """Domain-transfer training with paired source/target batches.

    L_c covers source rows plus any labeled target rows, L_da is the MMD
    between the two feature batches and L_pll applies to all target rows.
    """
    if not source.is_labeled:
        raise LabelingError("source domain must be fully labeled")
    if cfg.batch_size < 2 and cfg.beta > 0:
        raise BatchSizeError("MMD needs batches of at least 2 per side")
    return _fit(source, target, cfg, **kw)


def train_no_transfer(source: Dataset, target: Dataset, cfg: TrainConfig, **kw) -> TrainResult:
    """Baseline: supervised training on source plus whatever target labels are visible."""
    labeled = target.subset(np.flatnonzero(target.labeled_mask))
    pool = Dataset.concat([source, labeled]) if len(labeled) else source
    return train_classifier(pool, cfg, **kw)


def write_metrics_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k != "t" else int(r[k])) for k in METRIC_FIELDS})
    tmp.replace(path)


# ---------------------------------------------------------------------------
# cross-validation


def cross_validate(
    ds: Dataset,
    cfg: TrainConfig,
    num_folds: int = 3,
    source: Dataset | None = None,
    on_fold: Callable | None = None,
):
    """Train on F-1 folds, evaluate on the held-out one, for every fold.

    With ``source`` given this is the transfer protocol: all source data is
    used every time and the folds split the target ``ds``; the target
    training folds keep ``cfg.label_fraction`` of their labels.
    """
    from .evaluation import aggregate_folds, evaluate

    if ds.folds is None:
        raise ConfigError("dataset has no fold assignment; run stratified_folds first")
    if ds.num_folds != num_folds:
        raise ConfigError(f"dataset has {ds.num_folds} folds, expected {num_folds}")
    bundles = []
    for fold in range(num_folds):
        train_idx = np.flatnonzero(ds.folds != fold)
        test = ds.subset(ds.fold_indices(fold))
        train = ds.subset(train_idx)
        if source is None:
            result = train_classifier(train, cfg)
        else:
            masked = label_fraction_mask(train, cfg.label_fraction, cfg.seed + fold)
            result = train_transfer(source, masked, cfg)
        bundle = evaluate(result.model, test, use_ground_truth=source is not None)
        bundles.append(bundle)
        if on_fold is not None:
            on_fold(fold, result, bundle)
        log.info("fold %d: accuracy %.2f%%", fold, bundle.accuracy)
    return aggregate_folds(bundles)
