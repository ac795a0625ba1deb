"""Mini-batch SGD training of L-ViT variants and patient-level fold planning."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .classes import CLASS_NAMES
from .lvit import AblationConfig, LVitParams, init_params, lvit_forward, predict_proba
from .metrics import MetricsReport, confusion, macro_metrics
from .numerics import GradTape, Tensor, backward

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 30
    learning_rate: float = 0.05
    seed: int = 0
    ablation: str = "all"
    linear_attention: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.ablation not in AblationConfig.PRESETS:
            raise ValueError(f"ablation must be one of {AblationConfig.PRESETS}")

    def model_config(self) -> AblationConfig:
        return AblationConfig.preset(self.ablation, self.linear_attention)


def cross_entropy(probs, label: int, floor: float = PROB_FLOOR) -> float:
    """``-ln(probs[label])`` with the probability floored at ``floor``."""
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise ValueError(f"label {label} outside [0, {p.shape[-1]})")
    return float(-np.log(max(p[label], floor)))


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], lr: float) -> Sequence[Tensor]:
    """In-place ``p <- p - lr * g`` for each parameter; returns ``params``."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {p.name} {p.shape}")
    for p, g in zip(params, grads):
        p.data -= lr * np.asarray(g, dtype=np.float64)
    return params


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffle order for one epoch, regenerated from ``(seed, epoch)``."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_loss_and_grads(params: LVitParams, config: AblationConfig, tiles: np.ndarray,
                         labels: np.ndarray) -> tuple[float, list[np.ndarray]]:
    plist = params.parameters()
    with GradTape(plist) as tape:
        probs = lvit_forward(tiles, params, config)
        loss = nx.cross_entropy(probs, labels, floor=PROB_FLOOR)
    return loss.item(), backward(tape, loss)


@dataclass
class TrainResult:
    params: LVitParams
    config: AblationConfig
    loss_curve: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)


def _check_dataset(tiles, labels, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(tiles, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("training set is empty")
    if x.ndim != 4 or len(x) != len(y):
        raise ValueError(f"expected (N, k, k, 3) tiles with N labels, got {x.shape} and {y.shape}")
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return x, y


def train_epochs(tiles, labels, cfg: TrainConfig = TrainConfig(), val=None,
                 params: LVitParams | None = None,
                 on_epoch: Callable[[int, float, float], None] | None = None) -> TrainResult:
    """Train from a seeded initialisation (or ``params``) for ``cfg.epochs`` epochs.

    ``val`` is an optional ``(tiles, labels)`` pair scored after every epoch;
    without it the logged validation accuracy is NaN.  Each epoch emits one
    ``epoch,mean_loss,val_accuracy`` log line.
    """
    config = cfg.model_config()
    x, y = _check_dataset(tiles, labels, len(CLASS_NAMES))
    if params is None:
        params = init_params(config, seed=cfg.seed)
    plist = params.parameters()
    result = TrainResult(params, config)
    for epoch in range(cfg.epochs):
        order = epoch_permutation(cfg.seed, epoch, len(x))
        total = 0.0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = batch_loss_and_grads(params, config, x[idx], y[idx])
            sgd_step(plist, grads, cfg.learning_rate)
            total += loss * len(idx)
        mean_loss = total / len(x)
        if not math.isfinite(mean_loss):
            raise FloatingPointError(f"loss diverged at epoch {epoch + 1}")
        acc = float("nan")
        if val is not None:
            acc = accuracy(params, config, *val)
        result.loss_curve.append(mean_loss)
        result.val_accuracy.append(acc)
        log.info("%d,%.6f,%.6f", epoch + 1, mean_loss, acc)
        if on_epoch is not None:
            on_epoch(epoch + 1, mean_loss, acc)
    return result


def accuracy(params: LVitParams, config: AblationConfig, tiles, labels) -> float:
    pred = predict_proba(tiles, params, config).argmax(axis=1)
    return float((pred == np.asarray(labels)).mean())


def evaluate(params: LVitParams, config: AblationConfig, tiles, labels) -> MetricsReport:
    pred = predict_proba(tiles, params, config).argmax(axis=1)
    return macro_metrics(confusion(labels, pred))


# -- folds --------------------------------------------------------------------------


@dataclass
class FoldPlan:
    """Fold index per patient, and the derived fold of every ROI."""

    k: int
    assignment: dict[str, int]
    roi_patients: list[str]

    @property
    def roi_folds(self) -> np.ndarray:
        return np.array([self.assignment[p] for p in self.roi_patients], dtype=np.int64)

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.roi_folds == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.roi_folds != fold)


def kfold_split(patient_ids: Sequence[str], k: int = 3, seed: int = 0) -> FoldPlan:
    """Deal shuffled patients round-robin into ``k`` folds; ROIs follow their patient."""
    ids = [str(p) for p in patient_ids]
    if any(p == "" for p in ids):
        raise ValueError("every ROI needs a patient id")
    patients = sorted(set(ids))
    if k < 1 or k > len(patients):
        raise ValueError(f"cannot split {len(patients)} patients into {k} folds")
    order = np.random.default_rng(seed).permutation(len(patients))
    assignment = {patients[j]: pos % k for pos, j in enumerate(order)}
    return FoldPlan(k, assignment, ids)


# -- cross-validation and ablation ------------------------------------------------


@dataclass
class FoldResult:
    fold: int
    ablation: str
    train: TrainResult
    report: MetricsReport


def cross_validate(dataset, cfg: TrainConfig, k: int = 3, split_seed: int = 0,
                   folds: Sequence[int] | None = None) -> list[FoldResult]:
    """Train and score one model per held-out fold of a synthetic dataset."""
    plan = kfold_split(dataset.patient_ids, k, split_seed)
    results = []
    for fold in (range(k) if folds is None else folds):
        xtr, ytr = dataset.tiles_and_labels(plan.train_indices(fold))
        xte, yte = dataset.tiles_and_labels(plan.test_indices(fold))
        tr = train_epochs(xtr, ytr, cfg)
        results.append(FoldResult(fold, cfg.ablation, tr, evaluate(tr.params, tr.config, xte, yte)))
    return results


def run_ablation(dataset, cfg: TrainConfig, presets: Sequence[str] = AblationConfig.PRESETS,
                 fold: int = 0, k: int = 3, split_seed: int = 0) -> list[FoldResult]:
    """Train every preset on the same patient-level split and score the held-out fold."""
    plan = kfold_split(dataset.patient_ids, k, split_seed)
    xtr, ytr = dataset.tiles_and_labels(plan.train_indices(fold))
    xte, yte = dataset.tiles_and_labels(plan.test_indices(fold))
    out = []
    for name in presets:
        run_cfg = TrainConfig(cfg.batch_size, cfg.epochs, cfg.learning_rate, cfg.seed, name,
                              cfg.linear_attention)
        tr = train_epochs(xtr, ytr, run_cfg)
        out.append(FoldResult(fold, name, tr, evaluate(tr.params, tr.config, xte, yte)))
    return out


def comparison_table(results: Sequence[FoldResult]) -> str:
    """CSV rows ``config,fold,final_loss,<six macro metrics>``."""
    from .metrics import METRIC_NAMES
    lines = ["config,fold,final_loss," + ",".join(METRIC_NAMES)]
    for r in results:
        vals = ",".join(f"{r.report.macro[m]:.4f}" for m in METRIC_NAMES)
        lines.append(f"{r.ablation},{r.fold},{r.train.loss_curve[-1]:.6f},{vals}")
    return "\n".join(lines) + "\n"
