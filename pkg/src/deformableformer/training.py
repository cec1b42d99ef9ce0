"""Optimizers, the per-fold training loop, evaluation and cross-validation reports."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .data import (AVAILABLE, CLASS_INDEX, DatasetManifest, augment, channel_stats,
                   load_images, normalize)
from .model import Model, ModelConfig, build_model, save_checkpoint
from .tensor import no_grad, softmax_cross_entropy

log = logging.getLogger(__name__)

OPTIMIZERS = ("adamw", "sgd-momentum")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 5
    epochs: int = 50
    learning_rate: float = 1e-3
    optimizer: str = "adamw"
    weight_decay: float = 0.0
    seed: int = 0
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    # "fold": per-channel stats of each training split; or fixed {"mean": [...], "std": [...]}
    normalization: str | dict = "fold"

    def validate(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        n = self.normalization
        if n != "fold" and not (isinstance(n, dict) and set(n) == {"mean", "std"}
                                and min(n["std"]) > 0):
            raise ValueError('normalization must be "fold" or {"mean": [...], "std": [...]} '
                             "with positive std")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate <= 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and learning_rate > 0 required")
        return self

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


# ---------------------------------------------------------------------------
# optimizers


class Optimizer:
    def __init__(self, named_params, config: TrainConfig):
        self.named_params = list(named_params)
        self.config = config
        self.t = 0

    def step(self):
        for name, p in self.named_params:
            if p.grad is None or p.grad.shape != p.value.shape:
                raise TrainingError(f"missing gradient for {name}")
        self.t += 1
        for i, (name, p) in enumerate(self.named_params):
            new = self._update(i, p)
            if not np.all(np.isfinite(new)):
                raise TrainingError(f"non-finite update for {name} at step {self.t}")
            p.value[...] = new


class SGDMomentum(Optimizer):
    """v <- mu v + g ; p <- p - lr v (weight decay folded into g)."""

    def __init__(self, named_params, config):
        super().__init__(named_params, config)
        self.velocity = [np.zeros_like(p.value) for _, p in self.named_params]

    def _update(self, i, p):
        c = self.config
        g = p.grad + c.weight_decay * p.value if c.weight_decay else p.grad
        v = self.velocity[i]
        v *= c.momentum
        v += g
        return p.value - c.learning_rate * v


class AdamW(Optimizer):
    """Bias-corrected Adam moments with decoupled weight decay."""

    def __init__(self, named_params, config):
        super().__init__(named_params, config)
        self.m = [np.zeros_like(p.value) for _, p in self.named_params]
        self.v = [np.zeros_like(p.value) for _, p in self.named_params]

    def _update(self, i, p):
        c = self.config
        b1, b2 = c.betas
        m, v = self.m[i], self.v[i]
        m *= b1
        m += (1 - b1) * p.grad
        v *= b2
        v += (1 - b2) * p.grad * p.grad
        m_hat = m / (1 - b1 ** self.t)
        v_hat = v / (1 - b2 ** self.t)
        value = p.value * (1 - c.learning_rate * c.weight_decay) if c.weight_decay else p.value
        return value - c.learning_rate * m_hat / (np.sqrt(v_hat) + c.eps)


def make_optimizer(model, config: TrainConfig) -> Optimizer:
    cls = AdamW if config.optimizer == "adamw" else SGDMomentum
    return cls(model.named_parameters(), config)


def optimizer_step(optimizer: Optimizer):
    optimizer.step()


# ---------------------------------------------------------------------------
# training


def label_indices(records):
    return np.array([CLASS_INDEX[r.label] for r in records])


def expand_training_set(images, records):
    """Augmented images and their class indices, record order then variant order."""
    xs, ys = [], []
    for img, r in zip(images, records):
        variants = augment(img, r.label)
        xs.extend(variants)
        ys.extend([CLASS_INDEX[r.label]] * len(variants))
    return np.stack(xs), np.array(ys)


@dataclass
class FoldHistory:
    epoch_loss: list[float] = field(default_factory=list)
    steps: int = 0


def train_on_arrays(model: Model, x, y, config: TrainConfig) -> FoldHistory:
    """Minibatch training on prepared arrays; shuffling is keyed by (seed, epoch)."""
    config.validate()
    opt = make_optimizer(model, config)
    hist = FoldHistory()
    n = len(x)
    if n == 0:
        raise TrainingError("no training samples")
    x = x.astype(model.dtype, copy=False)
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            model.zero_grad()
            logits = model.forward(x[idx])
            loss, grad = softmax_cross_entropy(logits, y[idx])
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {hist.steps}")
            model.backward(grad)
            opt.step()
            hist.steps += 1
            total += loss * len(idx)
        hist.epoch_loss.append(total / n)
        log.info("epoch %d/%d mean loss %.5f", epoch + 1, config.epochs, total / n)
    return hist


def _input_hw(model):
    # images are resized to the model's configured input, not the files' size
    return (model.config.input_size,) * 2


def train_fold(model: Model, manifest: DatasetManifest, train_records, config: TrainConfig,
               normalization=None):
    """Train on the augmented records. Returns (history, normalization used)."""
    if not train_records:
        raise TrainingError("train records must be non-empty")
    images = load_images(manifest, train_records, _input_hw(model))
    if normalization is None and config.normalization != "fold":
        normalization = dict(config.normalization)
    if normalization is None:
        mean, std = channel_stats(images)
        normalization = {"mean": mean, "std": std}
    images = normalize(images, normalization["mean"], normalization["std"])
    x, y = expand_training_set(images, train_records)
    return train_on_arrays(model, x, y, config), normalization


def predict(model: Model, x, batch_size=32):
    """Argmax class per image; equal logits resolve to Unavailable (index 0)."""
    out = []
    with no_grad():
        for start in range(0, len(x), batch_size):
            logits = model.forward(x[start:start + batch_size].astype(model.dtype, copy=False))
            out.append(np.argmax(logits, axis=1))
    return np.concatenate(out) if out else np.zeros(0, int)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class ConfusionMatrix:
    """Counts with Available as the positive class."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other):
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_predictions(cls, truth, predicted):
        pos = CLASS_INDEX[AVAILABLE]
        t = np.asarray(truth) == pos
        p = np.asarray(predicted) == pos
        return cls(int(np.sum(t & p)), int(np.sum(~t & p)), int(np.sum(t & ~p)),
                   int(np.sum(~t & ~p)))

    def to_dict(self):
        return asdict(self)


def evaluate_arrays(model, x, labels) -> ConfusionMatrix:
    return ConfusionMatrix.from_predictions(labels, predict(model, x))


def evaluate(model: Model, manifest: DatasetManifest, test_records, normalization=None):
    """Confusion matrix over un-augmented test images, one prediction each."""
    if not test_records:
        raise ValueError("test records must be non-empty")
    x = load_images(manifest, test_records, _input_hw(model))
    if normalization is not None:
        x = normalize(x, normalization["mean"], normalization["std"])
    return evaluate_arrays(model, x, label_indices(test_records))


RATES = ("accuracy", "precision", "recall", "specificity")


def _ratio(num, den):
    return None if den == 0 else Fraction(100 * num, den)


def round_half_up(value: Fraction, places=2) -> str:
    scale = 10 ** places
    n = math.floor(value * scale + Fraction(1, 2))
    return f"{n // scale}.{n % scale:0{places}d}"


@dataclass
class Metrics:
    """Rates in percent; an undefined rate (zero denominator) is NaN, never 0."""

    accuracy: float
    precision: float
    recall: float
    specificity: float
    exact: dict = field(repr=False, default_factory=dict)

    def display(self):
        return {k: ("nan" if self.exact[k] is None else round_half_up(self.exact[k]))
                for k in RATES}

    def to_dict(self):
        return {k: (None if self.exact[k] is None else float(self.exact[k])) for k in RATES}


def compute_metrics(cm: ConfusionMatrix) -> Metrics:
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    exact = {
        "accuracy": _ratio(cm.tp + cm.tn, cm.total),
        "precision": _ratio(cm.tp, cm.tp + cm.fp),
        "recall": _ratio(cm.tp, cm.tp + cm.fn),
        "specificity": _ratio(cm.tn, cm.fp + cm.tn),
    }
    floats = {k: (math.nan if v is None else float(v)) for k, v in exact.items()}
    return Metrics(**floats, exact=exact)


@dataclass
class MetricsReport:
    method: str
    aggregate: ConfusionMatrix
    folds: list[ConfusionMatrix]
    metrics: Metrics
    status: str = "ok"
    fold_details: list[dict] = field(default_factory=list)

    def to_dict(self):
        return {"method": self.method, "status": self.status,
                "aggregate": self.aggregate.to_dict(),
                "rates": self.metrics.to_dict(), "display": self.metrics.display(),
                "folds": self.fold_details}


def report_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", *RATES, "tp", "fn", "fp", "tn"])
    for r in reports:
        d = r.metrics.display()
        a = r.aggregate
        w.writerow([r.method, *(d[k] for k in RATES), a.tp, a.fn, a.fp, a.tn])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# cross-validation


def write_history(path, history: FoldHistory):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(history.epoch_loss, 1):
            w.writerow([i, repr(float(v))])


def run_fold(manifest: DatasetManifest, fold: int, model_config: ModelConfig,
             train_config: TrainConfig, out_dir=None):
    """Train a fresh model on every fold but ``fold``, then test on ``fold``."""
    model = build_model(model_config, train_config.seed)
    train_recs, test_recs = manifest.excluding(fold), manifest.fold(fold)
    history, norm = train_fold(model, manifest, train_recs, train_config)
    cm = evaluate(model, manifest, test_recs, norm)
    detail = {"fold": fold, "n_train": len(train_recs), "n_test": len(test_recs),
              "confusion": cm.to_dict(), "normalization": norm,
              "final_loss": history.epoch_loss[-1] if history.epoch_loss else None,
              "test_ids": [r.id for r in test_recs]}
    if out_dir is not None:
        out = Path(out_dir)
        write_history(out / f"fold_{fold}_history.csv", history)
        save_checkpoint(model, out / f"fold_{fold}_checkpoint",
                        extra={"normalization": norm, "fold": fold})
    return cm, detail


def _run_fold_job(args):
    return run_fold(*args)


def cross_validate(manifest: DatasetManifest, model_config: ModelConfig,
                   train_config: TrainConfig, out_dir=None, jobs=1, method=None) -> MetricsReport:
    """One model per fold, confusion matrices summed into the aggregate.

    When a fold fails the report is marked ``failed`` and the completed folds
    are kept.
    """
    train_config.validate()
    method = method or model_config.mixer_kind
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    args = [(manifest, k, model_config, train_config, out_dir) for k in range(manifest.k_folds)]
    results, status = [], "ok"
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_fold_job, a) for a in args]
            for k, fut in enumerate(futures):
                try:
                    results.append(fut.result())
                except Exception as e:  # noqa: BLE001 - keep partial results
                    log.error("fold %d failed: %s", k, e)
                    status = "failed"
    else:
        for k, a in enumerate(args):
            log.info("%s: fold %d/%d", method, k + 1, manifest.k_folds)
            try:
                results.append(run_fold(*a))
            except Exception as e:  # noqa: BLE001 - keep partial results
                log.error("fold %d failed: %s", k, e)
                status = "failed"
                break
    folds = [cm for cm, _ in results]
    aggregate = sum(folds, ConfusionMatrix())
    metrics = (compute_metrics(aggregate) if aggregate.total
               else Metrics(*(math.nan,) * 4, exact=dict.fromkeys(RATES)))
    report = MetricsReport(method, aggregate, folds, metrics, status, [d for _, d in results])
    if out_dir is not None:
        write_reports(out_dir, [report], model_config, train_config)
    return report


def write_reports(out_dir, reports, model_config=None, train_config=None):
    out = Path(out_dir)
    doc = {"reports": [r.to_dict() for r in reports],
           "status": "failed" if any(r.status != "ok" for r in reports) else "ok"}
    if model_config is not None:
        doc["model_config"] = model_config.to_dict()
    if train_config is not None:
        doc["train_config"] = train_config.to_dict()
    (out / "report.json").write_text(json.dumps(doc, indent=2) + "\n")
    (out / "report.csv").write_text(report_csv(reports))


def compare_mixers(manifest, model_config: ModelConfig, train_config: TrainConfig, out_dir,
                   kinds=("deformable", "pooling"), jobs=1):
    """Cross-validate each mixer kind under identical data and seeds; one CSV row each."""
    out = Path(out_dir)
    reports = []
    for kind in kinds:
        cfg = ModelConfig.from_dict({**model_config.to_dict(), "mixer_kind": kind})
        reports.append(cross_validate(manifest, cfg, train_config, out / kind, jobs, kind))
    out.mkdir(parents=True, exist_ok=True)
    write_reports(out, reports, model_config, train_config)
    return reports
