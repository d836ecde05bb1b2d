"""Multitask loss, the two-stage schedule and the training loop.

Stage 1 ("momentum", the first ``momentum_epochs`` epochs) supervises the
element-wise mean of all layers' readouts. Stage 2 ("adaptive") scores every
layer per task on the batch and back-propagates only the best layer's loss
for that task. Selections are tracked in every stage, and the histogram of
the retained epoch decides which layer answers each task at test time.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .core import ops
from .core.optim import AdamState, adam_step
from .core.rng import Rng
from .core.tensor import Tensor, current_tape, no_grad
from .data import Dataset, FoldSplit, PhenotypeSchema, SampleArrays
from .errors import ConfigError, DataError
from .model import LcmModel, PerLayerPredictions

log = logging.getLogger(__name__)

MOMENTUM, ADAPTIVE, LAST = "momentum", "adaptive", "last"


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 128
    max_epochs: int = 200
    momentum_epochs: int = 5
    patience: int = 50
    seed: int = 0
    supervise: str = "two_stage"      # "two_stage" | "last"
    stage1_average: str = "logits"    # "logits" | "loss"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    target_accuracy: float | None = None
    freeze_backbone: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigError("batch_size must be >= 1 and max_epochs >= 0")
        if not 0 <= self.momentum_epochs <= self.max_epochs:
            raise ConfigError(f"momentum_epochs must lie in [0, max_epochs={self.max_epochs}]")
        if self.supervise not in ("two_stage", "last"):
            raise ConfigError(f"unknown supervise mode {self.supervise!r}")
        if self.stage1_average not in ("logits", "loss"):
            raise ConfigError(f"unknown stage1_average {self.stage1_average!r}")

    def stage(self, epoch: int) -> str:
        if self.supervise == "last":
            return LAST
        return MOMENTUM if epoch < self.momentum_epochs else ADAPTIVE

    def to_json(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


# ------------------------------------------------------------------ losses

@dataclass
class TaskLoss:
    name: str
    kind: str
    value: Tensor
    count: int


@dataclass
class TaskLossBreakdown:
    terms: list[TaskLoss]

    @property
    def total(self) -> Tensor:
        out = self.terms[0].value
        for t in self.terms[1:]:
            out = ops.add(out, t.value)
        return out

    def values(self) -> dict[str, float]:
        return {t.name: t.value.item() for t in self.terms}


def task_loss(pred: Tensor, target: np.ndarray, present: np.ndarray, categorical: bool) -> Tensor | None:
    """Mean cross-entropy (categorical) or squared error over labelled rows."""
    idx = np.flatnonzero(present)
    if idx.size == 0:
        return None
    rows = pred if idx.size == pred.shape[0] else ops.getitem(pred, idx)
    y = target[idx]
    if categorical:
        onehot = np.zeros(rows.shape)
        onehot[np.arange(idx.size), y.astype(int)] = 1.0
        return ops.scale(ops.sum(ops.mul(ops.log_softmax(rows, axis=-1), Tensor(onehot))), -1.0 / idx.size)
    diff = ops.sub(ops.reshape(rows, (idx.size,)), Tensor(y))
    return ops.mean(ops.square(diff))


def multitask_loss(preds: list[Tensor], labels: np.ndarray, mask: np.ndarray,
                   schema: PhenotypeSchema) -> TaskLossBreakdown:
    """Sum over tasks of the per-task loss; tasks without labels in the batch are skipped."""
    terms = []
    for i, task in enumerate(schema):
        value = task_loss(preds[i], labels[:, i], mask[:, i], task.categorical)
        if value is not None:
            terms.append(TaskLoss(task.name, task.kind, value, int(mask[:, i].sum())))
    if not terms:
        raise DataError("every label in the batch is missing; nothing to supervise")
    return TaskLossBreakdown(terms)


def _average_layers(preds: PerLayerPredictions) -> Tensor:
    acc = preds.layers[0]
    for layer in preds.layers[1:]:
        acc = ops.add(acc, layer)
    return ops.scale(acc, 1.0 / len(preds.layers))


def _slices(layer_out: Tensor, schema: PhenotypeSchema) -> list[Tensor]:
    off = schema.offsets
    return [ops.getitem(layer_out, (slice(None), slice(off[i], off[i + 1]))) for i in range(len(schema))]


def stage1_loss(preds: PerLayerPredictions, labels: np.ndarray, mask: np.ndarray,
                average: str = "logits") -> TaskLossBreakdown:
    schema = preds.schema
    if average == "logits":
        return multitask_loss(_slices(_average_layers(preds), schema), labels, mask, schema)
    per_layer = [multitask_loss(_slices(out, schema), labels, mask, schema) for out in preds.layers]
    terms = []
    for j, term in enumerate(per_layer[0].terms):
        acc = term.value
        for br in per_layer[1:]:
            acc = ops.add(acc, br.terms[j].value)
        terms.append(TaskLoss(term.name, term.kind, ops.scale(acc, 1.0 / len(per_layer)), term.count))
    return TaskLossBreakdown(terms)


def last_layer_loss(preds: PerLayerPredictions, labels, mask) -> TaskLossBreakdown:
    return multitask_loss(_slices(preds.layers[-1], preds.schema), labels, mask, preds.schema)


# ----------------------------------------------------------- layer choice

@dataclass
class LayerSelectionRecord:
    epoch: int
    batch: int
    task: str
    layer: int               # 1-based
    scores: list[float]

    def to_json(self) -> dict:
        return {"epoch": self.epoch, "batch": self.batch, "task": self.task,
                "layer": self.layer, "scores": self.scores}


def _np_task_loss(logits: np.ndarray, y: np.ndarray, categorical: bool) -> float:
    if categorical:
        z = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        return float(np.mean(lse - z[np.arange(len(y)), y.astype(int)]))
    return float(np.mean((logits[:, 0] - y) ** 2))


def layer_scores(preds: PerLayerPredictions, labels: np.ndarray, mask: np.ndarray) -> dict[int, list[float]]:
    """Negative task loss of every layer, for each task with labels in the batch."""
    out = {}
    off = preds.schema.offsets
    for i, task in enumerate(preds.schema):
        idx = np.flatnonzero(mask[:, i])
        if idx.size == 0:
            continue
        y = labels[idx, i]
        out[i] = [-_np_task_loss(layer.data[idx, off[i]:off[i + 1]], y, task.categorical) for layer in preds.layers]
    return out


def select_layer(scores: list[float]) -> int:
    """0-based argmax; ``np.argmax`` returns the first maximum, i.e. the lowest index on ties."""
    return int(np.argmax(np.asarray(scores)))


def stage2_loss(preds: PerLayerPredictions, labels: np.ndarray, mask: np.ndarray,
                epoch: int = 0, batch: int = 0) -> tuple[TaskLossBreakdown, list[LayerSelectionRecord]]:
    schema = preds.schema
    off = schema.offsets
    terms, records = [], []
    for i, scores in layer_scores(preds, labels, mask).items():
        best = select_layer(scores)
        task = schema.tasks[i]
        pred = ops.getitem(preds.layers[best], (slice(None), slice(off[i], off[i + 1])))
        value = task_loss(pred, labels[:, i], mask[:, i], task.categorical)
        terms.append(TaskLoss(task.name, task.kind, value, int(mask[:, i].sum())))
        records.append(LayerSelectionRecord(epoch, batch, task.name, best + 1, scores))
    if not terms:
        raise DataError("every label in the batch is missing; nothing to supervise")
    return TaskLossBreakdown(terms), records


def stage1_step(model: LcmModel, fc: np.ndarray, labels: np.ndarray, mask: np.ndarray,
                average: str = "logits") -> TaskLossBreakdown:
    return stage1_loss(model.forward(fc), labels, mask, average)


def stage2_step(model: LcmModel, fc: np.ndarray, labels: np.ndarray, mask: np.ndarray,
                preds: PerLayerPredictions | None = None, epoch: int = 0, batch: int = 0):
    if preds is None:
        preds = model.forward(fc)
    return stage2_loss(preds, labels, mask, epoch, batch)


# ------------------------------------------------------------ target scaling

class TargetScaler:
    """Per-task z-scoring of continuous targets, fitted on a training fold."""

    def __init__(self, stats: dict[str, list[float]] | None = None):
        self.stats = dict(stats or {})

    @classmethod
    def fit(cls, samples: SampleArrays, schema: PhenotypeSchema) -> "TargetScaler":
        stats = {}
        for i, task in enumerate(schema):
            if task.categorical:
                continue
            vals = samples.labels[samples.mask[:, i], i]
            if vals.size == 0:
                stats[task.name] = [0.0, 1.0]
                continue
            sd = float(vals.std())
            stats[task.name] = [float(vals.mean()), sd if sd > 0 else 1.0]
        return cls(stats)

    def transform(self, labels: np.ndarray, schema: PhenotypeSchema) -> np.ndarray:
        out = labels.copy()
        for i, task in enumerate(schema):
            if task.name in self.stats:
                mu, sd = self.stats[task.name]
                out[:, i] = (out[:, i] - mu) / sd
        return out

    def inverse(self, task: str, values: np.ndarray) -> np.ndarray:
        if task not in self.stats:
            return values
        mu, sd = self.stats[task]
        return values * sd + mu


# ------------------------------------------------------------- prediction

def chosen_layers(schema: PhenotypeSchema, histograms: dict[str, list[int]], layers: int,
                  warn: bool = True) -> dict[str, int]:
    """Per task, the 0-based mode of its selection histogram (lowest index on ties)."""
    out = {}
    for task in schema:
        hist = histograms.get(task.name)
        if not hist or sum(hist) == 0:
            if warn:
                log.warning("no selection histogram for task %r; using the last layer", task.name)
            out[task.name] = layers - 1
        else:
            out[task.name] = int(np.argmax(np.asarray(hist)))
    return out


def predict_logits(model: LcmModel, fc: np.ndarray, histograms: dict[str, list[int]],
                   batch_size: int = 256, warn: bool = True) -> tuple[dict[str, np.ndarray], dict[str, int]]:
    fc = np.asarray(fc)
    single = fc.ndim == 2
    if single:
        fc = fc[None]
    schema = model.config.schema
    layer_of = chosen_layers(schema, histograms, model.config.layers, warn)
    off = schema.offsets
    chunks: dict[str, list[np.ndarray]] = {t.name: [] for t in schema}
    with no_grad():
        for lo in range(0, len(fc), batch_size):
            preds = model.forward(fc[lo:lo + batch_size])
            for i, task in enumerate(schema):
                chunks[task.name].append(preds.layers[layer_of[task.name]].data[:, off[i]:off[i + 1]])
    logits = {k: np.concatenate(v) for k, v in chunks.items()}
    if single:
        logits = {k: v[0] for k, v in logits.items()}
    return logits, layer_of


def predict_test(model: LcmModel, checkpoint: Checkpoint, fc: np.ndarray) -> dict[str, np.ndarray]:
    """Class indices for categorical tasks, de-normalised values for continuous ones."""
    logits, _ = predict_logits(model, fc, checkpoint.histograms)
    scaler = TargetScaler(checkpoint.scaler)
    out = {}
    for task in model.config.schema:
        z = logits[task.name]
        if task.categorical:
            out[task.name] = np.argmax(z, axis=-1)
        else:
            out[task.name] = scaler.inverse(task.name, z[..., 0])
    return out


def task_scores(model: LcmModel, samples: SampleArrays, labels: np.ndarray,
                histograms: dict[str, list[int]]) -> dict[str, float]:
    """Accuracy for categorical tasks, ``exp(-MSE)`` on scaled targets for continuous."""
    logits, _ = predict_logits(model, samples.fc, histograms, warn=False)
    out = {}
    for i, task in enumerate(model.config.schema):
        m = samples.mask[:, i]
        if not m.any():
            continue
        z = logits[task.name][m]
        if task.categorical:
            out[task.name] = float(np.mean(np.argmax(z, axis=1) == labels[m, i].astype(int)))
        else:
            out[task.name] = float(math.exp(-np.mean((z[:, 0] - labels[m, i]) ** 2)))
    return out


# --------------------------------------------------------------- the loop

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    histograms: dict[str, list[int]]
    records: list[LayerSelectionRecord] = field(default_factory=list)


def _trainable(model: LcmModel, freeze_backbone: bool) -> list[Tensor]:
    if not freeze_backbone:
        return model.parameters()
    return [model.params["tokens"]]


def train(model: LcmModel, data: Dataset, config: TrainConfig, val_data: Dataset | None = None,
          provenance: dict | None = None, scaler: TargetScaler | None = None,
          optimizer: AdamState | None = None) -> TrainResult:
    """Train in place and return the best-by-validation checkpoint.

    Without ``val_data`` the training set doubles as the validation set.
    """
    schema = model.config.schema
    if data.schema != schema:
        raise ConfigError(f"dataset tasks {data.schema.names} do not match model tasks {schema.names}")
    if data.region_count != model.config.regions:
        raise ConfigError(f"dataset has {data.region_count} regions, model expects {model.config.regions}")
    samples = data.samples()
    if len(samples.fc) == 0:
        raise DataError("training fold is empty")
    scaler = scaler or TargetScaler.fit(samples, schema)
    labels = scaler.transform(samples.labels, schema)
    if val_data is not None and len(val_data) > 0:
        val_samples = val_data.samples()
        val_labels = scaler.transform(val_samples.labels, schema)
    else:
        val_samples, val_labels = samples, labels

    params = _trainable(model, config.freeze_backbone)
    state = optimizer or AdamState()
    order_rng = Rng(config.seed, "batches")
    tape = current_tape()
    layers = model.config.layers

    history: list[dict] = []
    best_score, best_epoch = -math.inf, -1
    empty_hist = {t.name: [0] * layers for t in schema}
    best = Checkpoint.from_model(model, optimizer=None, histograms=empty_hist,
                                 scaler=dict(scaler.stats), train_state={"epoch": 0, "stage": config.stage(0)},
                                 provenance=dict(provenance or {}))
    final_records: list[LayerSelectionRecord] = []
    n = len(samples.fc)

    for epoch in range(config.max_epochs):
        stage = config.stage(epoch)
        order = order_rng.permutation(n)
        hist = {t.name: [0] * layers for t in schema}
        epoch_records: list[LayerSelectionRecord] = []
        loss_sum, task_sums, task_counts = 0.0, {t.name: 0.0 for t in schema}, {t.name: 0 for t in schema}
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            fc, y, m = samples.fc[idx], labels[idx], samples.mask[idx]
            tape.clear()
            preds = model.forward(fc)
            if stage == MOMENTUM:
                breakdown = stage1_loss(preds, y, m, config.stage1_average)
                records = [LayerSelectionRecord(epoch, b, schema.tasks[i].name, select_layer(s) + 1, s)
                           for i, s in layer_scores(preds, y, m).items()]
            elif stage == ADAPTIVE:
                breakdown, records = stage2_loss(preds, y, m, epoch, b)
            else:
                breakdown = last_layer_loss(preds, y, m)
                records = [LayerSelectionRecord(epoch, b, schema.tasks[i].name, layers, s)
                           for i, s in layer_scores(preds, y, m).items()]
            total = breakdown.total
            tape.backward(total)
            adam_step(params, state, config.lr, config.betas, config.eps)
            loss_sum += total.item() * len(idx)
            for term in breakdown.terms:
                task_sums[term.name] += term.value.item() * len(idx)
                task_counts[term.name] += len(idx)
            for r in records:
                hist[r.task][r.layer - 1] += 1
            epoch_records.extend(records)
        tape.clear()

        train_loss = loss_sum / n
        val_scores = task_scores(model, val_samples, val_labels, hist)
        score = float(np.mean(list(val_scores.values()))) if val_scores else -train_loss
        entry = {
            "epoch": epoch, "stage": stage, "loss": train_loss,
            "task_losses": {k: task_sums[k] / task_counts[k] for k in task_sums if task_counts[k]},
            "val_scores": val_scores, "val_score": score, "selections": hist,
        }
        train_scores = None
        if config.target_accuracy is not None:
            train_scores = val_scores if val_samples is samples else task_scores(model, samples, labels, hist)
            entry["train_scores"] = train_scores
        history.append(entry)
        final_records = epoch_records

        if score > best_score:
            best_score, best_epoch = score, epoch
            best = Checkpoint.from_model(
                model, optimizer=AdamState(state.step, [a.copy() for a in state.m], [a.copy() for a in state.v]),
                histograms={k: list(v) for k, v in hist.items()}, scaler=dict(scaler.stats),
                train_state={"epoch": epoch, "stage": stage, "best_val_score": score, "train_loss": train_loss},
                provenance=dict(provenance or {}))
        if config.target_accuracy is not None and train_scores and \
                all(v >= config.target_accuracy for k, v in train_scores.items() if schema.task(k).categorical):
            log.info("target accuracy reached at epoch %d", epoch)
            break
        if epoch - best_epoch >= config.patience:
            log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break

    return TrainResult(best, history, best.histograms, final_records)


def load_into(model: LcmModel, checkpoint: Checkpoint) -> None:
    for name, value in checkpoint.params.items():
        model.params[name].data[...] = value


def split_validation(data: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset | None]:
    """Hold out a seeded ``fraction`` of subjects (at least one) for early stopping."""
    subjects = data.subject_ids
    if fraction <= 0 or len(subjects) < 2:
        return data, None
    n_val = max(1, int(round(fraction * len(subjects))))
    if n_val >= len(subjects):
        n_val = len(subjects) - 1
    perm = Rng(seed, "validation").permutation(len(subjects))
    val = {subjects[i] for i in perm[:n_val]}
    return data.subset([s for s in subjects if s not in val]), data.subset([s for s in subjects if s in val])


def train_fold(model: LcmModel, data: Dataset, split: FoldSplit, fold: int, config: TrainConfig,
               val_fraction: float = 0.1) -> TrainResult:
    train_part = data.subset(split.train_subjects(fold))
    if len(train_part) == 0:
        raise DataError(f"fold {fold}: training portion is empty")
    fit, val = split_validation(train_part, val_fraction, config.seed)
    prov = {"fold": fold, "k": split.k, "split_seed": split.seed, "seed": config.seed,
            "assignment": dict(split.assignment), "train_config": config.to_json()}
    return train(model, fit, config, val, provenance=prov)
