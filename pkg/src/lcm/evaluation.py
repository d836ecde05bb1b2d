"""Metrics, evaluation reports, attention summaries, best-layer reports and the depth study.

F1 is macro-averaged over the classes that occur in the ground truth.
Report files are named ``{dataset}_{fold}_{seed}_{kind}.csv`` (or ``.json``).
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .core import ops
from .core.optim import AdamState, adam_step
from .core.rng import Rng
from .core.tensor import NonFiniteError, Tensor, current_tape, no_grad
from .data import Dataset, PhenotypeSchema, SampleArrays
from .errors import ConfigError, DataError
from .model import LcmModel, ModelConfig, export_cross_attention, parameter_count
from .training import (LayerSelectionRecord, TargetScaler, TrainConfig, chosen_layers, layer_scores,
                       multitask_loss, predict_logits, train)

log = logging.getLogger(__name__)

SCALE_PRESETS = {"small": 8, "mid": 20, "big": 32}


def report_name(dataset: str, fold: int | str, seed: int, kind: str, ext: str = "csv") -> str:
    return f"{dataset}_{fold}_{seed}_{kind}.{ext}"


# ----------------------------------------------------------------- metrics

def _check_pair(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p, y = np.asarray(preds).astype(int).ravel(), np.asarray(labels).astype(int).ravel()
    if p.size == 0:
        raise DataError("cannot score an empty prediction set")
    if p.shape != y.shape:
        raise DataError(f"{p.size} predictions for {y.size} labels")
    return p, y


def accuracy(preds, labels) -> float:
    p, y = _check_pair(preds, labels)
    return float(np.mean(p == y))


def confusion_matrix(preds, labels, class_count: int) -> np.ndarray:
    """Rows are ground truth, columns predictions."""
    p, y = _check_pair(preds, labels)
    if p.min() < 0 or y.min() < 0 or p.max() >= class_count or y.max() >= class_count:
        raise DataError(f"class index outside [0, {class_count})")
    out = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(out, (y, p), 1)
    return out


def per_class_f1(preds, labels, class_count: int) -> dict[int, float]:
    cm = confusion_matrix(preds, labels, class_count)
    out = {}
    for c in range(class_count):
        support = cm[c].sum()
        if support == 0:
            continue
        tp = cm[c, c]
        fp = cm[:, c].sum() - tp
        fn = support - tp
        out[c] = float(2 * tp / (2 * tp + fp + fn))
    return out


def macro_f1(preds, labels, class_count: int) -> float:
    scores = per_class_f1(preds, labels, class_count)
    return float(np.mean(list(scores.values())))


# ------------------------------------------------------------ eval reports

@dataclass
class TaskReport:
    task: str
    kind: str
    count: int
    layer: int                                # 1-based readout layer
    accuracy: float | None = None
    macro_f1: float | None = None
    confusion: list[list[int]] | None = None
    mse: float | None = None

    def to_json(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass
class EvalReport:
    tasks: list[TaskReport]
    fold: int | None = None
    seed: int | None = None
    checkpoint: str | None = None

    def task(self, name: str) -> TaskReport:
        for t in self.tasks:
            if t.task == name:
                return t
        raise KeyError(name)

    def to_json(self) -> dict:
        return {"fold": self.fold, "seed": self.seed, "checkpoint": self.checkpoint,
                "tasks": [t.to_json() for t in self.tasks]}

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "kind", "count", "layer", "accuracy", "macro_f1", "mse"])
        for t in self.tasks:
            w.writerow([t.task, t.kind, t.count, t.layer] +
                       ["" if v is None else repr(v) for v in (t.accuracy, t.macro_f1, t.mse)])
        return buf.getvalue()

    def confusion_csv(self, task: str) -> str:
        t = self.task(task)
        if t.confusion is None:
            raise ConfigError(f"task {task!r} is continuous and has no confusion matrix")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = len(t.confusion)
        w.writerow(["true\\pred"] + [str(c) for c in range(n)])
        for c, row in enumerate(t.confusion):
            w.writerow([str(c)] + [str(v) for v in row])
        return buf.getvalue()


def evaluate(model: LcmModel, checkpoint: Checkpoint, data: Dataset, fold: int | None = None,
             seed: int | None = None, checkpoint_ref: str | None = None) -> EvalReport:
    """Score every labelled task with the histogram-mode readout layer."""
    schema = model.config.schema
    if data.schema != schema:
        raise ConfigError(f"dataset tasks {data.schema.names} do not match model tasks {schema.names}")
    samples = data.samples()
    if len(samples.fc) == 0:
        raise DataError("evaluation set is empty")
    logits, layer_of = predict_logits(model, samples.fc, checkpoint.histograms, warn=False)
    scaler = TargetScaler(checkpoint.scaler)
    reports = []
    for i, task in enumerate(schema):
        m = samples.mask[:, i]
        if not m.any():
            continue
        if not sum(checkpoint.histograms.get(task.name) or []):
            log.warning("no selection histogram for task %r; using the last layer", task.name)
        y = samples.labels[m, i]
        z = logits[task.name][m]
        rep = TaskReport(task.name, task.kind, int(m.sum()), layer_of[task.name] + 1)
        if task.categorical:
            pred = np.argmax(z, axis=1)
            rep.accuracy = accuracy(pred, y)
            rep.macro_f1 = macro_f1(pred, y, task.class_count)
            rep.confusion = confusion_matrix(pred, y, task.class_count).tolist()
        else:
            rep.mse = float(np.mean((scaler.inverse(task.name, z[:, 0]) - y) ** 2))
        reports.append(rep)
    return EvalReport(reports, fold, seed, checkpoint_ref)


# ------------------------------------------------------ attention summaries

@dataclass
class AttentionSummary:
    group: int
    weights: np.ndarray          # (class tokens of the task) x regions
    count: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["token"] + [f"region_{j}" for j in range(self.weights.shape[1])])
        for t, row in enumerate(self.weights):
            w.writerow([str(t)] + [repr(float(v)) for v in row])
        return buf.getvalue()


def aggregate_attention(model: LcmModel, checkpoint: Checkpoint, data: Dataset, task: str,
                        group_by: str = "label", batch_size: int = 64) -> list[AttentionSummary]:
    """Mean head-averaged cross-attention of ``task``'s tokens at its readout layer, per group.

    Groups are ground-truth classes (``group_by="label"``) or predicted
    classes (``"prediction"``); empty groups are skipped with a warning.
    """
    schema = model.config.schema
    spec = schema.task(task)
    if not spec.categorical:
        raise ConfigError(f"task {task!r} is continuous; attention is grouped by class")
    if group_by not in ("label", "prediction"):
        raise ConfigError(f"group_by must be 'label' or 'prediction', got {group_by!r}")
    samples = data.samples()
    if len(samples.fc) == 0:
        raise DataError("attention summary needs a nonempty test set")
    ti = schema.index(task)
    layer = chosen_layers(schema, checkpoint.histograms, model.config.layers)[task]
    if group_by == "label":
        keep = samples.mask[:, ti]
        groups = samples.labels[:, ti]
    else:
        logits, _ = predict_logits(model, samples.fc, checkpoint.histograms)
        keep = np.ones(len(samples.fc), dtype=bool)
        groups = np.argmax(logits[task], axis=1).astype(float)
    sums = np.zeros((spec.class_count, spec.class_count, data.region_count))
    counts = np.zeros(spec.class_count, dtype=int)
    idx = np.flatnonzero(keep)
    for lo in range(0, idx.size, batch_size):
        chunk = idx[lo:lo + batch_size]
        w = export_cross_attention(model, samples.fc[chunk], layer + 1)[task]    # B,k,N
        for g, weights in zip(groups[chunk].astype(int), w):
            sums[g] += weights
            counts[g] += 1
    out = []
    for g in range(spec.class_count):
        if counts[g] == 0:
            log.warning("task %r: no samples in group %d; skipped", task, g)
            continue
        out.append(AttentionSummary(g, sums[g] / counts[g], int(counts[g])))
    return out


# ------------------------------------------------------- best-layer report

@dataclass
class LayerHistogram:
    task: str
    counts: list[int]

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def frequency(self) -> list[float]:
        return [c / self.total for c in self.counts]

    def quantiles(self) -> dict[str, float]:
        layers = np.repeat(np.arange(1, len(self.counts) + 1), self.counts)
        q1, med, q3 = np.percentile(layers, [25, 50, 75])
        return {"q1": float(q1), "median": float(med), "q3": float(q3)}

    def to_json(self) -> dict:
        return {"task": self.task, "counts": self.counts, "frequency": self.frequency, **self.quantiles()}


def best_layer_report(records: Sequence[LayerSelectionRecord], layers: int | None = None) -> list[LayerHistogram]:
    """Per-task histogram of selected layers (1-based layers map to list index - 1)."""
    if not records:
        raise DataError("best-layer report needs at least one selection record")
    width = layers or max(r.layer for r in records)
    hist: dict[str, list[int]] = {}
    for r in records:
        hist.setdefault(r.task, [0] * width)[r.layer - 1] += 1
    return [LayerHistogram(t, c) for t, c in hist.items()]


def best_layer_csv(report: Sequence[LayerHistogram]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    width = len(report[0].counts)
    w.writerow(["task", "total", "q1", "median", "q3"] + [f"layer_{l}" for l in range(1, width + 1)])
    for h in report:
        q = h.quantiles()
        w.writerow([h.task, h.total, repr(q["q1"]), repr(q["median"]), repr(q["q3"])] +
                   [repr(f) for f in h.frequency])
    return buf.getvalue()


# ---------------------------------------------------- feed-forward baseline

class ResidualMLP:
    """Residual ReLU network on the flattened upper triangle of the FC matrix."""

    def __init__(self, regions: int, width: int, blocks: int, outputs: int, seed: int = 0, std: float = 0.02):
        self.regions, self.width, self.blocks, self.outputs = regions, width, blocks, outputs
        self.features = regions * (regions - 1) // 2
        rng = Rng(seed, "mlp")
        p = {"in.weight": rng.child("in").normal((self.features, width), std), "in.bias": np.zeros(width)}
        for b in range(blocks):
            p[f"blocks.{b}.up.weight"] = rng.child(f"{b}.up").normal((width, width), std)
            p[f"blocks.{b}.up.bias"] = np.zeros(width)
            p[f"blocks.{b}.down.weight"] = rng.child(f"{b}.down").normal((width, width), std)
            p[f"blocks.{b}.down.bias"] = np.zeros(width)
        p["head.weight"] = rng.child("head").normal((width, outputs), std)
        p["head.bias"] = np.zeros(outputs)
        self.params = {k: Tensor(v, True, k) for k, v in p.items()}

    @staticmethod
    def count(regions: int, width: int, blocks: int, outputs: int) -> int:
        features = regions * (regions - 1) // 2
        return features * width + width + blocks * 2 * (width * width + width) + width * outputs + outputs

    @classmethod
    def matched_width(cls, target: int, regions: int, blocks: int, outputs: int) -> int:
        """Smallest width whose parameter count reaches ``target``."""
        width = 1
        while cls.count(regions, width, blocks, outputs) < target:
            width += 1
        return width

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def forward(self, fc: np.ndarray) -> Tensor:
        iu = np.triu_indices(self.regions, 1)
        x = Tensor(np.asarray(fc)[:, iu[0], iu[1]])
        p = self.params
        h = ops.add(ops.matmul(x, p["in.weight"]), p["in.bias"])
        for b in range(self.blocks):
            up = ops.relu(ops.add(ops.matmul(h, p[f"blocks.{b}.up.weight"]), p[f"blocks.{b}.up.bias"]))
            h = ops.add(h, ops.add(ops.matmul(up, p[f"blocks.{b}.down.weight"]), p[f"blocks.{b}.down.bias"]))
        return ops.add(ops.matmul(h, p["head.weight"]), p["head.bias"])


def _mlp_loss(mlp: ResidualMLP, fc, labels, mask, schema: PhenotypeSchema) -> Tensor:
    out = mlp.forward(fc)
    off = schema.offsets
    slices = [ops.getitem(out, (slice(None), slice(off[i], off[i + 1]))) for i in range(len(schema))]
    return multitask_loss(slices, labels, mask, schema).total


def train_baseline(mlp: ResidualMLP, data: Dataset, config: TrainConfig) -> list[float]:
    """Same batches, optimizer and loss as the main loop; returns per-epoch mean loss."""
    samples = data.samples()
    labels = TargetScaler.fit(samples, data.schema).transform(samples.labels, data.schema)
    state, order_rng, tape = AdamState(), Rng(config.seed, "batches"), current_tape()
    n, curve = len(samples.fc), []
    for _ in range(config.max_epochs):
        order = order_rng.permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            tape.clear()
            try:
                loss = _mlp_loss(mlp, samples.fc[idx], labels[idx], samples.mask[idx], data.schema)
            except NonFiniteError:
                tape.clear()
                log.warning("baseline diverged")
                return curve + [math.inf]
            tape.backward(loss)
            adam_step(mlp.parameters(), state, config.lr, config.betas, config.eps)
            total += loss.item() * len(idx)
        tape.clear()
        curve.append(total / n)
    return curve


def baseline_loss(mlp: ResidualMLP, data: Dataset, labels: np.ndarray) -> float:
    samples = data.samples()
    try:
        with no_grad():
            return _mlp_loss(mlp, samples.fc, labels, samples.mask, data.schema).item()
    except NonFiniteError:
        return math.inf


# ------------------------------------------------------------ depth study

def final_training_loss(model: LcmModel, samples: SampleArrays, labels: np.ndarray) -> float:
    """Full-set loss with each task read from its best-scoring layer."""
    with no_grad():
        scores = layer_scores(model.forward(samples.fc), labels, samples.mask)
    return float(-sum(max(s) for s in scores.values()))


@dataclass
class ScalingRow:
    arm: str
    layers: int
    parameters: int
    losses: list[float]

    @property
    def median_loss(self) -> float:
        return float(np.median(self.losses))

    def to_json(self) -> dict:
        return {"arm": self.arm, "layers": self.layers, "parameters": self.parameters,
                "losses": self.losses, "median_loss": self.median_loss}


@dataclass
class ScalingTable:
    rows: list[ScalingRow] = field(default_factory=list)

    def arm(self, name: str) -> list[ScalingRow]:
        return sorted((r for r in self.rows if r.arm == name), key=lambda r: r.layers)

    def non_increasing(self, name: str = "lcm") -> bool:
        med = [r.median_loss for r in self.arm(name)]
        return all(b <= a for a, b in zip(med, med[1:]))

    def to_json(self) -> dict:
        return {"rows": [r.to_json() for r in self.rows],
                "lcm_non_increasing": self.non_increasing("lcm"),
                "baseline_non_increasing": self.non_increasing("mlp") if self.arm("mlp") else None}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["arm", "layers", "parameters", "median_loss", "losses"])
        for r in self.rows:
            w.writerow([r.arm, r.layers, r.parameters, repr(r.median_loss), " ".join(repr(v) for v in r.losses)])
        return buf.getvalue()


def scaling_study(depths: Sequence[int], data: Dataset, seeds: Sequence[int], config: TrainConfig,
                  dim: int = 32, heads: int = 4, baseline: bool = True) -> ScalingTable:
    """Train every depth under one budget and tabulate the median final training loss.

    The baseline arm uses ``L`` residual blocks with the width that matches
    the LCM parameter count at that depth.
    """
    depths = [SCALE_PRESETS[d] if isinstance(d, str) else int(d) for d in depths]
    if not depths or not seeds:
        raise ConfigError("scaling study needs at least one depth and one seed")
    schema, n = data.schema, data.region_count
    samples = data.samples()
    labels = TargetScaler.fit(samples, schema).transform(samples.labels, schema)
    table = ScalingTable()
    for depth in depths:
        losses, base_losses = [], []
        count = parameter_count(depth, heads, dim, n, schema.total_tokens)
        width = ResidualMLP.matched_width(count, n, depth, schema.total_tokens)
        for seed in seeds:
            cfg = TrainConfig(**{**config.__dict__, "seed": int(seed), "patience": config.max_epochs + 1})
            model = LcmModel(ModelConfig(depth, heads, dim, n, schema), seed=int(seed))
            train(model, data, cfg)
            losses.append(final_training_loss(model, samples, labels))
            log.info("depth %d seed %s: loss %.6g", depth, seed, losses[-1])
            if baseline:
                mlp = ResidualMLP(n, width, depth, schema.total_tokens, seed=int(seed))
                curve = train_baseline(mlp, data, cfg)
                base_losses.append(math.inf if curve and curve[-1] == math.inf else baseline_loss(mlp, data, labels))
        table.rows.append(ScalingRow("lcm", depth, count, losses))
        if baseline:
            table.rows.append(ScalingRow("mlp", depth, ResidualMLP.count(n, width, depth, schema.total_tokens),
                                         base_losses))
    return table


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def write_json(path: Path, obj) -> Path:
    return write_text(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")
