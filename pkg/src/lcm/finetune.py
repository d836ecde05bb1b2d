"""Downstream finetuning: new task tokens, constant pseudo-labels, fewshot folds."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .core.rng import Rng
from .core.tensor import Tensor
from .data import MISSING, Dataset, PhenotypeSchema, SubjectRecord, TaskSpec
from .errors import ConfigError, DataError
from .model import LcmModel, ModelConfig
from .training import TrainConfig, TrainResult, train

SKIP = "skip"


@dataclass
class FinetuneSpec:
    """``pseudo_labels`` maps each pretrained task to ``{"class": c}``, ``{"value": x}`` or ``"skip"``."""

    new_tasks: list[TaskSpec]
    pseudo_labels: dict[str, dict | str]
    fewshot_ratio: float = 1.0
    base_checkpoint: str | None = None

    def __post_init__(self):
        if not 0 < self.fewshot_ratio <= 1:
            raise ConfigError(f"fewshot ratio must lie in (0, 1], got {self.fewshot_ratio}")
        for task, rule in self.pseudo_labels.items():
            if rule == SKIP:
                continue
            if not isinstance(rule, dict) or len(rule) != 1 or next(iter(rule)) not in ("class", "value"):
                raise ConfigError(f"pseudo label for {task!r} must be \"skip\", {{\"class\": ...}} or {{\"value\": ...}}")

    def validate_against(self, base: PhenotypeSchema) -> None:
        unknown = set(self.pseudo_labels) - set(base.names)
        if unknown:
            raise ConfigError(f"pseudo-label map references unknown tasks {sorted(unknown)}")
        missing = [n for n in base.names if n not in self.pseudo_labels]
        if missing:
            raise ConfigError(f"pseudo-label map does not cover pretrained tasks {missing} (use \"skip\")")
        for name, rule in self.pseudo_labels.items():
            task = base.task(name)
            if rule == SKIP:
                continue
            if "class" in rule and not task.categorical:
                raise ConfigError(f"task {name!r} is continuous; use {{\"value\": x}}")
            if "value" in rule and task.categorical:
                raise ConfigError(f"task {name!r} is categorical; use {{\"class\": c}}")
            if "class" in rule:
                try:
                    idx = task.class_index(rule["class"])
                except (DataError, TypeError, ValueError) as exc:
                    raise ConfigError(f"pseudo label for {name!r}: {exc}") from None
                if not 0 <= idx < task.class_count:
                    raise ConfigError(f"pseudo label class {idx} outside [0, {task.class_count}) for {name!r}")

    def to_json(self) -> dict:
        return {"new_tasks": [t.to_json() for t in self.new_tasks], "pseudo_labels": self.pseudo_labels,
                "fewshot_ratio": self.fewshot_ratio, "base_checkpoint": self.base_checkpoint}

    @classmethod
    def from_json(cls, obj: dict) -> "FinetuneSpec":
        unknown = set(obj) - {"new_tasks", "pseudo_labels", "fewshot_ratio", "base_checkpoint"}
        if unknown:
            raise ConfigError(f"unknown finetune spec fields {sorted(unknown)}")
        return cls([TaskSpec.from_json(t) for t in obj.get("new_tasks", [])], dict(obj.get("pseudo_labels", {})),
                   float(obj.get("fewshot_ratio", 1.0)), obj.get("base_checkpoint"))

    @classmethod
    def load(cls, path: str | Path) -> "FinetuneSpec":
        path = Path(path)
        if not path.exists():
            raise DataError(f"finetune spec not found: {path}")
        try:
            return cls.from_json(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from None


@dataclass
class ExtendedModel:
    model: LcmModel
    base_tokens: int
    new_tasks: list[TaskSpec]

    @property
    def schema(self) -> PhenotypeSchema:
        return self.model.config.schema

    def base_only_mask(self) -> np.ndarray:
        """Self-attention mask hiding new tokens from pretrained tokens."""
        p = self.model.config.tokens
        mask = np.ones((p, p), dtype=bool)
        mask[:self.base_tokens, self.base_tokens:] = False
        return mask


def extend_tokens(checkpoint: Checkpoint, new_tasks: list[TaskSpec], seed: int,
                  regions: int | None = None) -> ExtendedModel:
    """Append one token row per new class; every pretrained array is copied unchanged."""
    base = checkpoint.config
    if regions is not None and regions != base.regions:
        raise ConfigError(f"downstream data has {regions} regions but the checkpoint was trained on {base.regions}")
    schema = base.schema.extend(new_tasks)
    cfg = ModelConfig(base.layers, base.heads, base.dim, base.regions, schema, base.ffn_factor, base.init_std)
    params = {k: Tensor(v, True, k) for k, v in checkpoint.params.items()}
    extra = schema.total_tokens - base.tokens
    if extra:
        fresh = Rng(seed, "extend_tokens").normal((extra, base.dim), base.init_std)
        params["tokens"] = Tensor(np.concatenate([checkpoint.params["tokens"], fresh]), True, "tokens")
    return ExtendedModel(LcmModel(cfg, params), base.tokens, list(new_tasks))


def _pseudo_value(task: TaskSpec, rule) -> int | float | None:
    if rule == SKIP:
        return MISSING
    if "class" in rule:
        return task.class_index(rule["class"])
    return float(rule["value"])


def assign_pseudo_labels(dataset: Dataset, spec: FinetuneSpec, base: PhenotypeSchema) -> Dataset:
    """Re-express downstream records over ``base + new tasks`` with constant pretrained labels."""
    spec.validate_against(base)
    schema = base.extend(spec.new_tasks)
    missing = [t.name for t in spec.new_tasks if t.name not in dataset.schema.names]
    if missing:
        raise DataError(f"downstream data has no labels for new tasks {missing}")
    for t in spec.new_tasks:
        if dataset.schema.task(t.name) != t:
            raise ConfigError(f"task {t.name!r} differs between the finetune spec and the downstream data")
    constants = {name: _pseudo_value(base.task(name), rule) for name, rule in spec.pseudo_labels.items()}
    records = []
    for rec in dataset.records:
        labels = dict(constants)
        labels.update({t.name: rec.labels.get(t.name, MISSING) for t in spec.new_tasks})
        records.append(SubjectRecord(rec.subject_id, labels, list(rec.scans), list(rec.fcs), rec.bold))
    return Dataset(schema, records, dataset.region_count)


def _take(count: int, ratio: float) -> int:
    return math.floor(count * ratio + 1e-9)


def fewshot_subsample(dataset: Dataset, ratio: float, seed: int, task: str | None = None) -> Dataset:
    """Stratified subject-level subsample keeping at least one subject per class.

    Subjects are ranked once per stratum by a seeded permutation, so subsets
    drawn with one seed are nested as the ratio grows.
    """
    if not 0 < ratio <= 1:
        raise ConfigError(f"fewshot ratio must lie in (0, 1], got {ratio}")
    if ratio == 1:
        return dataset
    subjects = dataset.subject_ids
    strata: dict[object, list[str]] = {}
    spec = dataset.schema.task(task) if task is not None else None
    if spec is not None and spec.categorical:
        for sid, label in zip(subjects, dataset.class_labels(spec.name)):
            strata.setdefault(label, []).append(sid)
        absent = [c for c in range(spec.class_count) if c not in strata]
        if absent:
            raise DataError(f"task {spec.name!r}: classes {absent} have no subjects to keep")
    else:
        strata[None] = list(subjects)
    keep = set()
    rng = Rng(seed, "fewshot")
    for key in sorted(strata, key=lambda k: (k is None, k)):
        members = strata[key]
        order = rng.child(str(key)).permutation(len(members))
        n = _take(len(members), ratio)
        if key is not None or spec is None or not spec.categorical:
            n = max(1, n)
        keep.update(members[i] for i in order[:n])
    return dataset.subset([s for s in subjects if s in keep])


def finetune(extended: ExtendedModel, data: Dataset, config: TrainConfig, val_data: Dataset | None = None,
             provenance: dict | None = None) -> TrainResult:
    """Run the two-stage loop over pseudo-labelled and new tasks; optimizer state starts fresh."""
    if data.schema != extended.schema:
        raise ConfigError("downstream data must be pseudo-labelled onto the extended schema first")
    return train(extended.model, data, config, val_data, provenance=provenance)
