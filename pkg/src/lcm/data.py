"""Connectome inputs: functional connectivity, phenotype schemas, datasets.

File formats
------------
scan CSV
    header ``t,region_0,...,region_{N-1}``, one row per timepoint.
FC CSV
    N rows of N comma-separated values, no header, 17 significant digits.
manifest JSON
    ``{"schema": [...], "region_count": N, "records": [...]}`` where every
    record is ``{"subject_id", "scans": [paths], "labels": {task: value|null}}``.
    Scan paths are resolved relative to the manifest. A subject may appear in
    several records, which is how per-scan labels are expressed.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core.rng import Rng
from .errors import ConfigError, DataError, DegenerateSignal

CATEGORICAL = "categorical"
CONTINUOUS = "continuous"
MISSING = None


# ---------------------------------------------------------------- schema

@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str
    class_count: int
    class_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind == CATEGORICAL:
            if self.class_count < 2:
                raise ConfigError(f"categorical task {self.name!r} needs at least 2 classes")
        elif self.kind == CONTINUOUS:
            if self.class_count != 1:
                raise ConfigError(f"continuous task {self.name!r} must have class_count 1")
        else:
            raise ConfigError(f"task {self.name!r}: unknown kind {self.kind!r}")
        if self.class_labels is not None and len(self.class_labels) != self.class_count:
            raise ConfigError(f"task {self.name!r}: {len(self.class_labels)} labels for {self.class_count} classes")

    @property
    def categorical(self) -> bool:
        return self.kind == CATEGORICAL

    def class_index(self, value) -> int:
        if isinstance(value, str):
            if self.class_labels is None or value not in self.class_labels:
                raise DataError(f"task {self.name!r} has no class named {value!r}")
            return self.class_labels.index(value)
        return int(value)

    def to_json(self) -> dict:
        out = {"name": self.name, "kind": self.kind, "class_count": self.class_count}
        if self.class_labels is not None:
            out["class_labels"] = list(self.class_labels)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TaskSpec":
        labels = obj.get("class_labels")
        kind = obj.get("kind", CATEGORICAL)
        count = obj.get("class_count", 1 if kind == CONTINUOUS else None)
        if count is None:
            raise ConfigError(f"task {obj.get('name')!r} is missing class_count")
        return cls(obj["name"], kind, int(count), tuple(labels) if labels is not None else None)


def categorical(name: str, classes: int | Sequence[str]) -> TaskSpec:
    if isinstance(classes, int):
        return TaskSpec(name, CATEGORICAL, classes)
    return TaskSpec(name, CATEGORICAL, len(classes), tuple(classes))


def continuous(name: str) -> TaskSpec:
    return TaskSpec(name, CONTINUOUS, 1)


@dataclass(frozen=True)
class PhenotypeSchema:
    """Ordered BEI tasks; task ``i`` owns token rows ``[S_i, S_{i+1})``."""

    tasks: tuple[TaskSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        names = [t.name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigError(f"task names must be unique, got {names}")

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tasks]

    @property
    def offsets(self) -> list[int]:
        return slice_offsets(self)[0]

    @property
    def total_tokens(self) -> int:
        return slice_offsets(self)[1]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"unknown task {name!r}; schema has {self.names}") from None

    def task(self, name: str) -> TaskSpec:
        return self.tasks[self.index(name)]

    def extend(self, new_tasks: Iterable[TaskSpec]) -> "PhenotypeSchema":
        new_tasks = tuple(new_tasks)
        clash = set(self.names) & {t.name for t in new_tasks}
        if clash:
            raise ConfigError(f"new task names collide with pretrained tasks: {sorted(clash)}")
        return PhenotypeSchema(self.tasks + new_tasks)

    def to_json(self) -> list[dict]:
        return [t.to_json() for t in self.tasks]

    @classmethod
    def from_json(cls, obj: list[dict]) -> "PhenotypeSchema":
        return cls(tuple(TaskSpec.from_json(t) for t in obj))


def slice_offsets(schema: PhenotypeSchema) -> tuple[list[int], int]:
    """Prefix sums of class counts: ``S_0 = 0``, ``S_i = sum_{j<i} n_j``; returns (S, P)."""
    offsets = [0]
    for t in schema.tasks:
        offsets.append(offsets[-1] + t.class_count)
    return offsets, offsets[-1]


# ---------------------------------------------------------------- FC

def compute_fc(x: np.ndarray, context: str = "") -> np.ndarray:
    """Pearson correlation between region rows of an N x T signal."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"BOLD signal must be 2-D (regions x timepoints), got shape {x.shape}")
    if x.shape[1] < 3:
        raise DataError(f"need at least 3 timepoints, got {x.shape[1]}")
    xc = x - x.mean(axis=1, keepdims=True)
    ss = np.einsum("it,it->i", xc, xc)
    for i, v in enumerate(ss):
        if not v > 0 or np.all(x[i] == x[i, 0]):
            raise DegenerateSignal(i, context)
    norm = xc / np.sqrt(ss)[:, None]
    fc = norm @ norm.T
    fc = 0.5 * (fc + fc.T)
    np.clip(fc, -1.0, 1.0, out=fc)
    np.fill_diagonal(fc, 1.0)
    return fc


def check_fc(fc: np.ndarray, tol: float = 1e-12) -> None:
    fc = np.asarray(fc)
    if fc.ndim != 2 or fc.shape[0] != fc.shape[1]:
        raise DataError(f"FC must be square, got shape {fc.shape}")
    if not np.all(np.diag(fc) == 1.0):
        raise DataError("FC diagonal must be exactly 1")
    if np.abs(fc - fc.T).max() > tol:
        raise DataError("FC is not symmetric")
    if np.abs(fc).max() > 1.0 + tol:
        raise DataError("FC entries outside [-1, 1]")


# ---------------------------------------------------------------- dataset

@dataclass
class SubjectRecord:
    subject_id: str
    labels: dict[str, float | int | None]
    scans: list[str] = field(default_factory=list)
    fcs: list[np.ndarray] = field(default_factory=list)
    bold: list[np.ndarray] | None = None


@dataclass
class SampleArrays:
    """Flattened per-scan view: ``fc`` is (S, N, N); ``mask`` marks present labels."""

    fc: np.ndarray
    labels: np.ndarray
    mask: np.ndarray
    subjects: np.ndarray


class Dataset:
    def __init__(self, schema: PhenotypeSchema, records: list[SubjectRecord], region_count: int):
        self.schema = schema
        self.records = list(records)
        self.region_count = int(region_count)
        self._samples: SampleArrays | None = None
        self.validate()

    def validate(self) -> None:
        names = set(self.schema.names)
        for rec in self.records:
            if set(rec.labels) - names:
                raise DataError(f"record {rec.subject_id!r}: labels for unknown tasks {sorted(set(rec.labels) - names)}")
            for task in self.schema:
                v = rec.labels.get(task.name, MISSING)
                if v is MISSING:
                    continue
                if task.categorical:
                    if not (isinstance(v, (int, np.integer)) and not isinstance(v, bool)) or not 0 <= v < task.class_count:
                        raise DataError(f"record {rec.subject_id!r}: label {v!r} for task {task.name!r} "
                                        f"outside [0, {task.class_count})")
                elif not math.isfinite(float(v)):
                    raise DataError(f"record {rec.subject_id!r}: non-finite value for task {task.name!r}")
            for fc in rec.fcs:
                if fc.shape != (self.region_count, self.region_count):
                    raise DataError(f"record {rec.subject_id!r}: FC shape {fc.shape} but dataset "
                                    f"has {self.region_count} regions")

    def __len__(self) -> int:
        return sum(len(r.fcs) for r in self.records)

    @property
    def subject_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.subject_id, None)
        return list(seen)

    def subset(self, subject_ids: Iterable[str]) -> "Dataset":
        keep = set(subject_ids)
        return Dataset(self.schema, [r for r in self.records if r.subject_id in keep], self.region_count)

    def samples(self) -> SampleArrays:
        if self._samples is None:
            n, T = self.region_count, len(self.schema)
            fcs, labels, mask, subjects = [], [], [], []
            for rec in self.records:
                row = np.zeros(T)
                present = np.zeros(T, dtype=bool)
                for i, task in enumerate(self.schema):
                    v = rec.labels.get(task.name, MISSING)
                    if v is not MISSING:
                        row[i], present[i] = float(v), True
                for fc in rec.fcs:
                    fcs.append(fc)
                    labels.append(row)
                    mask.append(present)
                    subjects.append(rec.subject_id)
            self._samples = SampleArrays(
                fc=np.array(fcs, dtype=np.float64).reshape(-1, n, n),
                labels=np.array(labels, dtype=np.float64).reshape(-1, T),
                mask=np.array(mask, dtype=bool).reshape(-1, T),
                subjects=np.array(subjects, dtype=object))
        return self._samples

    def class_labels(self, task: str) -> list[int | None]:
        """Per-subject label of ``task`` (first record of each subject)."""
        out: dict[str, int | None] = {}
        for r in self.records:
            out.setdefault(r.subject_id, r.labels.get(task, MISSING))
        return [out[s] for s in self.subject_ids]


# ---------------------------------------------------------------- folds

@dataclass
class FoldSplit:
    k: int
    assignment: dict[str, int]
    seed: int

    def subjects(self, fold: int) -> list[str]:
        return [s for s, f in self.assignment.items() if f == fold]

    def train_subjects(self, fold: int) -> list[str]:
        return [s for s, f in self.assignment.items() if f != fold]

    def sizes(self) -> list[int]:
        return [len(self.subjects(f)) for f in range(self.k)]

    def to_json(self) -> dict:
        return {"k": self.k, "seed": self.seed, "assignment": dict(self.assignment)}

    @classmethod
    def from_json(cls, obj: dict) -> "FoldSplit":
        return cls(int(obj["k"]), {str(s): int(f) for s, f in obj["assignment"].items()}, int(obj["seed"]))


def kfold_split(dataset: Dataset | Sequence[str], k: int, seed: int) -> FoldSplit:
    """Subject-level folds; sizes differ by at most one subject."""
    subjects = dataset.subject_ids if isinstance(dataset, Dataset) else list(dict.fromkeys(dataset))
    if k < 1 or k > len(subjects):
        raise ConfigError(f"cannot make {k} folds from {len(subjects)} subjects")
    order = Rng(seed, "kfold").permutation(len(subjects))
    assignment = {subjects[j]: pos % k for pos, j in enumerate(order)}
    return FoldSplit(k, {s: assignment[s] for s in subjects}, seed)


# ---------------------------------------------------------------- synthetic data

@dataclass
class SynthConfig:
    """Class-conditioned linear-mixture BOLD generator.

    Each subject's signal is ``x = A_s z + noise * eps`` with latent ``z`` of
    width ``latent_dim``. ``A_s`` is a common mixing matrix plus ``effect``
    times one pattern per task (chosen by the subject's class). Patterns of
    equal class index share a component of weight ``shared`` across tasks, and
    ``coupling`` is the probability that a task's label copies the subject's
    latent class, so tasks are correlated both in labels and in FC.
    """

    tasks: list[TaskSpec]
    subjects_per_class: int = 20
    regions: int = 16
    timepoints: int = 100
    latent_dim: int = 8
    effect: float = 1.0
    noise: float = 0.5
    coupling: float = 0.5
    shared: float = 0.5
    scans_per_subject: int = 1
    seed: int = 0
    subject_prefix: str = "sub"

    def validate(self) -> None:
        if self.effect < 0:
            raise ConfigError("effect strength must be non-negative")
        if self.regions < self.latent_dim:
            raise ConfigError(f"regions ({self.regions}) must be at least latent_dim ({self.latent_dim})")
        if self.timepoints < 3:
            raise ConfigError("need at least 3 timepoints")
        if self.subjects_per_class < 1 or self.scans_per_subject < 1:
            raise ConfigError("subjects_per_class and scans_per_subject must be positive")
        if not 0 <= self.coupling <= 1 or not 0 <= self.shared <= 1:
            raise ConfigError("coupling and shared must lie in [0, 1]")
        if not self.tasks:
            raise ConfigError("at least one task is required")

    @classmethod
    def from_json(cls, obj: dict) -> "SynthConfig":
        obj = dict(obj)
        obj["tasks"] = [TaskSpec.from_json(t) for t in obj["tasks"]]
        allowed = set(cls.__dataclass_fields__)
        unknown = set(obj) - allowed
        if unknown:
            raise ConfigError(f"unknown synth config fields: {sorted(unknown)}")
        return cls(**obj)


def _pattern_bank(cfg: SynthConfig, rng: Rng) -> tuple[np.ndarray, dict[tuple[int, int], np.ndarray]]:
    n, k = cfg.regions, cfg.latent_dim
    common = rng.child("common").normal((n, k), std=1.0 / math.sqrt(k))
    width = max(t.class_count for t in cfg.tasks)
    pool = rng.child("pool").normal((width, n, k), std=1.0 / math.sqrt(k))
    own = rng.child("own")
    bank = {}
    for ti, task in enumerate(cfg.tasks):
        for c in range(task.class_count):
            private = own.normal((n, k), std=1.0 / math.sqrt(k))
            bank[ti, c] = math.sqrt(cfg.shared) * pool[c] + math.sqrt(1 - cfg.shared) * private
    return common, bank


def synth_generate(cfg: SynthConfig) -> Dataset:
    cfg.validate()
    rng = Rng(cfg.seed, "synth")
    common, bank = _pattern_bank(cfg, rng.child("patterns"))
    cat_counts = [t.class_count for t in cfg.tasks if t.categorical]
    width = max(cat_counts) if cat_counts else 2
    n_subjects = cfg.subjects_per_class * width
    label_rng = rng.child("labels")
    latent = label_rng.permutation(np.arange(n_subjects) % width)
    schema = PhenotypeSchema(tuple(cfg.tasks))
    records = []
    for s in range(n_subjects):
        u = int(latent[s])
        labels: dict[str, float | int | None] = {}
        mixing = common.copy()
        for ti, task in enumerate(cfg.tasks):
            copy = label_rng.uniform(()) < cfg.coupling
            if task.categorical:
                draw = int(label_rng.integers(0, task.class_count))
                y = u % task.class_count if copy else draw
                labels[task.name] = int(y)
                mixing += cfg.effect * bank[ti, y]
            else:
                centred = (u - (width - 1) / 2) / max(width - 1, 1) * 2
                noise = float(label_rng.normal(()))
                y = centred if copy else noise
                labels[task.name] = float(y)
                mixing += cfg.effect * y * bank[ti, 0]
        sub_rng = rng.child(f"bold/{s}")
        bold, fcs = [], []
        for _ in range(cfg.scans_per_subject):
            z = sub_rng.normal((cfg.latent_dim, cfg.timepoints))
            x = mixing @ z + cfg.noise * sub_rng.normal((cfg.regions, cfg.timepoints))
            bold.append(x)
            fcs.append(compute_fc(x, context=f"subject {s}"))
        sid = f"{cfg.subject_prefix}{s:04d}"
        records.append(SubjectRecord(sid, labels, [], fcs, bold))
    return Dataset(schema, records, cfg.regions)


# ---------------------------------------------------------------- file I/O

def _fmt(v: float) -> str:
    return repr(float(v))


def write_scan(path: str | Path, x: np.ndarray) -> None:
    x = np.asarray(x, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"region_{i}" for i in range(x.shape[0])])
        for t in range(x.shape[1]):
            w.writerow([t] + [_fmt(v) for v in x[:, t]])


def read_scan(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"scan file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0].strip() != "t":
        raise DataError(f"{path}: scan header must start with 't,region_0,...'")
    header = [h.strip() for h in rows[0]]
    expected = ["t"] + [f"region_{i}" for i in range(len(header) - 1)]
    if header != expected:
        raise DataError(f"{path}: malformed header {header[:4]}...")
    try:
        body = np.array([[float(v) for v in r[1:]] for r in rows[1:] if r], dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if body.ndim != 2 or body.shape[1] != len(header) - 1:
        raise DataError(f"{path}: ragged rows")
    return body.T.copy()


def save_fc(fc: np.ndarray, path: str | Path) -> None:
    fc = np.asarray(fc, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        for row in fc:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def load_fc(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"FC file not found: {path}")
    try:
        rows = [[float(v) for v in line.split(",")] for line in path.read_text(encoding="utf-8").splitlines() if line]
        fc = np.array(rows, dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if fc.ndim != 2 or fc.shape[0] != fc.shape[1]:
        raise DataError(f"{path}: FC must be square, got shape {fc.shape}")
    return fc


def _load_scan_any(path: Path) -> np.ndarray:
    if not path.exists():
        raise DataError(f"scan file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if first.split(",")[0].strip() == "t":
        return compute_fc(read_scan(path), context=str(path))
    return load_fc(path)


def load_dataset(manifest: str | Path) -> Dataset:
    manifest = Path(manifest)
    if not manifest.exists():
        raise DataError(f"manifest not found: {manifest}")
    try:
        obj = json.loads(manifest.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest}: invalid JSON ({exc})") from None
    for key in ("schema", "region_count", "records"):
        if key not in obj:
            raise DataError(f"{manifest}: missing field {key!r}")
    schema = PhenotypeSchema.from_json(obj["schema"])
    n = int(obj["region_count"])
    root = manifest.parent
    records = []
    for r in obj["records"]:
        sid = str(r["subject_id"])
        raw = r.get("labels", {})
        unknown = set(raw) - set(schema.names)
        if unknown:
            raise DataError(f"record {sid!r}: labels for unknown tasks {sorted(unknown)}")
        labels: dict[str, float | int | None] = {}
        for task in schema:
            v = raw.get(task.name, MISSING)
            if v is MISSING:
                labels[task.name] = MISSING
            elif task.categorical:
                if isinstance(v, float) and not v.is_integer():
                    raise DataError(f"record {sid!r}: non-integer class {v!r} for task {task.name!r}")
                try:
                    labels[task.name] = task.class_index(v)
                except DataError as exc:
                    raise DataError(f"record {sid!r}: {exc}") from None
            else:
                labels[task.name] = float(v)
        scans = [str(s) for s in r.get("scans", [])]
        fcs = []
        for s in scans:
            fc = _load_scan_any(root / s)
            if fc.shape != (n, n):
                raise DataError(f"record {sid!r}: scan {s} has {fc.shape[0]} regions, manifest says {n}")
            fcs.append(fc)
        records.append(SubjectRecord(sid, labels, scans, fcs))
    return Dataset(schema, records, n)


def save_dataset(dataset: Dataset, out_dir: str | Path, write_bold: bool = True) -> Path:
    """Write scans (BOLD when available, otherwise FC) and a manifest; return the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "scans").mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in dataset.records:
        paths = []
        for j, fc in enumerate(rec.fcs):
            if write_bold and rec.bold is not None:
                rel = f"scans/{rec.subject_id}_scan{j}.csv"
                write_scan(out_dir / rel, rec.bold[j])
            else:
                rel = f"scans/{rec.subject_id}_scan{j}_fc.csv"
                save_fc(fc, out_dir / rel)
            paths.append(rel)
        entries.append({"subject_id": rec.subject_id, "scans": paths,
                        "labels": {t.name: rec.labels.get(t.name, MISSING) for t in dataset.schema}})
    man = {"schema": dataset.schema.to_json(), "region_count": dataset.region_count, "records": entries}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(man, indent=1), encoding="utf-8")
    return path


def align_to_schema(dataset: Dataset, schema: PhenotypeSchema) -> Dataset:
    """Re-express ``dataset`` over ``schema``; tasks the data lacks become missing labels."""
    if dataset.schema == schema:
        return dataset
    for task in dataset.schema:
        if task.name not in schema.names:
            raise ConfigError(f"data task {task.name!r} is not part of the model schema {schema.names}")
        if schema.task(task.name) != task:
            raise ConfigError(f"task {task.name!r} differs between data and model")
    records = [SubjectRecord(r.subject_id, {t.name: r.labels.get(t.name, MISSING) for t in schema},
                             list(r.scans), list(r.fcs), r.bold) for r in dataset.records]
    return Dataset(schema, records, dataset.region_count)
