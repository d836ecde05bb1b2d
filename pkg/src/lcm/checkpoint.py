"""JSON checkpoints.

Tensors are stored as ``{"name", "shape", "values"}`` with row-major values
written via ``repr`` floats, so a save/load cycle is bit-exact.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core.optim import AdamState
from .core.tensor import Tensor
from .data import PhenotypeSchema
from .errors import DataError
from .model import LcmModel, ModelConfig

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer: AdamState | None = None
    histograms: dict[str, list[int]] = field(default_factory=dict)
    scaler: dict[str, list[float]] = field(default_factory=dict)
    train_state: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def schema(self) -> PhenotypeSchema:
        return self.config.schema

    @classmethod
    def from_model(cls, model: LcmModel, **kw) -> "Checkpoint":
        return cls(model.config, {k: v.data.copy() for k, v in model.params.items()}, **kw)

    def model(self) -> LcmModel:
        return LcmModel(self.config, {k: Tensor(v, True, k) for k, v in self.params.items()})

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "config": self.config.to_json(),
            "schema": self.config.schema.to_json(),
            "tensors": [{"name": k, "shape": list(v.shape), "values": v.reshape(-1).tolist()}
                        for k, v in self.params.items()],
            "optimizer": self.optimizer.to_json() if self.optimizer is not None else None,
            "histograms": self.histograms,
            "scaler": self.scaler,
            "train_state": self.train_state,
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Checkpoint":
        version = obj.get("format_version")
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint format_version {version!r}")
        schema = PhenotypeSchema.from_json(obj["schema"])
        config = ModelConfig.from_json(obj["config"], schema)
        params = {t["name"]: np.array(t["values"], dtype=np.float64).reshape(t["shape"]) for t in obj["tensors"]}
        opt = AdamState.from_json(obj["optimizer"]) if obj.get("optimizer") else None
        return cls(config, params, opt, {k: [int(c) for c in v] for k, v in obj.get("histograms", {}).items()},
                   obj.get("scaler", {}), obj.get("train_state", {}), obj.get("provenance", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise DataError(f"checkpoint not found: {path}")
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_json(obj)
