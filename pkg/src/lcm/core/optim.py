"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from .tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"step": self.step,
                "m": [{"shape": list(a.shape), "values": a.reshape(-1).tolist()} for a in self.m],
                "v": [{"shape": list(a.shape), "values": a.reshape(-1).tolist()} for a in self.v]}

    @classmethod
    def from_json(cls, obj: dict) -> "AdamState":
        def arr(e):
            return np.array(e["values"], dtype=np.float64).reshape(e["shape"])
        return cls(step=int(obj["step"]), m=[arr(e) for e in obj["m"]], v=[arr(e) for e in obj["v"]])


def adam_step(params: list[Tensor], state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """Advance ``state`` by one step and update ``params`` in place."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ConfigError(f"optimizer state holds {len(state.m)} moments for {len(params)} parameters")
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.state = AdamState()

    def step(self) -> None:
        adam_step(self.params, self.state, self.lr, self.betas, self.eps)
