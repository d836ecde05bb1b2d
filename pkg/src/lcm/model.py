"""Decoder-only connectome model.

A learnable token table ``V`` (P x D, P = total class tokens of the schema)
passes through ``L`` identical layers. Each layer runs three pre-norm
residual sub-blocks in order: token self-attention, token-to-region
cross-attention against the FC matrix, and a GELU feed-forward block. One
linear readout ``D -> 1`` shared by all layers turns every layer's tokens
into a P-vector of logits, which the schema offsets cut into per-task
predictions.

Inputs may be a single FC matrix (N x N) or a batch (B x N x N); the token
table is broadcast over the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .core import ops
from .core.rng import Rng
from .core.tensor import ShapeError, Tensor
from .data import PhenotypeSchema
from .errors import ConfigError

NEG_INF = -1e30


@dataclass
class ModelConfig:
    layers: int
    heads: int
    dim: int
    regions: int
    schema: PhenotypeSchema
    ffn_factor: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if self.regions < 1:
            raise ConfigError("regions must be >= 1")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.ffn_factor < 1:
            raise ConfigError("ffn_factor must be >= 1")

    @property
    def token_dim(self) -> int:
        # token width E is tied to the hidden width D
        return self.dim

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def tokens(self) -> int:
        return self.schema.total_tokens

    def to_json(self) -> dict:
        return {"layers": self.layers, "heads": self.heads, "dim": self.dim, "regions": self.regions,
                "ffn_factor": self.ffn_factor, "init_std": self.init_std}

    @classmethod
    def from_json(cls, obj: dict, schema: PhenotypeSchema) -> "ModelConfig":
        return cls(int(obj["layers"]), int(obj["heads"]), int(obj["dim"]), int(obj["regions"]), schema,
                   int(obj.get("ffn_factor", 4)), float(obj.get("init_std", 0.02)))


def layer_shapes(dim: int, regions: int, ffn_factor: int) -> dict[str, tuple[int, ...]]:
    d, n, h = dim, regions, ffn_factor * dim
    return {
        "ln_self.gain": (d,), "ln_self.bias": (d,),
        "self.q.weight": (d, d), "self.q.bias": (d,),
        "self.k.weight": (d, d), "self.k.bias": (d,),
        "self.v.weight": (d, d), "self.v.bias": (d,),
        "self.out.weight": (d, d), "self.out.bias": (d,),
        "ln_cross.gain": (d,), "ln_cross.bias": (d,),
        "cross.q.weight": (n, d), "cross.q.bias": (d,),
        "cross.k.weight": (d, d), "cross.k.bias": (d,),
        "cross.v.weight": (n, d), "cross.v.bias": (d,),
        "cross.out.weight": (d, d), "cross.out.bias": (d,),
        "ln_ffn.gain": (d,), "ln_ffn.bias": (d,),
        "ffn.up.weight": (d, h), "ffn.up.bias": (h,),
        "ffn.down.weight": (h, d), "ffn.down.bias": (d,),
    }


def parameter_count(layers: int, heads: int, dim: int, regions: int, tokens: int, ffn_factor: int = 4) -> int:
    """Closed form: ``P*D + (D+1) + L*((6+2f)*D^2 + (2N + 15 + f)*D)``.

    Per layer: three norms (6D), self-attention (4D^2 + 4D), cross-attention
    (2D^2 + 2ND + 4D), feed-forward (2fD^2 + fD + D). ``heads`` does not enter
    because heads split the width.
    """
    del heads
    d, n, f = dim, regions, ffn_factor
    per_layer = (6 + 2 * f) * d * d + (2 * n + 15 + f) * d
    return tokens * d + d + 1 + layers * per_layer


class LcmModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        if params is None:
            params = self._init_params(Rng(seed, "init"))
        self.params: dict[str, Tensor] = params
        self._check_shapes()

    # --------------------------------------------------------- parameters

    def _init_params(self, rng: Rng) -> dict[str, Tensor]:
        c = self.config
        std = c.init_std
        params = {"tokens": Tensor(rng.child("tokens").normal((c.tokens, c.dim), std), True, "tokens")}
        shapes = layer_shapes(c.dim, c.regions, c.ffn_factor)
        for layer in range(c.layers):
            lrng = rng.child(f"layer{layer}")
            for name, shape in shapes.items():
                full = f"layers.{layer}.{name}"
                if name.endswith(".weight"):
                    value = lrng.child(name).normal(shape, std)
                elif name.endswith(".gain"):
                    value = np.ones(shape)
                else:
                    value = np.zeros(shape)
                params[full] = Tensor(value, True, full)
        params["readout.weight"] = Tensor(rng.child("readout").normal((c.dim, 1), std), True, "readout.weight")
        params["readout.bias"] = Tensor(np.zeros(1), True, "readout.bias")
        return params

    def _check_shapes(self) -> None:
        c = self.config
        expected = {"tokens": (c.tokens, c.dim), "readout.weight": (c.dim, 1), "readout.bias": (1,)}
        for layer in range(c.layers):
            for name, shape in layer_shapes(c.dim, c.regions, c.ffn_factor).items():
                expected[f"layers.{layer}.{name}"] = shape
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ShapeError(f"parameter set mismatch (missing {missing[:3]}, unexpected {extra[:3]})")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {self.params[name].shape}")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def layer_params(self, layer: int) -> dict[str, Tensor]:
        prefix = f"layers.{layer}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def copy(self) -> "LcmModel":
        return LcmModel(self.config, {k: Tensor(v.data, True, k) for k, v in self.params.items()})

    # ------------------------------------------------------------ forward

    def forward(self, fc, attention_mask: np.ndarray | None = None,
                capture: dict | None = None) -> "PerLayerPredictions":
        """Run every layer and read out each layer's tokens.

        ``attention_mask`` is a boolean (P, P) array; ``False`` at (q, k)
        stops token q attending to token k in self-attention. When
        ``capture`` is a dict, cross-attention weights of layer l are stored
        under key l as a (B, H, P, N) array.
        """
        c = self.config
        m = fc if isinstance(fc, Tensor) else Tensor(fc)
        single = m.ndim == 2
        if single:
            m = ops.reshape(m, (1,) + m.shape)
        if m.ndim != 3 or m.shape[1:] != (c.regions, c.regions):
            raise ShapeError(f"model expects FC of shape ({c.regions}, {c.regions}), got {tuple(m.shape[1:])}")
        batch = m.shape[0]
        v = ops.broadcast_to(self.params["tokens"], (batch, c.tokens, c.dim))
        w, b = self.params["readout.weight"], self.params["readout.bias"]
        outputs = []
        for layer in range(c.layers):
            layer_capture = {} if capture is not None else None
            v = layer_forward(v, m, self.layer_params(layer), c.heads, attention_mask, layer_capture)
            if capture is not None:
                capture[layer] = layer_capture["cross"]
            outputs.append(readout(v, w, b))
        return PerLayerPredictions(outputs, self.config.schema, single)

    __call__ = forward


def readout(v: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    out = ops.add(ops.matmul(v, weight), bias)
    return ops.reshape(out, out.shape[:-1])


@dataclass
class PerLayerPredictions:
    """Readout vectors of every layer, each shaped (B, P)."""

    layers: list[Tensor]
    schema: PhenotypeSchema
    single: bool = False
    _offsets: list[int] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._offsets = self.schema.offsets

    def __len__(self) -> int:
        return len(self.layers)

    def task(self, layer: int, task: int) -> Tensor:
        """Layer ``layer`` (0-based) predictions of task ``task``: (B, n_classes)."""
        lo, hi = self._offsets[task], self._offsets[task + 1]
        return ops.getitem(self.layers[layer], (slice(None), slice(lo, hi)))

    def values(self, layer: int, task: int) -> np.ndarray:
        out = self.task(layer, task).data
        return out[0] if self.single else out


# -------------------------------------------------------------- attention

def split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return ops.transpose(ops.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def linear(x: Tensor, p: dict[str, Tensor], name: str) -> Tensor:
    return ops.add(ops.matmul(x, p[f"{name}.weight"]), p[f"{name}.bias"])


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return ops.reshape(x, (1,) + x.shape), True
    return x, False


def token_self_attention(v: Tensor, p: dict[str, Tensor], heads: int,
                         attention_mask: np.ndarray | None = None) -> Tensor:
    """Multi-head attention of tokens over tokens; returns the merged output, no residual."""
    v, squeeze = _batched(v)
    q, k, val = (split_heads(linear(v, p, f"self.{n}"), heads) for n in ("q", "k", "v"))
    scores = ops.scale(ops.matmul(q, ops.swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    if attention_mask is not None:
        mask = np.asarray(attention_mask, dtype=bool)
        if mask.shape != scores.shape[-2:]:
            raise ShapeError(f"attention mask shape {mask.shape} does not match {scores.shape[-2:]}")
        scores = ops.add(scores, Tensor(np.where(mask, 0.0, NEG_INF)))
    weights = ops.softmax(scores, axis=-1)
    out = linear(merge_heads(ops.matmul(weights, val)), p, "self.out")
    return ops.reshape(out, out.shape[1:]) if squeeze and out.shape[0] == 1 else out


def region_token_cross_attention(v: Tensor, m: Tensor, p: dict[str, Tensor], heads: int,
                                 capture: dict | None = None) -> Tensor:
    """Tokens gather region features of the FC matrix; no residual.

    Logits are (regions x tokens) and are normalised over the region axis, so
    after transposing every token holds a distribution over regions.
    """
    v, squeeze = _batched(v)
    m = m if isinstance(m, Tensor) else Tensor(m)
    m, _ = _batched(m)
    if m.shape[-1] != p["cross.q.weight"].shape[0]:
        raise ShapeError(f"FC has {m.shape[-1]} regions, layer expects {p['cross.q.weight'].shape[0]}")
    q = split_heads(linear(m, p, "cross.q"), heads)          # B,H,N,dh
    k = split_heads(linear(v, p, "cross.k"), heads)          # B,H,P,dh
    val = split_heads(linear(m, p, "cross.v"), heads)        # B,H,N,dh
    logits = ops.scale(ops.matmul(q, ops.swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    weights = ops.swap_last(ops.softmax(logits, axis=-2))    # B,H,P,N
    if capture is not None:
        capture["cross"] = weights.data.copy()
    out = linear(merge_heads(ops.matmul(weights, val)), p, "cross.out")
    return ops.reshape(out, out.shape[1:]) if squeeze and out.shape[0] == 1 else out


def feed_forward(v: Tensor, p: dict[str, Tensor]) -> Tensor:
    return linear(ops.gelu(linear(v, p, "ffn.up")), p, "ffn.down")


def self_attention_block(v, p, heads, attention_mask=None):
    h = ops.layer_norm(v, p["ln_self.gain"], p["ln_self.bias"])
    return ops.add(v, token_self_attention(h, p, heads, attention_mask))


def cross_attention_block(v, m, p, heads, capture=None):
    h = ops.layer_norm(v, p["ln_cross.gain"], p["ln_cross.bias"])
    return ops.add(v, region_token_cross_attention(h, m, p, heads, capture))


def feed_forward_block(v, p):
    h = ops.layer_norm(v, p["ln_ffn.gain"], p["ln_ffn.bias"])
    return ops.add(v, feed_forward(h, p))


def layer_forward(v: Tensor, m: Tensor, p: dict[str, Tensor], heads: int,
                  attention_mask: np.ndarray | None = None, capture: dict | None = None) -> Tensor:
    v = self_attention_block(v, p, heads, attention_mask)
    v = cross_attention_block(v, m, p, heads, capture)
    return feed_forward_block(v, p)


def export_cross_attention(model: LcmModel, fc, layer: int, head_average: bool = True) -> dict[str, np.ndarray]:
    """Token-to-region weights of 1-based ``layer``, keyed by task name.

    Each entry has shape (..., n_classes, N) (with a head axis before the
    token axis when ``head_average`` is False); rows sum to one.
    """
    if not 1 <= layer <= model.config.layers:
        raise ConfigError(f"layer index {layer} outside [1, {model.config.layers}]")
    from .core.tensor import no_grad

    capture: dict = {}
    with no_grad():
        model.forward(fc, capture=capture)
    weights = capture[layer - 1]                      # B,H,P,N
    if head_average:
        weights = weights.mean(axis=1)                # B,P,N
    if np.asarray(fc if not isinstance(fc, Tensor) else fc.data).ndim == 2:
        weights = weights[0]
    offsets = model.config.schema.offsets
    return {t.name: weights[..., offsets[i]:offsets[i + 1], :]
            for i, t in enumerate(model.config.schema)}
