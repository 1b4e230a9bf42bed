"""Transformer trunk: post-norm self-attention blocks with optional adapters.

Residual order is taken literally from the model equations: each sublayer
computes ``Z <- LayerNorm(Z + Sublayer(Z))``. When adapters are enabled, a
bottleneck adapter is applied to the residual sum of each sublayer, before
that sublayer's LayerNorm. Adapter up-projections are zero-initialized so a
fresh adapter is an exact identity.

Attention is bidirectional (no causal mask): the trunk serves a
masked-reconstruction objective that needs context on both sides.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError, UsageError

# Multiply-accumulates of the score (QK^T) and value-mix (AV) matmuls,
# at 2 flops per MAC: flops = 4 * N^2 * d with N = L / P.
ATTENTION_FLOP_COEFF = 4.0


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    adapter_enabled: bool = False
    d_bottleneck: int = 0  # 0 means the default d_model // 16, floored at 1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise UsageError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_layers < 1:
            raise UsageError("need at least one encoder layer")
        if self.d_bottleneck == 0:
            object.__setattr__(self, "d_bottleneck", max(1, self.d_model // 16))
        if self.d_bottleneck < 1:
            raise UsageError("d_bottleneck must be >= 1")


# Reference bookkeeping configuration used for the parameter-economy checks.
BASE_CONFIG = EncoderConfig(n_layers=12, n_heads=8, d_model=512, d_ff=2048, adapter_enabled=True)

# Desk-scale default used throughout the examples and CLI.
DESK_CONFIG = EncoderConfig(n_layers=4, n_heads=4, d_model=64, d_ff=256, adapter_enabled=True)


@dataclass
class AdapterParams:
    w_down: Tensor
    b_down: Tensor
    w_up: Tensor
    b_up: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w_down": self.w_down,
            f"{prefix}.b_down": self.b_down,
            f"{prefix}.w_up": self.w_up,
            f"{prefix}.b_up": self.b_up,
        }


@dataclass
class LayerParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    attn_adapter: AdapterParams | None = None
    ffn_adapter: AdapterParams | None = None

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {
            f"{prefix}.attn.wq": self.wq,
            f"{prefix}.attn.bq": self.bq,
            f"{prefix}.attn.wk": self.wk,
            f"{prefix}.attn.bk": self.bk,
            f"{prefix}.attn.wv": self.wv,
            f"{prefix}.attn.bv": self.bv,
            f"{prefix}.attn.wo": self.wo,
            f"{prefix}.attn.bo": self.bo,
            f"{prefix}.ln1.gain": self.ln1_gain,
            f"{prefix}.ln1.bias": self.ln1_bias,
            f"{prefix}.ffn.w1": self.w1,
            f"{prefix}.ffn.b1": self.b1,
            f"{prefix}.ffn.w2": self.w2,
            f"{prefix}.ffn.b2": self.b2,
            f"{prefix}.ln2.gain": self.ln2_gain,
            f"{prefix}.ln2.bias": self.ln2_bias,
        }
        if self.attn_adapter is not None:
            out.update(self.attn_adapter.named(f"{prefix}.attn_adapter"))
        if self.ffn_adapter is not None:
            out.update(self.ffn_adapter.named(f"{prefix}.ffn_adapter"))
        return out


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_adapter(rng: np.random.Generator, d_model: int, d_bottleneck: int) -> AdapterParams:
    """Zero-initialized up-projection: a fresh adapter is an exact identity."""
    return AdapterParams(
        w_down=ad.parameter(_xavier(rng, d_model, d_bottleneck)),
        b_down=ad.parameter(np.zeros(d_bottleneck)),
        w_up=ad.parameter(np.zeros((d_bottleneck, d_model))),
        b_up=ad.parameter(np.zeros(d_model)),
    )


def init_layer(rng: np.random.Generator, config: EncoderConfig) -> LayerParams:
    d, f = config.d_model, config.d_ff
    layer = LayerParams(
        wq=ad.parameter(_xavier(rng, d, d)),
        bq=ad.parameter(np.zeros(d)),
        wk=ad.parameter(_xavier(rng, d, d)),
        bk=ad.parameter(np.zeros(d)),
        wv=ad.parameter(_xavier(rng, d, d)),
        bv=ad.parameter(np.zeros(d)),
        wo=ad.parameter(_xavier(rng, d, d)),
        bo=ad.parameter(np.zeros(d)),
        ln1_gain=ad.parameter(np.ones(d)),
        ln1_bias=ad.parameter(np.zeros(d)),
        w1=ad.parameter(_xavier(rng, d, f)),
        b1=ad.parameter(np.zeros(f)),
        w2=ad.parameter(_xavier(rng, f, d)),
        b2=ad.parameter(np.zeros(d)),
        ln2_gain=ad.parameter(np.ones(d)),
        ln2_bias=ad.parameter(np.zeros(d)),
    )
    if config.adapter_enabled:
        layer.attn_adapter = init_adapter(rng, d, config.d_bottleneck)
        layer.ffn_adapter = init_adapter(rng, d, config.d_bottleneck)
    return layer


def adapter_forward(h: Tensor, adapter: AdapterParams) -> Tensor:
    """Bottleneck residual: W_up(ReLU(W_down(h))) + h."""
    if adapter.w_down.shape[0] != h.shape[-1]:
        raise UsageError(
            f"adapter expects width {adapter.w_down.shape[0]}, got {h.shape[-1]}"
        )
    inner = (h @ adapter.w_down + adapter.b_down).relu()
    return inner @ adapter.w_up + adapter.b_up + h


def multi_head_attention(
    tokens: Tensor, layer: LayerParams, n_heads: int, return_probs: bool = False
):
    """Bidirectional softmax attention over the token sequence."""
    n, d = tokens.shape
    if d % n_heads != 0:
        raise UsageError(f"token width {d} not divisible by {n_heads} heads")
    dh = d // n_heads

    def split(x: Tensor) -> Tensor:
        return x.reshape(n, n_heads, dh).transpose(1, 0, 2)

    q = split(tokens @ layer.wq + layer.bq)
    k = split(tokens @ layer.wk + layer.bk)
    v = split(tokens @ layer.wv + layer.bv)

    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(dh))
    probs = ad.softmax(scores, axis=-1)
    mixed = probs @ v
    merged = mixed.transpose(1, 0, 2).reshape(n, d)
    out = merged @ layer.wo + layer.bo
    if return_probs:
        return out, probs.data
    return out


def encoder_forward(tokens: Tensor, config: EncoderConfig, layers: list[LayerParams]) -> Tensor:
    """Run the full trunk; raises NumericError naming the offending layer."""
    if tokens.shape[-1] != config.d_model:
        raise UsageError(f"tokens width {tokens.shape[-1]} != d_model {config.d_model}")
    if len(layers) != config.n_layers:
        raise UsageError(f"{len(layers)} layer params for {config.n_layers} configured layers")
    z = tokens
    for i, layer in enumerate(layers):
        h = z + multi_head_attention(z, layer, config.n_heads)
        if config.adapter_enabled and layer.attn_adapter is not None:
            h = adapter_forward(h, layer.attn_adapter)
        z = ad.layer_norm(h, layer.ln1_gain, layer.ln1_bias)

        h = z + ((z @ layer.w1 + layer.b1).relu() @ layer.w2 + layer.b2)
        if config.adapter_enabled and layer.ffn_adapter is not None:
            h = adapter_forward(h, layer.ffn_adapter)
        z = ad.layer_norm(h, layer.ln2_gain, layer.ln2_bias)

        if not np.all(np.isfinite(z.data)):
            raise NumericError(f"non-finite activations after encoder layer {i}")
    return z


def count_params(params: dict[str, Tensor | np.ndarray], trainable) -> dict:
    """Exact parameter census: total, trainable, and the trainable fraction.

    ``trainable`` is a predicate on parameter names (or an iterable of names).
    """
    if not callable(trainable):
        names = set(trainable)
        trainable = names.__contains__
    total = 0
    trained = 0
    for name, p in params.items():
        size = int(p.data.size if isinstance(p, Tensor) else np.asarray(p).size)
        total += size
        if trainable(name):
            trained += size
    return {
        "total": total,
        "trainable": trained,
        "fraction": trained / total if total else 0.0,
    }


def layer_param_count(config: EncoderConfig) -> int:
    """Closed-form parameter count of one encoder layer."""
    d, f, b = config.d_model, config.d_ff, config.d_bottleneck
    attn = 4 * (d * d + d)
    ffn = d * f + f + f * d + d
    norms = 2 * 2 * d
    adapters = 2 * (d * b + b + b * d + d) if config.adapter_enabled else 0
    return attn + ffn + norms + adapters


def adapter_param_count(config: EncoderConfig) -> int:
    d, b = config.d_model, config.d_bottleneck
    per_adapter = d * b + b + b * d + d
    return 2 * per_adapter * config.n_layers if config.adapter_enabled else 0


def attention_flops(L: float, P: float, d: float) -> float:
    """Analytic attention-stage flops for context length L at patch size P."""
    n = L / P
    return ATTENTION_FLOP_COEFF * n * n * d


def full_sequence_attention_flops(L: float, d: float) -> float:
    """Flops of raw per-timestep attention, the P=1 special case."""
    return attention_flops(L, 1.0, d)
