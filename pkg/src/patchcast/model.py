"""The full model: tokenizer + encoder trunk + decoder and forecast heads.

Parameters live in one flat, name-addressable dict of float64 tensors whose
values are always exactly representable in float32 (enforced at init and
after every optimizer update), so binary checkpoints round-trip bit-exactly.

A model is built for a fixed (context_len, horizon, n_vars) signature; the
flatten-style forecast heads consume the whole token sequence, so incoming
windows must match the configured context length.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from . import tokenizer as tok
from .autodiff import Tensor
from .data import TimeSeriesWindow, normalize_window
from .errors import DataError, UsageError

QUANTILE_LEVELS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


def quantize32(x: np.ndarray) -> np.ndarray:
    """Round float64 values onto the float32 grid (checkpoint-exact storage)."""
    return x.astype(np.float32).astype(np.float64)


@dataclass(frozen=True)
class ModelConfig:
    context_len: int = 128
    horizon: int = 16
    n_vars: int = 1
    scales: tuple[int, ...] = (8, 16, 32)
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    adapter_enabled: bool = True
    d_bottleneck: int = 0  # 0 -> d_model // 16, floored at 1
    proj_dim: int = 128

    def __post_init__(self):
        tok.validate_scales(self.scales)
        if self.context_len < self.scales[-1]:
            raise UsageError(
                f"context_len {self.context_len} shorter than coarsest patch {self.scales[-1]}"
            )
        if self.horizon < 1 or self.n_vars < 1:
            raise UsageError("horizon and n_vars must be >= 1")
        if self.d_bottleneck == 0:
            object.__setattr__(self, "d_bottleneck", max(1, self.d_model // 16))

    @property
    def n_tokens(self) -> int:
        return self.context_len // self.scales[0]

    def encoder_config(self) -> enc.EncoderConfig:
        return enc.EncoderConfig(
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            d_model=self.d_model,
            d_ff=self.d_ff,
            adapter_enabled=self.adapter_enabled,
            d_bottleneck=self.d_bottleneck,
        )


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    layers: list[enc.LayerParams] = field(default_factory=list)

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "Model":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
        m = cls(config=config)
        d = config.d_model
        k = len(config.scales)
        pd = config.scales[0] * config.n_vars

        for i, p in enumerate(config.scales):
            fan_in = p * config.n_vars
            m.params[f"embed.s{i}.weight"] = ad.parameter(enc._xavier(rng, fan_in, d))
            m.params[f"embed.s{i}.bias"] = ad.parameter(np.zeros(d))
        m.params["agg.logits"] = ad.parameter(np.zeros(k))
        m.params["mask.token"] = ad.parameter(rng.normal(0.0, 0.02, size=d))

        ecfg = config.encoder_config()
        for i in range(config.n_layers):
            layer = enc.init_layer(rng, ecfg)
            m.layers.append(layer)
            m.params.update(layer.named(f"enc.l{i}"))

        m.params["dec.weight"] = ad.parameter(enc._xavier(rng, d, pd))
        m.params["dec.bias"] = ad.parameter(np.zeros(pd))

        head_in = config.n_tokens * d
        out_pt = config.horizon * config.n_vars
        # Zero-init heads: an untrained model forecasts the context mean
        # once predictions are mapped back through the window statistics.
        m.params["head.point.weight"] = ad.parameter(np.zeros((head_in, out_pt)))
        m.params["head.point.bias"] = ad.parameter(np.zeros(out_pt))
        m.params["head.quantile.weight"] = ad.parameter(
            np.zeros((head_in, out_pt * len(QUANTILE_LEVELS)))
        )
        m.params["head.quantile.bias"] = ad.parameter(np.zeros(out_pt * len(QUANTILE_LEVELS)))

        m.params["proj.w1"] = ad.parameter(enc._xavier(rng, d, d))
        m.params["proj.b1"] = ad.parameter(np.zeros(d))
        m.params["proj.w2"] = ad.parameter(enc._xavier(rng, d, config.proj_dim))
        m.params["proj.b2"] = ad.parameter(np.zeros(config.proj_dim))

        for t in m.params.values():
            t.data = quantize32(t.data)
        return m

    def copy(self) -> "Model":
        m = Model(config=self.config)
        m.params = {name: ad.parameter(t.data.copy()) for name, t in self.params.items()}
        m._rebuild_layers()
        return m

    def _rebuild_layers(self) -> None:
        self.layers = []
        for i in range(self.config.n_layers):
            p = self.params
            pre = f"enc.l{i}"
            adapters = {}
            if self.config.adapter_enabled:
                for sub in ("attn_adapter", "ffn_adapter"):
                    adapters[sub] = enc.AdapterParams(
                        w_down=p[f"{pre}.{sub}.w_down"],
                        b_down=p[f"{pre}.{sub}.b_down"],
                        w_up=p[f"{pre}.{sub}.w_up"],
                        b_up=p[f"{pre}.{sub}.b_up"],
                    )
            self.layers.append(
                enc.LayerParams(
                    wq=p[f"{pre}.attn.wq"], bq=p[f"{pre}.attn.bq"],
                    wk=p[f"{pre}.attn.wk"], bk=p[f"{pre}.attn.bk"],
                    wv=p[f"{pre}.attn.wv"], bv=p[f"{pre}.attn.bv"],
                    wo=p[f"{pre}.attn.wo"], bo=p[f"{pre}.attn.bo"],
                    ln1_gain=p[f"{pre}.ln1.gain"], ln1_bias=p[f"{pre}.ln1.bias"],
                    w1=p[f"{pre}.ffn.w1"], b1=p[f"{pre}.ffn.b1"],
                    w2=p[f"{pre}.ffn.w2"], b2=p[f"{pre}.ffn.b2"],
                    ln2_gain=p[f"{pre}.ln2.gain"], ln2_bias=p[f"{pre}.ln2.bias"],
                    attn_adapter=adapters.get("attn_adapter"),
                    ffn_adapter=adapters.get("ffn_adapter"),
                )
            )

    # -- parameter bookkeeping ------------------------------------------------

    def param_names(self) -> list[str]:
        return sorted(self.params)

    def adapter_param_names(self) -> list[str]:
        return [n for n in self.param_names() if "adapter" in n]

    def head_param_names(self) -> list[str]:
        return [n for n in self.param_names() if n.startswith("head.")]

    def finetune_trainable_names(self) -> list[str]:
        """Adapter and head tensors; everything else is the frozen backbone."""
        return [n for n in self.param_names() if "adapter" in n or n.startswith("head.")]

    def checksum(self, names=None) -> str:
        h = hashlib.sha256()
        for name in sorted(names if names is not None else self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- forward pipelines ------------------------------------------------------

    def prepare_window(self, w: TimeSeriesWindow) -> TimeSeriesWindow:
        """Normalize on context statistics and zero out unobserved entries."""
        if w.context_len != self.config.context_len:
            raise DataError(
                f"window context length {w.context_len} != model context length "
                f"{self.config.context_len}"
            )
        if w.n_vars != self.config.n_vars:
            raise DataError(f"window has {w.n_vars} variables, model expects {self.config.n_vars}")
        wn = w if w.norm_state is not None else normalize_window(w)
        if not np.all(wn.missing_mask):
            values = np.where(wn.missing_mask, wn.values, 0.0)
            wn = replace(wn, values=values)
        return wn

    def heavily_missing_patches(self, w: TimeSeriesWindow, threshold: float = 0.5) -> np.ndarray:
        """Finest-grid patch indices whose missing fraction strictly exceeds the threshold."""
        grid = tok.patchify((~w.missing_mask).astype(np.float64), self.config.scales[0])
        frac = grid.flattened().mean(axis=1)
        return np.flatnonzero(frac > threshold)

    def tokenize(
        self,
        values: np.ndarray,
        mask_indices: np.ndarray | None = None,
    ) -> tok.TokenEmbedding:
        weights = [self.params[f"embed.s{i}.weight"] for i in range(len(self.config.scales))]
        biases = [self.params[f"embed.s{i}.bias"] for i in range(len(self.config.scales))]
        return tok.multiscale_tokenize(
            values,
            weights,
            biases,
            self.params["agg.logits"],
            self.config.scales,
            mask_indices=mask_indices,
            mask_token=self.params["mask.token"],
        )

    def encode(self, tokens: Tensor) -> Tensor:
        return enc.encoder_forward(tokens, self.config.encoder_config(), self.layers)

    def encode_window(
        self,
        w: TimeSeriesWindow,
        *,
        mask_indices: np.ndarray | None = None,
        missing_strategy: str = "mask_token",
    ) -> tuple[Tensor, TimeSeriesWindow]:
        """prepare -> tokenize -> encode; returns hidden states + prepared window.

        missing_strategy: "mask_token" substitutes the learned mask embedding
        for patches that are mostly unobserved; "zero_fill" relies on the
        zero-filled values alone.
        """
        wn = self.prepare_window(w)
        indices = mask_indices
        if missing_strategy == "mask_token":
            heavy = self.heavily_missing_patches(wn)
            if heavy.size:
                indices = heavy if indices is None else np.union1d(indices, heavy)
        elif missing_strategy != "zero_fill":
            raise UsageError(f"unknown missing strategy {missing_strategy!r}")
        embedding = self.tokenize(wn.values, mask_indices=indices)
        return self.encode(embedding.tokens), wn

    def decode_patches(self, hidden: Tensor, rows: np.ndarray) -> Tensor:
        """Per-token linear reconstruction of finest-scale patch values."""
        picked = hidden.take(np.asarray(rows, dtype=np.intp), axis=0)
        return picked @ self.params["dec.weight"] + self.params["dec.bias"]

    def point_forecast(self, hidden: Tensor) -> Tensor:
        flat = hidden.reshape(1, hidden.size)
        out = flat @ self.params["head.point.weight"] + self.params["head.point.bias"]
        return out.reshape(self.config.horizon, self.config.n_vars)

    def quantile_forecast(self, hidden: Tensor) -> Tensor:
        flat = hidden.reshape(1, hidden.size)
        out = flat @ self.params["head.quantile.weight"] + self.params["head.quantile.bias"]
        return out.reshape(self.config.horizon, self.config.n_vars, len(QUANTILE_LEVELS))

    def project(self, hidden: Tensor) -> Tensor:
        """Mean-pool tokens and map through the contrastive projection head."""
        pooled = hidden.mean(axis=0, keepdims=True)
        h = (pooled @ self.params["proj.w1"] + self.params["proj.b1"]).relu()
        return h @ self.params["proj.w2"] + self.params["proj.b2"]

    # -- bookkeeping helpers ------------------------------------------------------

    def count_params(self, trainable=None) -> dict:
        if trainable is None:
            trainable = lambda name: True
        return enc.count_params(self.params, trainable)

    def expected_tensor_count(self) -> int:
        """Closed-form number of named tensors for this configuration."""
        per_layer = 16 + (8 if self.config.adapter_enabled else 0)
        return (
            2 * len(self.config.scales)  # embedders
            + 1  # aggregation logits
            + 1  # mask token
            + per_layer * self.config.n_layers
            + 2  # decoder
            + 4  # point + quantile heads
            + 4  # projection head
        )
