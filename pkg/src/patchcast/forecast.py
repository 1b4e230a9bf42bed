"""Prediction heads in use: zero-shot inference, adapter fine-tuning, pinball.

The zero-shot path is normalize -> tokenize -> encode -> heads -> denormalize
with no masking and no parameter mutation. Quantile crossing is repaired by
per-coordinate sorting of the raw head outputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import TimeSeriesWindow, denormalize_values
from .errors import DataError, UsageError
from .model import Model, QUANTILE_LEVELS
from .optim import AdamW, lr_at_step

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ForecastResult:
    """Point and quantile forecasts in original (denormalized) units."""

    point: np.ndarray  # (H, D)
    quantiles: np.ndarray  # (H, D, Q), nondecreasing along the last axis
    window_id: str = ""
    horizon: int = 0
    levels: tuple[float, ...] = QUANTILE_LEVELS

    def __post_init__(self):
        if not np.all(np.isfinite(self.point)) or not np.all(np.isfinite(self.quantiles)):
            raise DataError(f"non-finite forecast for window {self.window_id!r}")


def zero_shot_forecast(
    model: Model, w: TimeSeriesWindow, *, missing_strategy: str = "mask_token"
) -> ForecastResult:
    """Forecast a window with the pretrained model only; read-only and deterministic."""
    hidden, wn = model.encode_window(w, missing_strategy=missing_strategy)
    point = model.point_forecast(hidden).data
    quantiles = model.quantile_forecast(hidden).data
    mean, std = wn.norm_state
    point = denormalize_values(point, (mean, std))
    quantiles = quantiles * std[None, :, None] + mean[None, :, None]
    quantiles = np.sort(quantiles, axis=-1)
    return ForecastResult(
        point=point,
        quantiles=quantiles,
        window_id=wn.name,
        horizon=model.config.horizon,
    )


def forecast_many(
    model: Model,
    windows: list[TimeSeriesWindow],
    *,
    missing_strategy: str = "mask_token",
    max_workers: int = 1,
) -> list[ForecastResult]:
    """Forecast a batch of windows; inference is read-only so threads are safe."""
    if max_workers > 1 and len(windows) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(
                pool.map(lambda w: zero_shot_forecast(model, w, missing_strategy=missing_strategy), windows)
            )
    return [zero_shot_forecast(model, w, missing_strategy=missing_strategy) for w in windows]


def pinball_loss(pred_quantiles, target, levels=QUANTILE_LEVELS):
    """Mean quantile (pinball) loss over every (step, variable, level) element.

    Accepts arrays (returns float) or an autodiff tensor for training.
    """
    levels = tuple(levels)
    if any(not 0.0 < q < 1.0 for q in levels):
        raise UsageError(f"quantile levels must lie in (0, 1), got {levels}")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise UsageError(f"quantile levels must be strictly increasing, got {levels}")

    if isinstance(pred_quantiles, Tensor):
        target_t = ad.constant(np.asarray(target)[..., None])
        lv = ad.constant(np.asarray(levels))
        under = (target_t - pred_quantiles).relu()
        over = (pred_quantiles - target_t).relu()
        return (lv * under + (1.0 - lv) * over).mean()

    pred = np.asarray(pred_quantiles, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)[..., None]
    lv = np.asarray(levels)
    if pred.shape[:-1] != tgt.shape[:-1] or pred.shape[-1] != lv.size:
        raise UsageError(f"quantile shape {pred.shape} incompatible with target {tgt.shape[:-1]}")
    loss = lv * np.maximum(tgt - pred, 0.0) + (1.0 - lv) * np.maximum(pred - tgt, 0.0)
    return float(loss.mean())


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 200
    batch_size: int = 8
    seed: int = 0
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.05
    weight_decay: float = 0.01
    pinball_weight: float = 1.0


def _supervised_batch_loss(model: Model, batch: list[TimeSeriesWindow], pinball_weight: float) -> Tensor:
    terms: list[Tensor] = []
    for w in batch:
        if w.target is None:
            raise DataError(f"window {w.name!r} has no target; cannot train supervised")
        hidden, wn = model.encode_window(w)
        point = model.point_forecast(hidden)
        diff = point - ad.constant(wn.target)
        loss = (diff * diff).mean()
        if pinball_weight > 0:
            q = model.quantile_forecast(hidden)
            loss = loss + pinball_weight * pinball_loss(q, wn.target)
        terms.append(loss)
    return sum(terms[1:], terms[0]) * (1.0 / len(terms))


def _train(
    model: Model,
    windows: list[TimeSeriesWindow],
    config: FinetuneConfig,
    trainable: list[str] | None,
) -> Model:
    if not windows:
        raise DataError("empty training set")
    out = model.copy()
    if config.steps == 0:
        return out
    names = trainable if trainable is not None else out.param_names()
    if not names:
        raise UsageError("no trainable parameters")
    opt = AdamW(out.params, trainable=names, weight_decay=config.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xF17]))
    for step in range(config.steps):
        idx = rng.choice(len(windows), size=min(config.batch_size, len(windows)), replace=False)
        out.zero_grad()
        loss = _supervised_batch_loss(out, [windows[i] for i in idx], config.pinball_weight)
        loss.backward()
        opt.step(lr_at_step(step, config.steps, config.peak_lr, config.warmup_fraction))
    return out


def finetune_adapters(model: Model, windows: list[TimeSeriesWindow], config: FinetuneConfig) -> Model:
    """Fine-tune adapters + heads on labeled windows; the backbone stays frozen.

    Returns a new model; the input model is never mutated, and the frozen
    parameter set of the result is bitwise identical to the input.
    """
    if not model.config.adapter_enabled:
        raise UsageError("adapters are disabled in this model configuration")
    return _train(model, windows, config, model.finetune_trainable_names())


def train_supervised(model: Model, windows: list[TimeSeriesWindow], config: FinetuneConfig) -> Model:
    """Train every parameter on labeled windows (the from-scratch baseline)."""
    return _train(model, windows, config, None)


def forecasts_to_csv(results: list[ForecastResult], path) -> None:
    """columns: window_id, h, variable, point, q10..q90."""
    header = "window_id,h,variable,point," + ",".join(
        f"q{int(round(q * 100))}" for q in QUANTILE_LEVELS
    )
    lines = [header]
    for r in results:
        H, D = r.point.shape
        for h in range(H):
            for d in range(D):
                qs = ",".join(repr(float(v)) for v in r.quantiles[h, d])
                lines.append(f"{r.window_id},{h},{d},{float(r.point[h, d])!r},{qs}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
