"""Metrics, robustness sweeps, transfer/few-shot/scaling runners, attention bench.

All metrics are computed in original (denormalized) units and aggregated in
a fixed order so reports are bit-reproducible. Experiment runners fix their
evaluation windows before any training happens.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from .data import SyntheticSpec, TimeSeriesWindow, generate_synthetic, inject_missing, make_windows
from .encoder import attention_flops
from .errors import DataError, UsageError
from .forecast import (
    FinetuneConfig,
    ForecastResult,
    finetune_adapters,
    forecast_many,
    pinball_loss,
    train_supervised,
)
from .model import Model, ModelConfig, QUANTILE_LEVELS
from .pretrain import PretrainConfig, TeacherModel, fit_teacher, run_pretraining

logger = logging.getLogger(__name__)


def worker_count() -> int:
    """Worker parallelism cap: PF_THREADS when set, else the machine core count."""
    env = os.environ.get("PF_THREADS", "").strip()
    cores = os.cpu_count() or 1
    if not env:
        return cores
    try:
        n = int(env)
    except ValueError:
        raise UsageError(f"PF_THREADS must be an integer, got {env!r}") from None
    return max(1, min(n, cores))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    mse: float
    mae: float
    rmse: float
    pinball: float
    crps: float
    coverage80: float
    n_windows: int


def compute_metrics(results: list[ForecastResult], targets: list[np.ndarray]) -> MetricReport:
    """Element-averaged point and probabilistic metrics over all (window, h, d)."""
    if not results:
        raise DataError("no forecasts to evaluate")
    if len(results) != len(targets):
        raise DataError(f"{len(results)} forecasts for {len(targets)} targets")
    sq = ab = pb = 0.0
    covered = 0
    count = 0
    q_lo = QUANTILE_LEVELS.index(0.1)
    q_hi = QUANTILE_LEVELS.index(0.9)
    for r, y in zip(results, targets):
        y = np.asarray(y, dtype=np.float64)
        if y.shape != r.point.shape:
            raise DataError(f"target shape {y.shape} != forecast shape {r.point.shape}")
        err = r.point - y
        sq += float(np.sum(err * err))
        ab += float(np.sum(np.abs(err)))
        pb += pinball_loss(r.quantiles, y) * y.size
        covered += int(np.sum((y >= r.quantiles[..., q_lo]) & (y <= r.quantiles[..., q_hi])))
        count += y.size
    mse = sq / count
    pinball = pb / count
    return MetricReport(
        mse=mse,
        mae=ab / count,
        rmse=float(np.sqrt(mse)),
        pinball=pinball,
        crps=2.0 * pinball,
        coverage80=covered / count,
        n_windows=len(results),
    )


def evaluate_model(
    model: Model, windows: list[TimeSeriesWindow], *, missing_strategy: str = "mask_token"
) -> MetricReport:
    labeled = [w for w in windows if w.target is not None]
    if not labeled:
        raise DataError("no labeled windows to evaluate")
    results = forecast_many(
        model, labeled, missing_strategy=missing_strategy, max_workers=worker_count()
    )
    return compute_metrics(results, [w.target for w in labeled])


# ---------------------------------------------------------------------------
# Missing-data robustness (mask-token inference vs zero fill)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MissingSweepRow:
    rate: float
    report: MetricReport
    degradation: float  # relative MSE increase vs the rate-0 row


def missing_data_sweep(
    model: Model,
    windows: list[TimeSeriesWindow],
    rates: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3),
    seed: int = 0,
    strategy: str = "mask_token",
) -> list[MissingSweepRow]:
    """Evaluate under increasing random missingness; targets stay untouched."""
    rows = []
    base_mse = None
    for rate in rates:
        corrupted = [
            inject_missing(w, rate, np.random.SeedSequence([seed, int(rate * 1000), i]))
            for i, w in enumerate(windows)
        ] if rate > 0 else windows
        report = evaluate_model(model, corrupted, missing_strategy=strategy)
        if base_mse is None:
            base_mse = report.mse
        degradation = (report.mse - base_mse) / base_mse if base_mse > 0 else 0.0
        rows.append(MissingSweepRow(rate=rate, report=report, degradation=degradation))
    return rows


# ---------------------------------------------------------------------------
# Synthetic experiment plumbing
# ---------------------------------------------------------------------------


def spec_windows(
    spec: SyntheticSpec, model_config: ModelConfig, stride: int | None = None
) -> list[TimeSeriesWindow]:
    stride = stride or model_config.horizon
    out = []
    for src in generate_synthetic(spec):
        out.extend(make_windows(src, model_config.context_len, model_config.horizon, stride))
    return out


def _split_train_eval(
    spec: SyntheticSpec, model_config: ModelConfig, n_eval: int, stride: int | None = None
) -> tuple[list[TimeSeriesWindow], list[TimeSeriesWindow]]:
    """Train and eval windows from disjoint series of the same family."""
    if spec.n_series < 2:
        raise UsageError("need n_series >= 2 to split train and eval series")
    sources = generate_synthetic(spec)
    cut = max(1, len(sources) // 4)
    stride = stride or model_config.horizon
    eval_w, train_w = [], []
    for src in sources[:cut]:
        eval_w.extend(make_windows(src, model_config.context_len, model_config.horizon, stride))
    for src in sources[cut:]:
        train_w.extend(make_windows(src, model_config.context_len, model_config.horizon, stride))
    if len(eval_w) > n_eval:
        eval_w = eval_w[:n_eval]
    if not eval_w or not train_w:
        raise DataError("family too short to build train and eval windows")
    return train_w, eval_w


def _fit_family_teachers(corpora: dict[str, list[TimeSeriesWindow]]) -> list[TeacherModel]:
    """One seasonal and one AR teacher per family, uniformly weighted."""
    teachers: list[TeacherModel] = []
    for family, sources in corpora.items():
        teachers.append(fit_teacher("seasonal_naive", sources, domain=family))
        teachers.append(fit_teacher("linear_ar", sources, domain=family))
    for t in teachers:
        t.weight = 1.0 / len(teachers)
    return teachers


def _pretrained_model(
    model_config: ModelConfig,
    pretrain_config: PretrainConfig,
    corpora: dict[str, list[TimeSeriesWindow]],
    windows: list[TimeSeriesWindow],
    seed: int,
) -> Model:
    model = Model.init(model_config, seed=seed)
    teachers = _fit_family_teachers(corpora)
    cfg = replace(pretrain_config, seed=seed)
    run_pretraining(model, windows, cfg, teachers=teachers)
    return model


# ---------------------------------------------------------------------------
# Transfer experiment (pretraining-regime comparison)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegimeResult:
    regime: str
    mse_mean: float
    mse_std: float
    per_seed: tuple[float, ...]


def transfer_experiment(
    pretrain_specs: dict[str, SyntheticSpec],
    target_spec: SyntheticSpec,
    model_config: ModelConfig,
    pretrain_config: PretrainConfig,
    supervised_config: FinetuneConfig,
    seeds: tuple[int, ...] = (0, 1, 2),
    n_eval_windows: int = 32,
) -> list[RegimeResult]:
    """Zero-shot MSE on a held-out family under different pretraining regimes.

    Regimes: no pretraining, each source family alone, all source families,
    and a supervised full-data model trained on the target family itself.
    """
    if len(pretrain_specs) < 2:
        raise UsageError("transfer experiment needs at least 2 pretraining families")
    target_train, target_eval = _split_train_eval(target_spec, model_config, n_eval_windows)

    family_sources = {name: generate_synthetic(spec) for name, spec in pretrain_specs.items()}
    family_windows = {
        name: [
            w
            for src in sources
            for w in make_windows(src, model_config.context_len, model_config.horizon, model_config.horizon)
        ]
        for name, sources in family_sources.items()
    }

    def regime_mse(fn) -> tuple[float, ...]:
        return tuple(evaluate_model(fn(seed), target_eval).mse for seed in seeds)

    rows: list[tuple[str, tuple[float, ...]]] = []
    rows.append(("no_pretrain", regime_mse(lambda s: Model.init(model_config, seed=s))))
    for name in sorted(pretrain_specs):
        rows.append(
            (
                f"{name}_only",
                regime_mse(
                    lambda s, nm=name: _pretrained_model(
                        model_config, pretrain_config, {nm: family_sources[nm]}, family_windows[nm], s
                    )
                ),
            )
        )
    all_windows = [w for name in sorted(family_windows) for w in family_windows[name]]
    rows.append(
        (
            "all_families",
            regime_mse(
                lambda s: _pretrained_model(
                    model_config, pretrain_config, family_sources, all_windows, s
                )
            ),
        )
    )
    rows.append(
        (
            "supervised_full",
            regime_mse(
                lambda s: train_supervised(
                    Model.init(model_config, seed=s), target_train, replace(supervised_config, seed=s)
                )
            ),
        )
    )
    return [
        RegimeResult(
            regime=name,
            mse_mean=float(np.mean(vals)),
            mse_std=float(np.std(vals)),
            per_seed=vals,
        )
        for name, vals in rows
    ]


# ---------------------------------------------------------------------------
# Few-shot experiment (fine-tuned-from-pretrained vs from-scratch)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FewShotRow:
    n_samples: int
    pretrained_mse_mean: float
    pretrained_mse_std: float
    scratch_mse_mean: float
    scratch_mse_std: float


def few_shot_experiment(
    pretrain_specs: dict[str, SyntheticSpec],
    target_spec: SyntheticSpec,
    sample_counts: tuple[int, ...],
    model_config: ModelConfig,
    pretrain_config: PretrainConfig,
    finetune_config: FinetuneConfig,
    seeds: tuple[int, ...] = (0, 1, 2),
    n_eval_windows: int = 32,
) -> list[FewShotRow]:
    """Adapter fine-tuning of a pretrained model vs training from scratch."""
    target_train, target_eval = _split_train_eval(target_spec, model_config, n_eval_windows)
    family_sources = {name: generate_synthetic(spec) for name, spec in pretrain_specs.items()}
    all_windows = [
        w
        for name in sorted(family_sources)
        for src in family_sources[name]
        for w in make_windows(src, model_config.context_len, model_config.horizon, model_config.horizon)
    ]

    pre_models = {
        seed: _pretrained_model(model_config, pretrain_config, family_sources, all_windows, seed)
        for seed in seeds
    }

    rows = []
    for n in sample_counts:
        if n > len(target_train):
            raise DataError(f"requested {n} training samples but only {len(target_train)} available")
        subset = target_train[:n]
        pre_vals, scratch_vals = [], []
        for seed in seeds:
            cfg = replace(finetune_config, seed=seed)
            tuned = finetune_adapters(pre_models[seed], subset, cfg)
            pre_vals.append(evaluate_model(tuned, target_eval).mse)
            scratch = train_supervised(Model.init(model_config, seed=seed), subset, cfg)
            scratch_vals.append(evaluate_model(scratch, target_eval).mse)
        rows.append(
            FewShotRow(
                n_samples=n,
                pretrained_mse_mean=float(np.mean(pre_vals)),
                pretrained_mse_std=float(np.std(pre_vals)),
                scratch_mse_mean=float(np.mean(scratch_vals)),
                scratch_mse_std=float(np.std(scratch_vals)),
            )
        )
    return rows


# ---------------------------------------------------------------------------
# Scaling curve (corpus size vs validation MSE)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScalingRow:
    fraction: float
    n_points: int
    log10_points: float
    mse_mean: float
    mse_std: float


def scaling_curve(
    corpus_specs: dict[str, SyntheticSpec],
    target_spec: SyntheticSpec,
    fractions: tuple[float, ...],
    model_config: ModelConfig,
    pretrain_config: PretrainConfig,
    seeds: tuple[int, ...] = (0, 1, 2),
    n_eval_windows: int = 32,
) -> list[ScalingRow]:
    """Pretrain on increasing corpus fractions and report held-out zero-shot MSE."""
    if len(fractions) < 2:
        raise UsageError("scaling curve needs at least two corpus fractions")
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise UsageError("fractions must be strictly increasing")
    _, target_eval = _split_train_eval(target_spec, model_config, n_eval_windows)
    family_sources = {name: generate_synthetic(spec) for name, spec in corpus_specs.items()}
    all_windows = [
        w
        for name in sorted(family_sources)
        for src in family_sources[name]
        for w in make_windows(src, model_config.context_len, model_config.horizon, model_config.horizon)
    ]

    rows = []
    for fraction in fractions:
        n_take = max(pretrain_config.batch_size, int(round(fraction * len(all_windows))))
        n_take = min(n_take, len(all_windows))
        vals = []
        for seed in seeds:
            rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5CA1E, int(fraction * 1e6)]))
            idx = np.sort(rng.choice(len(all_windows), size=n_take, replace=False))
            subset = [all_windows[i] for i in idx]
            model = Model.init(model_config, seed=seed)
            teachers = _fit_family_teachers({"corpus": subset})
            run_pretraining(model, subset, replace(pretrain_config, seed=seed), teachers=teachers)
            vals.append(evaluate_model(model, target_eval).mse)
        n_points = n_take * model_config.context_len * model_config.n_vars
        rows.append(
            ScalingRow(
                fraction=fraction,
                n_points=n_points,
                log10_points=float(np.log10(n_points)),
                mse_mean=float(np.mean(vals)),
                mse_std=float(np.std(vals)),
            )
        )
    return rows


# ---------------------------------------------------------------------------
# Attention benchmark
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchRow:
    L: int
    P: int
    d: int
    flops: float
    median_ms: float
    p95_ms: float


def _measure_attention_ms(
    n_tokens: int, d: int, repetitions: int, warmup: int, batch: int, seed: int = 0
) -> tuple[float, float]:
    """Median/p95 wall time (ms) of one attention-stage evaluation.

    Throughput-style measurement: each timed sample runs the score/softmax/mix
    stage over a small batch of independent instances and divides by the batch,
    amortizing interpreter dispatch that would otherwise swamp small cases.
    """
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((batch, n_tokens, d))
    kt = rng.standard_normal((batch, d, n_tokens))
    v = rng.standard_normal((batch, n_tokens, d))
    scale = 1.0 / np.sqrt(d)

    def run():
        s = (q @ kt) * scale
        s -= s.max(axis=2, keepdims=True)
        e = np.exp(s)
        a = e / e.sum(axis=2, keepdims=True)
        return a @ v

    for _ in range(warmup):
        run()
    t0 = time.perf_counter()
    run()
    est = max(time.perf_counter() - t0, 1e-7)
    inner = max(1, int(np.ceil(0.005 / est)))
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter_ns()
        for _ in range(inner):
            run()
        samples.append((time.perf_counter_ns() - t0) / inner / batch / 1e6)
    arr = np.sort(np.asarray(samples))
    return float(np.median(arr)), float(arr[min(len(arr) - 1, int(np.ceil(0.95 * len(arr))) - 1)])


def attention_bench(
    l_values: tuple[int, ...],
    p_values: tuple[int, ...],
    d: int = 64,
    repetitions: int = 9,
    warmup: int = 5,
    batch: int = 2,
) -> list[BenchRow]:
    """Measured attention-stage timings plus analytic flops per (L, P)."""
    rows = []
    for L in l_values:
        for P in p_values:
            if L < P:
                raise UsageError(f"L={L} shorter than patch size {P}")
            median, p95 = _measure_attention_ms(L // P, d, repetitions, warmup, batch)
            rows.append(
                BenchRow(
                    L=L, P=P, d=d,
                    flops=attention_flops(L, P, d),
                    median_ms=median, p95_ms=p95,
                )
            )
    return rows


def bench_to_json(rows: list[BenchRow], path) -> None:
    payload = [
        {"L": r.L, "P": r.P, "d": r.d, "flops": r.flops, "median_ms": r.median_ms, "p95_ms": r.p95_ms}
        for r in rows
    ]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------------------
# CSV writers (documented headers)
# ---------------------------------------------------------------------------


def write_csv(path, header: str, rows: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(row + "\n")


def metric_report_csv(reports: dict[str, MetricReport], path) -> None:
    write_csv(
        path,
        "label,mse,mae,rmse,pinball,crps,coverage80,n_windows",
        [
            f"{label},{r.mse!r},{r.mae!r},{r.rmse!r},{r.pinball!r},{r.crps!r},{r.coverage80!r},{r.n_windows}"
            for label, r in reports.items()
        ],
    )


def missing_sweep_csv(rows: list[MissingSweepRow], path) -> None:
    write_csv(
        path,
        "rate,mse,mae,rmse,coverage80,degradation",
        [
            f"{r.rate!r},{r.report.mse!r},{r.report.mae!r},{r.report.rmse!r},"
            f"{r.report.coverage80!r},{r.degradation!r}"
            for r in rows
        ],
    )


def transfer_csv(rows: list[RegimeResult], path) -> None:
    write_csv(
        path,
        "regime,mse_mean,mse_std," + ",".join(f"seed{i}" for i in range(len(rows[0].per_seed))),
        [
            f"{r.regime},{r.mse_mean!r},{r.mse_std!r}," + ",".join(repr(v) for v in r.per_seed)
            for r in rows
        ],
    )


def few_shot_csv(rows: list[FewShotRow], path) -> None:
    write_csv(
        path,
        "n_samples,pretrained_mse_mean,pretrained_mse_std,scratch_mse_mean,scratch_mse_std",
        [
            f"{r.n_samples},{r.pretrained_mse_mean!r},{r.pretrained_mse_std!r},"
            f"{r.scratch_mse_mean!r},{r.scratch_mse_std!r}"
            for r in rows
        ],
    )


def scaling_csv(rows: list[ScalingRow], path) -> None:
    write_csv(
        path,
        "log10_points,val_mse",
        [f"{r.log10_points!r},{r.mse_mean!r}" for r in rows],
    )


def bench_csv(rows: list[BenchRow], path) -> None:
    write_csv(
        path,
        "L,P,d,flops,median_ms,p95_ms",
        [f"{r.L},{r.P},{r.d},{r.flops!r},{r.median_ms!r},{r.p95_ms!r}" for r in rows],
    )
