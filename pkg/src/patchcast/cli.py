"""Command-line entry point.

Subcommands: synth, pretrain, finetune, forecast, eval, bench, transfer,
scaling, missing, fewshot. Global flags: --config, --seed, --checkpoint,
--out, --log-level, --no-timestamps. Exit codes: 0 success, 1 usage error,
2 data error, 3 numeric failure.

Identical flags + config + seed produce identical output files byte for
byte; timestamps in checkpoint metadata are suppressed by --no-timestamps.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import configio, evaluate
from .checkpoint import load_checkpoint, save_checkpoint
from .data import CsvConfig, SyntheticSpec, generate_synthetic, ingest_csv, make_windows
from .errors import DataError, NumericError, PatchcastError, UsageError
from .forecast import FinetuneConfig, finetune_adapters, forecast_many, forecasts_to_csv
from .model import Model, ModelConfig
from .pretrain import PretrainConfig, run_pretraining
from .evaluate import (
    attention_bench,
    bench_csv,
    bench_to_json,
    evaluate_model,
    few_shot_csv,
    few_shot_experiment,
    metric_report_csv,
    missing_data_sweep,
    missing_sweep_csv,
    scaling_csv,
    scaling_curve,
    spec_windows,
    transfer_csv,
    transfer_experiment,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures to exit code 1
        raise UsageError(message)


def _int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(x) for x in raw.split(",") if x.strip())


def _float_list(raw: str) -> tuple[float, ...]:
    return tuple(float(x) for x in raw.split(",") if x.strip())


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key-value config file; flags override its values")
    common.add_argument("--seed", type=int, default=0, help="base RNG seed")
    common.add_argument("--checkpoint", help="model checkpoint path")
    common.add_argument("--out", help="output directory", default="out")
    common.add_argument("--log-level", default="warning",
                        choices=["debug", "info", "warning", "error"])
    common.add_argument("--no-timestamps", action="store_true",
                        help="omit wall-clock metadata for byte-reproducible outputs")

    parser = _Parser(prog="patchcast", parents=[common],
                     description="Patch-based time-series foundation model, desk scale.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    p.add_argument("--family", default="sine_trend")
    p.add_argument("--length", type=int, default=2048)
    p.add_argument("--n-series", type=int, default=4)
    p.add_argument("--amplitude", type=float)
    p.add_argument("--period", type=float)
    p.add_argument("--slope", type=float)
    p.add_argument("--noise-std", type=float)
    p.add_argument("--coeffs", type=_float_list)

    p = sub.add_parser("pretrain", parents=[common], help="self-supervised pretraining")
    p.add_argument("--corpus", help="directory from `synth`, or a CSV file")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--peak-lr", type=float)

    p = sub.add_parser("finetune", parents=[common], help="adapter fine-tuning")
    p.add_argument("--data", help="labeled data: corpus directory or CSV")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--peak-lr", type=float, default=1e-3)

    p = sub.add_parser("forecast", parents=[common], help="zero-shot forecasts to CSV")
    p.add_argument("--input", help="CSV with context windows")
    p.add_argument("--stride", type=int)

    p = sub.add_parser("eval", parents=[common], help="metrics on labeled windows")
    p.add_argument("--data", help="corpus directory or CSV")

    p = sub.add_parser("bench", parents=[common], help="attention timing + flops")
    p.add_argument("--l", type=_int_list, default=(512,))
    p.add_argument("--patch", type=_int_list, default=(16, 32, 64))
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--reps", type=int, default=9)

    p = sub.add_parser("transfer", parents=[common], help="pretraining-regime comparison")
    p.add_argument("--seeds", type=_int_list, default=(0, 1, 2))
    p.add_argument("--steps", type=int)

    p = sub.add_parser("scaling", parents=[common], help="corpus-size scaling curve")
    p.add_argument("--fractions", type=_float_list, default=(0.05, 0.25, 1.0))
    p.add_argument("--seeds", type=_int_list, default=(0, 1, 2))
    p.add_argument("--steps", type=int)

    p = sub.add_parser("missing", parents=[common], help="missing-data robustness sweep")
    p.add_argument("--rates", type=_float_list, default=(0.0, 0.1, 0.2, 0.3))
    p.add_argument("--steps", type=int)

    p = sub.add_parser("fewshot", parents=[common], help="few-shot fine-tuning curve")
    p.add_argument("--samples", type=_int_list, default=(8, 32, 128))
    p.add_argument("--seeds", type=_int_list, default=(0, 1, 2))
    p.add_argument("--steps", type=int)

    return parser


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _load_sections(args) -> configio.Sections:
    return configio.read_config(args.config) if args.config else {}


def _model_config(sections) -> ModelConfig:
    return configio.model_config_from_sections(sections)


def _pretrain_config(sections, args) -> PretrainConfig:
    cfg = configio.pretrain_config_from_sections(sections)
    overrides = {}
    if getattr(args, "steps", None) is not None:
        overrides["steps"] = args.steps
    if getattr(args, "batch_size", None) is not None:
        overrides["batch_size"] = args.batch_size
    if getattr(args, "peak_lr", None) is not None:
        overrides["peak_lr"] = args.peak_lr
    overrides["seed"] = args.seed
    return replace(cfg, **overrides)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_corpus(path_str: str | None, model_config: ModelConfig, *, labeled: bool):
    """Corpus directory (spec.ini + CSVs) or a single CSV -> windows list."""
    if not path_str:
        raise UsageError("a data source is required (--corpus/--data/--input)")
    path = Path(path_str)
    horizon = model_config.horizon if labeled else 0
    if path.is_dir():
        spec_file = path / "spec.ini"
        sources = []
        if spec_file.exists():
            spec = configio.synthetic_spec_from_sections(configio.read_config(spec_file))
            sources = generate_synthetic(spec)
        else:
            for csv_path in sorted(path.glob("*.csv")):
                sources.extend(ingest_csv(csv_path, CsvConfig()))
        if not sources:
            raise DataError(f"no corpus data under {path}")
    else:
        sources = ingest_csv(path, CsvConfig())
    windows = []
    for src in sources:
        windows.extend(
            make_windows(src, model_config.context_len, horizon, model_config.horizon)
        )
    if not windows:
        raise DataError(
            f"data in {path} too short for context_len={model_config.context_len}, horizon={horizon}"
        )
    return windows


def _experiment_specs(seed: int) -> dict[str, SyntheticSpec]:
    """Default desk-scale source families for the experiment subcommands."""
    length = 1024
    return {
        "sine": SyntheticSpec(
            "sine_trend", length=length, n_series=4, seed=seed + 11,
            params={"period": 16.0, "amplitude": 1.0, "slope": 0.002, "noise_std": 0.05},
        ),
        "ar": SyntheticSpec(
            "ar_process", length=length, n_series=4, seed=seed + 23,
            params={"coeffs": (0.6, 0.2), "noise_std": 0.5},
        ),
    }


def _experiment_target(seed: int) -> SyntheticSpec:
    return SyntheticSpec(
        "square_seasonal", length=1024, n_series=4, seed=seed + 37,
        params={"period": 16.0, "amplitude": 1.0, "noise_std": 0.05},
    )


EXPERIMENT_MODEL = ModelConfig(
    context_len=64, horizon=8, n_vars=1, scales=(8, 16),
    d_model=32, n_layers=2, n_heads=4, d_ff=64, adapter_enabled=True,
)

EXPERIMENT_PRETRAIN = PretrainConfig(steps=300, batch_size=8, peak_lr=3e-3)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_synth(args) -> int:
    out = _outdir(args)
    params = {}
    for key in ("amplitude", "period", "slope", "noise_std"):
        flag = getattr(args, key.replace("-", "_"), None)
        if flag is not None:
            params[key] = flag
    if args.coeffs is not None:
        params["coeffs"] = args.coeffs
    spec = SyntheticSpec(
        family=args.family, length=args.length, n_series=args.n_series,
        seed=args.seed, params=params,
    )
    sources = generate_synthetic(spec)
    configio.write_config(configio.synthetic_spec_to_sections(spec), out / "spec.ini")
    for i, src in enumerate(sources):
        lines = ["x0"] + [repr(float(v)) for v in src.values[:, 0]]
        (out / f"series_{i:03d}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(sources)} series and spec.ini to {out}")
    return EXIT_OK


def _cmd_pretrain(args) -> int:
    sections = _load_sections(args)
    model_config = _model_config(sections)
    pre_config = _pretrain_config(sections, args)
    out = _outdir(args)
    ckpt_path = Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"

    model = Model.init(model_config, seed=args.seed)
    if pre_config.steps > 0:
        windows = _load_corpus(args.corpus, model_config, labeled=False)
        teachers = evaluate._fit_family_teachers({"corpus": windows})
        run_pretraining(model, windows, pre_config, teachers=teachers, log_path=out / "metrics.csv")
    save_checkpoint(
        ckpt_path, model, step=pre_config.steps, seed=args.seed,
        timestamps=not args.no_timestamps,
    )
    print(f"checkpoint written to {ckpt_path}")
    return EXIT_OK


def _require_checkpoint(args) -> Model:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required for this command")
    model, _ = load_checkpoint(args.checkpoint)
    return model


def _cmd_finetune(args) -> int:
    model = _require_checkpoint(args)
    windows = _load_corpus(args.data, model.config, labeled=True)
    cfg = FinetuneConfig(steps=args.steps, seed=args.seed, peak_lr=args.peak_lr)
    tuned = finetune_adapters(model, windows, cfg)
    out = _outdir(args)
    path = out / "finetuned.ckpt"
    save_checkpoint(path, tuned, step=cfg.steps, seed=args.seed, timestamps=not args.no_timestamps)
    print(f"fine-tuned checkpoint written to {path}")
    return EXIT_OK


def _cmd_forecast(args) -> int:
    model = _require_checkpoint(args)
    windows = _load_corpus(args.input, model.config, labeled=False)
    results = forecast_many(model, windows, max_workers=evaluate.worker_count())
    out = _outdir(args)
    forecasts_to_csv(results, out / "forecasts.csv")
    print(f"{len(results)} forecasts written to {out / 'forecasts.csv'}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    model = _require_checkpoint(args)
    windows = _load_corpus(args.data, model.config, labeled=True)
    report = evaluate_model(model, windows)
    out = _outdir(args)
    metric_report_csv({"eval": report}, out / "metrics.csv")
    print(
        f"mse={report.mse:.6f} mae={report.mae:.6f} rmse={report.rmse:.6f} "
        f"coverage80={report.coverage80:.3f} over {report.n_windows} windows"
    )
    return EXIT_OK


def _cmd_bench(args) -> int:
    rows = attention_bench(args.l, args.patch, d=args.d, repetitions=args.reps)
    out = _outdir(args)
    bench_to_json(rows, out / "bench.json")
    bench_csv(rows, out / "bench.csv")
    for r in rows:
        print(f"L={r.L} P={r.P} d={r.d} flops={r.flops:.3e} median={r.median_ms:.4f}ms")
    return EXIT_OK


def _cmd_transfer(args) -> int:
    pre = EXPERIMENT_PRETRAIN if args.steps is None else replace(EXPERIMENT_PRETRAIN, steps=args.steps)
    rows = transfer_experiment(
        _experiment_specs(args.seed), _experiment_target(args.seed),
        EXPERIMENT_MODEL, pre, FinetuneConfig(steps=pre.steps), seeds=args.seeds,
    )
    out = _outdir(args)
    transfer_csv(rows, out / "transfer.csv")
    for r in rows:
        print(f"{r.regime:>22}: mse = {r.mse_mean:.5f} +/- {r.mse_std:.5f}")
    return EXIT_OK


def _cmd_scaling(args) -> int:
    pre = EXPERIMENT_PRETRAIN if args.steps is None else replace(EXPERIMENT_PRETRAIN, steps=args.steps)
    rows = scaling_curve(
        _experiment_specs(args.seed), _experiment_target(args.seed),
        args.fractions, EXPERIMENT_MODEL, pre, seeds=args.seeds,
    )
    out = _outdir(args)
    scaling_csv(rows, out / "scaling.csv")
    for r in rows:
        print(f"fraction={r.fraction:.3f} log10(N)={r.log10_points:.2f} mse={r.mse_mean:.5f}")
    return EXIT_OK


def _cmd_missing(args) -> int:
    pre = EXPERIMENT_PRETRAIN if args.steps is None else replace(EXPERIMENT_PRETRAIN, steps=args.steps)
    specs = _experiment_specs(args.seed)
    model_config = EXPERIMENT_MODEL
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        model_config = model.config
    else:
        sources = {name: generate_synthetic(s) for name, s in specs.items()}
        windows = [
            w for name in sorted(sources) for src in sources[name]
            for w in make_windows(src, model_config.context_len, model_config.horizon, model_config.horizon)
        ]
        model = evaluate._pretrained_model(model_config, pre, sources, windows, args.seed)
    eval_windows = spec_windows(_experiment_target(args.seed), model_config)[: 200]
    out = _outdir(args)
    rows = missing_data_sweep(model, eval_windows, rates=args.rates, seed=args.seed)
    missing_sweep_csv(rows, out / "missing.csv")
    baseline = missing_data_sweep(model, eval_windows, rates=args.rates, seed=args.seed, strategy="zero_fill")
    missing_sweep_csv(baseline, out / "missing_zero_fill.csv")
    for r, b in zip(rows, baseline):
        print(
            f"rate={r.rate:.1f}: mask-token mse={r.report.mse:.5f} ({r.degradation:+.2%}) "
            f"zero-fill mse={b.report.mse:.5f} ({b.degradation:+.2%})"
        )
    return EXIT_OK


def _cmd_fewshot(args) -> int:
    pre = EXPERIMENT_PRETRAIN if args.steps is None else replace(EXPERIMENT_PRETRAIN, steps=args.steps)
    rows = few_shot_experiment(
        _experiment_specs(args.seed), _experiment_target(args.seed),
        args.samples, EXPERIMENT_MODEL, pre, FinetuneConfig(steps=pre.steps), seeds=args.seeds,
    )
    out = _outdir(args)
    few_shot_csv(rows, out / "fewshot.csv")
    for r in rows:
        print(
            f"n={r.n_samples}: pretrained mse={r.pretrained_mse_mean:.5f} "
            f"scratch mse={r.scratch_mse_mean:.5f}"
        )
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "forecast": _cmd_forecast,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "transfer": _cmd_transfer,
    "scaling": _cmd_scaling,
    "missing": _cmd_missing,
    "fewshot": _cmd_fewshot,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=getattr(logging, args.log_level.upper()))
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except PatchcastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
