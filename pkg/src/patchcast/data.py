"""Series ingestion, synthetic generation, windowing, normalization, missingness.

Everything here is a pure function of its inputs: generation and masking
take explicit seeds, and windows are treated as immutable after
construction (operations return new windows).

Missing values are carried as ``(placeholder 0.0, missing_mask=False)``
so the numeric path stays NaN-free.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-5


@dataclass(frozen=True)
class TimeSeriesWindow:
    """A contiguous slice of a multivariate series.

    values: (L, D) context observations.
    target: (H, D) future observations, or None for unlabeled windows.
    missing_mask: (L, D) booleans, True where the value was observed.
    norm_state: per-variable (mean, std) used to standardize, or None.
    """

    values: np.ndarray
    horizon: int = 0
    target: np.ndarray | None = None
    missing_mask: np.ndarray | None = None
    norm_state: tuple[np.ndarray, np.ndarray] | None = None
    name: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise DataError(f"window values must be a non-empty L x D matrix, got shape {values.shape}")
        object.__setattr__(self, "values", values)
        if self.horizon < 0:
            raise DataError("horizon must be >= 0")
        if self.target is not None:
            target = np.asarray(self.target, dtype=np.float64)
            if target.shape != (self.horizon, values.shape[1]):
                raise DataError(
                    f"target shape {target.shape} does not match (H, D) = ({self.horizon}, {values.shape[1]})"
                )
            object.__setattr__(self, "target", target)
        mask = self.missing_mask
        if mask is None:
            mask = np.ones(values.shape, dtype=bool)
        else:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != values.shape:
                raise DataError(f"missing_mask shape {mask.shape} does not match values shape {values.shape}")
        object.__setattr__(self, "missing_mask", mask)

    @property
    def context_len(self) -> int:
        return self.values.shape[0]

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]


def normalize_window(w: TimeSeriesWindow) -> TimeSeriesWindow:
    """Standardize per variable using context statistics over observed entries.

    Population std, floored at STD_FLOOR for (near-)constant variables. The
    same statistics are applied to the target so metrics can be computed in
    original units after inversion.
    """
    mean = np.empty(w.n_vars)
    std = np.empty(w.n_vars)
    for d in range(w.n_vars):
        obs = w.values[w.missing_mask[:, d], d]
        if obs.size == 0:
            raise DataError(f"variable {d} has no observed entries; cannot normalize")
        mean[d] = obs.mean()
        std[d] = max(obs.std(), STD_FLOOR)
    values = (w.values - mean) / std
    target = None if w.target is None else (w.target - mean) / std
    return replace(w, values=values, target=target, norm_state=(mean, std))


def denormalize_window(w: TimeSeriesWindow) -> TimeSeriesWindow:
    if w.norm_state is None:
        raise DataError("window has no norm_state to invert")
    mean, std = w.norm_state
    values = w.values * std + mean
    target = None if w.target is None else w.target * std + mean
    return replace(w, values=values, target=target, norm_state=None)


def denormalize_values(x: np.ndarray, norm_state: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """Map (..., D) standardized values back to original units."""
    mean, std = norm_state
    return x * std + mean


def make_windows(source: TimeSeriesWindow, context_len: int, horizon: int, stride: int) -> list[TimeSeriesWindow]:
    """Slice a source series into (context, target) windows every ``stride`` steps."""
    if context_len < 1 or horizon < 0 or stride < 1:
        raise UsageError("context_len >= 1, horizon >= 0, stride >= 1 required")
    length = source.values.shape[0]
    if length < context_len + horizon:
        logger.warning(
            "source %r too short for windows: length %d < L + H = %d",
            source.name, length, context_len + horizon,
        )
        return []
    windows = []
    for start in range(0, length - context_len - horizon + 1, stride):
        ctx = slice(start, start + context_len)
        tgt = slice(start + context_len, start + context_len + horizon)
        windows.append(
            TimeSeriesWindow(
                values=source.values[ctx].copy(),
                horizon=horizon,
                target=source.values[tgt].copy() if horizon > 0 else None,
                missing_mask=source.missing_mask[ctx].copy(),
                name=f"{source.name}[{start}]",
            )
        )
    return windows


def inject_missing(w: TimeSeriesWindow, rate: float, seed: int) -> TimeSeriesWindow:
    """Flip exactly round(rate * L * D) uniformly chosen entries to unobserved."""
    if not 0.0 <= rate < 1.0:
        raise UsageError(f"missing rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return w
    total = w.values.size
    n_drop = int(np.floor(rate * total + 0.5))
    rng = np.random.default_rng(seed)
    flat = rng.choice(total, size=n_drop, replace=False)
    mask = w.missing_mask.copy()
    values = w.values.copy()
    rows, cols = np.unravel_index(flat, w.values.shape)
    mask[rows, cols] = False
    values[rows, cols] = 0.0
    return replace(w, values=values, missing_mask=mask)


# ---------------------------------------------------------------------------
# Synthetic families
# ---------------------------------------------------------------------------

FAMILIES = ("sine_trend", "ar_process", "square_seasonal")


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for one family of synthetic univariate series."""

    family: str
    length: int
    n_series: int = 1
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise UsageError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        if self.length < 1 or self.n_series < 1:
            raise UsageError("length and n_series must be positive")

    def resolved_params(self) -> dict:
        defaults = {
            "sine_trend": {"amplitude": 1.0, "period": 24.0, "slope": 0.0, "noise_std": 0.0},
            "ar_process": {"coeffs": (0.5,), "noise_std": 1.0},
            "square_seasonal": {"amplitude": 1.0, "period": 24.0, "noise_std": 0.0},
        }[self.family]
        merged = dict(defaults)
        merged.update(self.params)
        return merged


def _ar_spectral_radius(coeffs: np.ndarray) -> float:
    p = len(coeffs)
    companion = np.zeros((p, p))
    companion[0, :] = coeffs
    if p > 1:
        companion[1:, :-1] = np.eye(p - 1)
    return float(np.max(np.abs(np.linalg.eigvals(companion))))


def generate_synthetic(spec: SyntheticSpec) -> list[TimeSeriesWindow]:
    """Generate ``n_series`` univariate sources; bit-identical for a fixed spec + seed."""
    params = spec.resolved_params()
    if spec.family == "ar_process":
        coeffs = np.asarray(params["coeffs"], dtype=np.float64)
        if coeffs.size == 0:
            raise UsageError("ar_process needs at least one coefficient")
        radius = _ar_spectral_radius(coeffs)
        if radius >= 1.0:
            raise UsageError(f"nonstationary AR coefficients (companion spectral radius {radius:.4f} >= 1)")
    if spec.family in ("sine_trend", "square_seasonal") and params["period"] <= 0:
        raise UsageError(f"period must be positive, got {params['period']}")

    children = np.random.SeedSequence(spec.seed).spawn(spec.n_series)
    sources = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        x = _generate_one(spec.family, params, spec.length, rng)
        sources.append(TimeSeriesWindow(values=x[:, None], name=f"{spec.family}-{spec.seed}-{i}"))
    return sources


def _generate_one(family: str, params: dict, length: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(length, dtype=np.float64)
    if family == "sine_trend":
        x = params["amplitude"] * np.sin(2.0 * np.pi * t / params["period"]) + params["slope"] * t
        if params["noise_std"] > 0:
            x = x + rng.normal(0.0, params["noise_std"], size=length)
        return x
    if family == "square_seasonal":
        phase = np.mod(t, params["period"]) / params["period"]
        x = params["amplitude"] * np.where(phase < 0.5, 1.0, -1.0)
        if params["noise_std"] > 0:
            x = x + rng.normal(0.0, params["noise_std"], size=length)
        return x
    # ar_process: zero-initialized recursion with a discarded burn-in
    coeffs = np.asarray(params["coeffs"], dtype=np.float64)
    p = len(coeffs)
    burn = 100
    noise = rng.normal(0.0, params["noise_std"], size=length + burn)
    x = np.zeros(length + burn)
    for i in range(length + burn):
        acc = noise[i]
        for j in range(min(p, i)):
            acc += coeffs[j] * x[i - 1 - j]
        x[i] = acc
    return x[burn:]


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CsvConfig:
    """Column mapping for CSV sources.

    groups: lists of column names, one source per group; None means a single
    source holding every numeric column. The timestamp column, when named,
    is validated as monotone and excluded from modeling.
    """

    delimiter: str = ","
    timestamp_column: str | None = None
    groups: tuple[tuple[str, ...], ...] | None = None


def _parse_cell(cell: str) -> tuple[float, bool]:
    cell = cell.strip()
    if cell == "" or cell.lower() in ("nan", "na", "null"):
        return 0.0, False
    try:
        v = float(cell)
    except ValueError:
        return 0.0, False
    if np.isnan(v):
        return 0.0, False
    return v, True


def ingest_csv(path: str | Path, config: CsvConfig | None = None) -> list[TimeSeriesWindow]:
    """Read a header-first CSV into one source window per column group."""
    config = config or CsvConfig()
    path = Path(path)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=config.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path}: ragged row at line {lineno} ({len(row)} cells, expected {len(header)})")
            rows.append((lineno, row))
    if not rows:
        raise DataError(f"{path}: zero data rows")

    ts_idx = None
    if config.timestamp_column is not None:
        if config.timestamp_column not in header:
            raise DataError(f"{path}: timestamp column {config.timestamp_column!r} not in header")
        ts_idx = header.index(config.timestamp_column)
        prev = None
        for lineno, row in rows:
            v, ok = _parse_cell(row[ts_idx])
            if not ok:
                raise DataError(f"{path}: unparseable timestamp at line {lineno}")
            if prev is not None and v <= prev:
                raise DataError(f"{path}: non-monotone timestamp at line {lineno}")
            prev = v

    # A column is numeric when at least one cell parses as a number.
    candidate = [i for i in range(len(header)) if i != ts_idx]
    numeric_cols = []
    for i in candidate:
        if any(_parse_cell(row[i])[1] for _, row in rows):
            numeric_cols.append(i)
    if not numeric_cols:
        raise DataError(f"{path}: zero numeric columns")

    if config.groups is None:
        groups = [[header[i] for i in numeric_cols]]
    else:
        groups = [list(g) for g in config.groups]
        for g in groups:
            for name in g:
                if name not in header:
                    raise DataError(f"{path}: configured column {name!r} not in header")

    sources = []
    for gi, group in enumerate(groups):
        idxs = [header.index(name) for name in group]
        values = np.zeros((len(rows), len(idxs)))
        mask = np.zeros((len(rows), len(idxs)), dtype=bool)
        for r, (_, row) in enumerate(rows):
            for c, i in enumerate(idxs):
                values[r, c], mask[r, c] = _parse_cell(row[i])
        sources.append(TimeSeriesWindow(values=values, missing_mask=mask, name=f"{path.stem}:{gi}"))
    return sources
