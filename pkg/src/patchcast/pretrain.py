"""Self-supervised objective stack and the pretraining loop.

Per step, each window in the batch contributes:
  - a masked-reconstruction term on the finest patch grid,
  - two augmented views feeding one batch-level contrastive term,
  - a forecast-head distillation term against simple fitted teachers.

total = rec + lambda_con * con + lambda_distill * distill, backpropagated
through a single graph, one AdamW update per step. Fixed seeds make the
whole loop bit-reproducible on one machine.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import TimeSeriesWindow, normalize_window
from .errors import DataError, NumericError, UsageError
from .model import Model
from .optim import AdamW, lr_at_step
from .tokenizer import patchify, replace_rows

logger = logging.getLogger(__name__)

MASK_RATIO_BOUNDS = (0.10, 0.80)
MEAN_EPS = 1e-8


# ---------------------------------------------------------------------------
# Dynamic masking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskPlan:
    masked_indices: np.ndarray
    ratio_used: float
    p_base: float = 0.4
    beta: float = 0.3


def dynamic_mask_ratio(w: TimeSeriesWindow, p_base: float = 0.4, beta: float = 0.3) -> float:
    """Mask ratio from the coefficient of variation of the raw context.

    Computed on pre-normalization values over observed entries; a near-zero
    mean degenerates the dispersion term to 0 so the base ratio applies.
    The result is clamped to [0.10, 0.80].
    """
    obs = w.values[w.missing_mask]
    if obs.size == 0:
        raise DataError("cannot compute mask ratio for an all-missing window")
    mu = float(obs.mean())
    sigma = float(obs.std())
    ratio = 0.0 if abs(mu) < MEAN_EPS else sigma / abs(mu)
    p = p_base / (1.0 + beta * ratio)
    return float(np.clip(p, *MASK_RATIO_BOUNDS))


def make_mask_plan(
    n_tokens: int, ratio: float, seed, p_base: float = 0.4, beta: float = 0.3
) -> MaskPlan:
    """Uniform without-replacement choice of max(1, round(ratio * N)) token rows."""
    if n_tokens < 1:
        raise UsageError("need at least one token to mask")
    count = max(1, int(np.floor(ratio * n_tokens + 0.5)))
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n_tokens, size=count, replace=False))
    return MaskPlan(masked_indices=idx, ratio_used=ratio, p_base=p_base, beta=beta)


def apply_mask(tokens: Tensor, plan: MaskPlan, mask_token: Tensor) -> Tensor:
    """Replace planned rows with the shared learnable mask embedding."""
    return replace_rows(tokens, plan.masked_indices, mask_token)


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------


def reconstruction_loss(decoded: Tensor, targets: np.ndarray, plan_size: int) -> Tensor:
    """Mean squared error per masked patch element, averaged over masked tokens."""
    if plan_size == 0:
        raise UsageError("reconstruction loss undefined for an empty mask set")
    diff = decoded - ad.constant(targets)
    return (diff * diff).mean(axis=1).mean()


def contrastive_loss(z: Tensor, positives: np.ndarray, temperature: float) -> Tensor:
    """InfoNCE over 2B embeddings with in-batch negatives.

    positives[i] is the row index of anchor i's positive; each anchor scores
    against the other 2B-1 rows, and the loss averages over all anchors (both
    directions of every pair). Similarity is cosine.
    """
    n = z.shape[0]
    if n < 4 or n % 2 != 0:
        raise UsageError("contrastive loss needs 2B embeddings with B >= 2")
    if temperature <= 0:
        raise UsageError("temperature must be positive")
    sq = (z * z).sum(axis=1, keepdims=True)
    if np.any(sq.data <= 0.0):
        bad = int(np.flatnonzero(sq.data <= 0.0)[0])
        raise NumericError(f"zero-norm contrastive embedding at row {bad}")
    zhat = z / sq.sqrt()
    sims = (zhat @ zhat.transpose(1, 0)) * (1.0 / temperature)
    # Remove self-similarity from every anchor's candidate set.
    diag = np.full((n, n), 0.0)
    np.fill_diagonal(diag, -1e30)
    masked = sims + ad.constant(diag)
    lse = ad.logsumexp(masked, axis=1)
    onehot = np.zeros((n, n))
    onehot[np.arange(n), positives] = 1.0
    pos_scores = (sims * ad.constant(onehot)).sum(axis=1)
    return (lse - pos_scores).mean()


def distill_loss(student: Tensor, teacher_forecasts: list[np.ndarray], weights) -> Tensor:
    """Weighted per-element Gaussian KL against each teacher's point forecast.

    Point forecasts are lifted to unit-variance Gaussians, under which the KL
    between student and teacher reduces to squared mean difference / 2.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if len(teacher_forecasts) != weights.size:
        raise UsageError("one weight per teacher forecast required")
    if abs(weights.sum() - 1.0) > 1e-6:
        raise UsageError(f"teacher weights sum to {weights.sum():.8f}, expected 1")
    total: Tensor | None = None
    for w_k, fc in zip(weights, teacher_forecasts):
        fc = np.asarray(fc, dtype=np.float64)
        if fc.shape != student.shape:
            raise UsageError(f"teacher forecast shape {fc.shape} != student shape {student.shape}")
        diff = student - ad.constant(fc)
        term = (diff * diff).mean() * (0.5 * w_k)
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    jitter_std: float = 0.05
    scale_min: float = 0.9
    scale_max: float = 1.1
    crop_min_fraction: float = 0.8


def _augment_once(w: TimeSeriesWindow, rng: np.random.Generator, cfg: AugmentConfig) -> TimeSeriesWindow:
    L = w.context_len
    frac = rng.uniform(cfg.crop_min_fraction, 1.0)
    crop_len = max(2, int(np.floor(frac * L + 0.5)))
    values = w.values
    mask = w.missing_mask
    if crop_len < L:
        start = int(rng.integers(0, L - crop_len + 1))
        seg = values[start : start + crop_len]
        seg_mask = mask[start : start + crop_len]
        grid = np.linspace(0.0, crop_len - 1.0, L)
        values = np.column_stack(
            [np.interp(grid, np.arange(crop_len), seg[:, d]) for d in range(w.n_vars)]
        )
        nearest = np.floor(grid + 0.5).astype(int)
        mask = seg_mask[nearest]
    scale = rng.uniform(cfg.scale_min, cfg.scale_max)
    values = values * scale
    if cfg.jitter_std > 0:
        values = values + rng.normal(0.0, cfg.jitter_std, size=values.shape)
    return replace(w, values=values, missing_mask=mask, target=None, horizon=0)


def augment(
    w: TimeSeriesWindow, seed, config: AugmentConfig | None = None
) -> tuple[TimeSeriesWindow, TimeSeriesWindow]:
    """Two stochastic views (crop-resize, scale, jitter); deterministic given seed."""
    cfg = config or AugmentConfig()
    rng = np.random.default_rng(seed)
    return _augment_once(w, rng, cfg), _augment_once(w, rng, cfg)


# ---------------------------------------------------------------------------
# Teachers
# ---------------------------------------------------------------------------


@dataclass
class TeacherModel:
    kind: str  # "seasonal_naive" | "linear_ar"
    domain: str = ""
    weight: float = 1.0
    period: int = 0
    coeffs: np.ndarray | None = None
    intercept: float = 0.0

    def forecast(self, context: np.ndarray, horizon: int) -> np.ndarray:
        """Per-variable point forecast from an (L, D) raw context."""
        context = np.asarray(context, dtype=np.float64)
        L, D = context.shape
        out = np.empty((horizon, D))
        if self.kind == "seasonal_naive":
            period = min(self.period, L)
            for h in range(horizon):
                out[h] = context[L - period + (h % period)]
            return out
        if self.kind == "linear_ar":
            p = len(self.coeffs)
            if L < p:
                raise DataError(f"context shorter than AR order {p}")
            for d in range(D):
                hist = list(context[-p:, d])
                for h in range(horizon):
                    nxt = self.intercept + float(np.dot(self.coeffs, hist[::-1]))
                    out[h, d] = nxt
                    hist = hist[1:] + [nxt]
            return out
        raise UsageError(f"unknown teacher kind {self.kind!r}")


def fit_teacher(
    kind: str,
    corpus: list[TimeSeriesWindow],
    *,
    domain: str = "",
    weight: float = 1.0,
    lag_range: tuple[int, int] | None = None,
    order: int = 8,
    ridge: float = 1e-3,
) -> TeacherModel:
    """Fit a simple forecaster on a raw corpus.

    seasonal_naive stores the lag maximizing the pooled autocorrelation in
    ``lag_range``; linear_ar fits a ridge-regularized AR(order) with intercept
    by least squares over all series and variables.
    """
    if not corpus:
        raise DataError("cannot fit a teacher on an empty corpus")
    columns = [s.values[:, d] for s in corpus for d in range(s.n_vars)]

    if kind == "seasonal_naive":
        min_len = min(len(c) for c in columns)
        lo, hi = lag_range or (2, max(3, min_len // 2))
        hi = min(hi, min_len - 1)
        if hi < lo:
            raise DataError(f"corpus too short for seasonal lags in [{lo}, {hi}]")
        scores = np.zeros(hi - lo + 1)
        for col in columns:
            x = col - col.mean()
            denom = float(np.dot(x, x))
            if denom == 0.0:
                continue
            for i, lag in enumerate(range(lo, hi + 1)):
                scores[i] += float(np.dot(x[lag:], x[:-lag])) / denom
        period = int(lo + np.argmax(scores))
        return TeacherModel(kind=kind, domain=domain, weight=weight, period=period)

    if kind == "linear_ar":
        rows, ys = [], []
        for col in columns:
            if len(col) <= order:
                continue
            for t in range(order, len(col)):
                rows.append(np.concatenate([col[t - order : t][::-1], [1.0]]))
                ys.append(col[t])
        if not rows:
            raise DataError(f"corpus shorter than AR order {order}")
        X = np.asarray(rows)
        y = np.asarray(ys)
        gram = X.T @ X + ridge * np.eye(order + 1)
        beta = np.linalg.solve(gram, X.T @ y)
        return TeacherModel(
            kind=kind, domain=domain, weight=weight,
            coeffs=beta[:order], intercept=float(beta[order]),
        )

    raise UsageError(f"unknown teacher kind {kind!r}")


def normalize_teacher_weights(teachers: list[TeacherModel]) -> None:
    total = sum(t.weight for t in teachers)
    if total <= 0:
        raise UsageError("teacher weights must have a positive sum")
    for t in teachers:
        t.weight /= total


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 200
    batch_size: int = 8
    seed: int = 0
    peak_lr: float = 3e-4
    warmup_fraction: float = 0.05
    weight_decay: float = 0.01
    lambda_con: float = 0.1
    lambda_distill: float = 0.5
    temperature: float = 0.1
    p_base: float = 0.4
    beta: float = 0.3
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.temperature <= 0:
            raise UsageError("temperature must be positive")
        if self.lambda_con < 0 or self.lambda_distill < 0:
            raise UsageError("loss weights must be nonnegative")
        if self.lambda_con > 0 and self.batch_size < 2:
            raise UsageError("contrastive term needs batch_size >= 2")


@dataclass(frozen=True)
class LossReport:
    step: int
    rec: float
    con: float
    distill: float
    total: float
    grad_norm: float
    mask_ratio_mean: float
    lr: float


LOG_HEADER = "step,L_rec,L_con,L_distill,L_total,grad_norm,p_m_mean"


def report_csv_line(r: LossReport) -> str:
    return (
        f"{r.step},{r.rec!r},{r.con!r},{r.distill!r},{r.total!r},"
        f"{r.grad_norm!r},{r.mask_ratio_mean!r}"
    )


class Pretrainer:
    """Owns the model, optimizer state, and deterministic seeding streams."""

    def __init__(
        self,
        model: Model,
        config: PretrainConfig,
        teachers: list[TeacherModel] | None = None,
        trainable: list[str] | None = None,
    ):
        self.model = model
        self.config = config
        self.teachers = teachers or []
        if self.teachers:
            total = sum(t.weight for t in self.teachers)
            if abs(total - 1.0) > 1e-6:
                raise UsageError(f"teacher weights sum to {total:.8f}, expected 1")
        self.opt = AdamW(
            model.params,
            trainable=trainable,
            weight_decay=config.weight_decay,
        )
        self.step_count = 0

    def _stream_seed(self, purpose: int, slot: int) -> np.random.SeedSequence:
        return np.random.SeedSequence([self.config.seed, purpose, self.step_count, slot])

    def compute_losses(self, batch: list[TimeSeriesWindow]) -> tuple[Tensor, dict, float]:
        """Assemble the combined-objective graph for one batch (no update).

        Returns the total-loss tensor, the per-term float values, and the
        batch-mean mask ratio. Seeds derive from the current step counter.
        """
        cfg = self.config
        model = self.model
        if not batch:
            raise UsageError("empty batch")

        rec_terms: list[Tensor] = []
        distill_terms: list[Tensor] = []
        z_rows: list[Tensor] = []
        ratios: list[float] = []

        for slot, w in enumerate(batch):
            wn = model.prepare_window(w)
            ratio = dynamic_mask_ratio(w, cfg.p_base, cfg.beta)
            ratios.append(ratio)
            plan = make_mask_plan(
                model.config.n_tokens, ratio, self._stream_seed(1, slot), cfg.p_base, cfg.beta
            )

            # Masked reconstruction on the finest patch grid.
            embedding = model.tokenize(wn.values, mask_indices=plan.masked_indices)
            hidden = model.encode(embedding.tokens)
            decoded = model.decode_patches(hidden, plan.masked_indices)
            targets = patchify(wn.values, model.config.scales[0]).flattened()[plan.masked_indices]
            rec_terms.append(reconstruction_loss(decoded, targets, plan.masked_indices.size))

            # Contrastive views.
            if cfg.lambda_con > 0:
                v1, v2 = augment(wn, self._stream_seed(2, slot), cfg.augment)
                for view in (v1, v2):
                    values = np.where(view.missing_mask, view.values, 0.0)
                    tokens = model.tokenize(values)
                    z_rows.append(model.project(model.encode(tokens.tokens)))

            # Distillation toward fitted teachers on the clean window.
            if cfg.lambda_distill > 0 and self.teachers:
                clean_hidden = model.encode(model.tokenize(wn.values).tokens)
                student = model.point_forecast(clean_hidden)
                mean, std = wn.norm_state
                if w.norm_state is None:
                    raw_context = w.values
                else:
                    raw_context = w.values * w.norm_state[1] + w.norm_state[0]
                fcs = [
                    (t.forecast(raw_context, model.config.horizon) - mean) / std
                    for t in self.teachers
                ]
                distill_terms.append(
                    distill_loss(student, fcs, [t.weight for t in self.teachers])
                )

        n = float(len(batch))
        rec = sum(rec_terms[1:], rec_terms[0]) * (1.0 / n)
        total = rec
        con: Tensor | None = None
        if cfg.lambda_con > 0:
            z = ad.concat(z_rows, axis=0)
            positives = np.arange(z.shape[0]) ^ 1
            con = contrastive_loss(z, positives, cfg.temperature)
            total = total + cfg.lambda_con * con
        dist: Tensor | None = None
        if distill_terms:
            dist = sum(distill_terms[1:], distill_terms[0]) * (1.0 / n)
            total = total + cfg.lambda_distill * dist

        report_values = {
            "rec": rec.item(),
            "con": con.item() if con is not None else 0.0,
            "distill": dist.item() if dist is not None else 0.0,
            "total": total.item(),
        }
        if not all(np.isfinite(v) for v in report_values.values()):
            raise NumericError(f"non-finite pretraining loss at step {self.step_count}: {report_values}")
        return total, report_values, float(np.mean(ratios))

    def pretrain_step(self, batch: list[TimeSeriesWindow]) -> LossReport:
        """One combined-objective update; returns the per-term loss report."""
        self.model.zero_grad()
        total, report_values, ratio_mean = self.compute_losses(batch)
        total.backward()
        cfg = self.config
        lr = lr_at_step(self.step_count, cfg.steps, cfg.peak_lr, cfg.warmup_fraction)
        grad_norm = self.opt.grad_norm()
        self.opt.step(lr)

        report = LossReport(
            step=self.step_count,
            rec=report_values["rec"],
            con=report_values["con"],
            distill=report_values["distill"],
            total=report_values["total"],
            grad_norm=grad_norm,
            mask_ratio_mean=ratio_mean,
            lr=lr,
        )
        self.step_count += 1
        return report

    def sample_batch(self, windows: list[TimeSeriesWindow]) -> list[TimeSeriesWindow]:
        rng = np.random.default_rng(self._stream_seed(0, 0))
        idx = rng.choice(len(windows), size=min(self.config.batch_size, len(windows)), replace=False)
        return [windows[i] for i in idx]


def run_pretraining(
    model: Model,
    windows: list[TimeSeriesWindow],
    config: PretrainConfig,
    teachers: list[TeacherModel] | None = None,
    log_path=None,
) -> list[LossReport]:
    """Drive ``config.steps`` updates, optionally appending the CSV metrics log."""
    if not windows:
        raise DataError("pretraining corpus is empty")
    trainer = Pretrainer(model, config, teachers)
    reports = []
    lines = [LOG_HEADER]
    for _ in range(config.steps):
        batch = trainer.sample_batch(windows)
        report = trainer.pretrain_step(batch)
        reports.append(report)
        lines.append(report_csv_line(report))
        if report.step % 50 == 0:
            logger.info(
                "step %d: total=%.5f rec=%.5f con=%.5f distill=%.5f",
                report.step, report.total, report.rec, report.con, report.distill,
            )
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    return reports
