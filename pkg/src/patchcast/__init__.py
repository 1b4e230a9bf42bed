"""Desk-scale patch-based time-series foundation model."""

from .data import (
    CsvConfig,
    SyntheticSpec,
    TimeSeriesWindow,
    generate_synthetic,
    ingest_csv,
    inject_missing,
    make_windows,
    normalize_window,
    denormalize_window,
)
from .encoder import EncoderConfig, adapter_forward, attention_flops, count_params, encoder_forward
from .forecast import (
    FinetuneConfig,
    ForecastResult,
    finetune_adapters,
    pinball_loss,
    train_supervised,
    zero_shot_forecast,
)
from .model import Model, ModelConfig, QUANTILE_LEVELS
from .pretrain import (
    AugmentConfig,
    LossReport,
    MaskPlan,
    PretrainConfig,
    Pretrainer,
    TeacherModel,
    apply_mask,
    augment,
    contrastive_loss,
    distill_loss,
    dynamic_mask_ratio,
    fit_teacher,
    make_mask_plan,
    reconstruction_loss,
    run_pretraining,
)
from .evaluate import (
    MetricReport,
    attention_bench,
    compute_metrics,
    evaluate_model,
    few_shot_experiment,
    missing_data_sweep,
    scaling_curve,
    transfer_experiment,
)
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .tokenizer import (
    PatchGrid,
    TokenEmbedding,
    multiscale_tokenize,
    patchify,
    positional_encoding,
    unpatchify,
)

__version__ = "0.1.0"
