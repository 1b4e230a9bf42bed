"""Flat key-value config files with [section] headers.

The same renderer produces CLI experiment configs and the UTF-8 config blob
embedded in binary checkpoints, so both stay diffable and byte-deterministic
(sections and keys are written in a fixed order).
"""

from __future__ import annotations

from pathlib import Path

from .data import SyntheticSpec
from .errors import DataError, UsageError
from .model import ModelConfig
from .pretrain import PretrainConfig

Sections = dict[str, dict[str, str]]


def parse_config_text(text: str) -> Sections:
    sections: Sections = {}
    current: dict[str, str] | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            current = sections.setdefault(name, {})
            continue
        if "=" not in line:
            raise DataError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        if current is None:
            raise DataError(f"config line {lineno}: key before any [section]")
        key, value = line.split("=", 1)
        current[key.strip()] = value.strip()
    return sections


def read_config(path: str | Path) -> Sections:
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"))


def render_config(sections: Sections) -> str:
    """Deterministic text: section order as given, keys in insertion order."""
    lines = []
    for name, kv in sections.items():
        lines.append(f"[{name}]")
        for key, value in kv.items():
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def write_config(sections: Sections, path: str | Path) -> None:
    Path(path).write_text(render_config(sections), encoding="utf-8")


# ---------------------------------------------------------------------------
# Typed accessors
# ---------------------------------------------------------------------------


def _get(sections: Sections, section: str, key: str, default, cast):
    raw = sections.get(section, {}).get(key)
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError:
        raise UsageError(f"[{section}] {key}: cannot parse {raw!r}") from None


def _int_tuple(raw: str) -> tuple[int, ...]:
    return tuple(int(x) for x in raw.split(",") if x.strip())


def _float_tuple(raw: str) -> tuple[float, ...]:
    return tuple(float(x) for x in raw.split(",") if x.strip())


def _bool(raw: str) -> bool:
    if raw.lower() in ("1", "true", "yes", "on"):
        return True
    if raw.lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


# ---------------------------------------------------------------------------
# Model / pretrain configs <-> sections
# ---------------------------------------------------------------------------


def model_config_to_section(config: ModelConfig) -> dict[str, str]:
    return {
        "context_len": str(config.context_len),
        "horizon": str(config.horizon),
        "n_vars": str(config.n_vars),
        "scales": ",".join(str(p) for p in config.scales),
        "d_model": str(config.d_model),
        "n_layers": str(config.n_layers),
        "n_heads": str(config.n_heads),
        "d_ff": str(config.d_ff),
        "adapter_enabled": str(config.adapter_enabled).lower(),
        "d_bottleneck": str(config.d_bottleneck),
        "proj_dim": str(config.proj_dim),
    }


def model_config_from_sections(sections: Sections, base: ModelConfig | None = None) -> ModelConfig:
    base = base or ModelConfig()
    return ModelConfig(
        context_len=_get(sections, "model", "context_len", base.context_len, int),
        horizon=_get(sections, "model", "horizon", base.horizon, int),
        n_vars=_get(sections, "model", "n_vars", base.n_vars, int),
        scales=_get(sections, "model", "scales", base.scales, _int_tuple),
        d_model=_get(sections, "model", "d_model", base.d_model, int),
        n_layers=_get(sections, "model", "n_layers", base.n_layers, int),
        n_heads=_get(sections, "model", "n_heads", base.n_heads, int),
        d_ff=_get(sections, "model", "d_ff", base.d_ff, int),
        adapter_enabled=_get(sections, "model", "adapter_enabled", base.adapter_enabled, _bool),
        d_bottleneck=_get(sections, "model", "d_bottleneck", base.d_bottleneck, int),
        proj_dim=_get(sections, "model", "proj_dim", base.proj_dim, int),
    )


def pretrain_config_from_sections(sections: Sections, base: PretrainConfig | None = None) -> PretrainConfig:
    base = base or PretrainConfig()
    return PretrainConfig(
        steps=_get(sections, "pretrain", "steps", base.steps, int),
        batch_size=_get(sections, "pretrain", "batch_size", base.batch_size, int),
        seed=_get(sections, "pretrain", "seed", base.seed, int),
        peak_lr=_get(sections, "pretrain", "peak_lr", base.peak_lr, float),
        warmup_fraction=_get(sections, "pretrain", "warmup_fraction", base.warmup_fraction, float),
        weight_decay=_get(sections, "pretrain", "weight_decay", base.weight_decay, float),
        lambda_con=_get(sections, "pretrain", "lambda_con", base.lambda_con, float),
        lambda_distill=_get(sections, "pretrain", "lambda_distill", base.lambda_distill, float),
        temperature=_get(sections, "pretrain", "temperature", base.temperature, float),
        p_base=_get(sections, "pretrain", "p_base", base.p_base, float),
        beta=_get(sections, "pretrain", "beta", base.beta, float),
    )


def synthetic_spec_to_sections(spec: SyntheticSpec) -> Sections:
    section = {
        "family": spec.family,
        "length": str(spec.length),
        "n_series": str(spec.n_series),
        "seed": str(spec.seed),
    }
    for key, value in sorted(spec.resolved_params().items()):
        if isinstance(value, (tuple, list)):
            section[key] = ",".join(repr(float(v)) for v in value)
        else:
            section[key] = repr(float(value))
    return {"synthetic": section}


def synthetic_spec_from_sections(sections: Sections) -> SyntheticSpec:
    if "synthetic" not in sections:
        raise DataError("config has no [synthetic] section")
    kv = dict(sections["synthetic"])
    family = kv.pop("family", None)
    if family is None:
        raise DataError("[synthetic] section missing 'family'")
    length = int(kv.pop("length", "0"))
    n_series = int(kv.pop("n_series", "1"))
    seed = int(kv.pop("seed", "0"))
    params = {}
    for key, raw in kv.items():
        if "," in raw:
            params[key] = _float_tuple(raw)
        else:
            params[key] = float(raw)
    if "coeffs" in params and not isinstance(params["coeffs"], tuple):
        params["coeffs"] = (params["coeffs"],)
    return SyntheticSpec(family=family, length=length, n_series=n_series, seed=seed, params=params)
