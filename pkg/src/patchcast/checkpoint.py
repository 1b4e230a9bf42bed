"""Binary model checkpoints.

Layout (all integers little-endian u32, floats little-endian f32):

    magic "PFMT" | version | config_len | config UTF-8 bytes
    then per tensor, sorted by name:
    name_len | name UTF-8 | rank | dim_0 .. dim_{rank-1} | raw f32 values

The config blob is a flat key-value text with [model], [training], and
[metadata] sections. Loading keeps the blob verbatim, so save -> load ->
save reproduces the file byte for byte; model parameters are stored on the
float32 grid at all times, so forward outputs survive a round-trip
bit-exactly.
"""

from __future__ import annotations

import datetime as _dt
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import configio
from .errors import DataError
from .model import Model, quantize32

MAGIC = b"PFMT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    version: int
    config_text: str
    tensors: dict[str, np.ndarray]  # float32, sorted by name

    @property
    def sections(self) -> configio.Sections:
        return configio.parse_config_text(self.config_text)

    @property
    def step(self) -> int:
        return int(self.sections.get("training", {}).get("step", "0"))

    @property
    def seed(self) -> int:
        return int(self.sections.get("training", {}).get("seed", "0"))


def _config_blob(model: Model, step: int, seed: int, metadata: dict[str, str] | None,
                 timestamps: bool) -> str:
    sections: configio.Sections = {
        "format": {"version": str(FORMAT_VERSION)},
        "model": configio.model_config_to_section(model.config),
        "training": {"step": str(step), "seed": str(seed)},
    }
    meta = dict(metadata or {})
    if timestamps:
        meta.setdefault("created", _dt.datetime.now(_dt.timezone.utc).isoformat())
    if meta:
        sections["metadata"] = meta
    return configio.render_config(sections)


def save_checkpoint(
    path: str | Path,
    model: Model,
    *,
    step: int = 0,
    seed: int = 0,
    metadata: dict[str, str] | None = None,
    timestamps: bool = True,
    config_text: str | None = None,
) -> None:
    """Write the model to ``path``; pass ``config_text`` to preserve a loaded blob."""
    blob = (config_text or _config_blob(model, step, seed, metadata, timestamps)).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in sorted(model.params):
            data = quantize32(model.params[name].data).astype("<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.tobytes())


def resave_checkpoint(path: str | Path, ckpt: Checkpoint, model: Model) -> None:
    """Re-serialize a loaded checkpoint without regenerating its metadata."""
    save_checkpoint(path, model, config_text=ckpt.config_text)


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DataError(f"truncated checkpoint while reading {what}")
    return buf


def read_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise DataError(f"bad magic {magic!r} in {path} (expected {MAGIC!r})")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint format version {version}")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config_text = _read_exact(fh, blob_len, "config blob").decode("utf-8")

        tensors: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise DataError("truncated checkpoint while reading tensor name length")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "tensor name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name}"))
            dims = tuple(
                struct.unpack("<I", _read_exact(fh, 4, f"dims of {name}"))[0] for _ in range(rank)
            )
            count = int(np.prod(dims, dtype=np.int64)) if dims else 1
            raw = _read_exact(fh, 4 * count, f"data of {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims)
    return Checkpoint(version=version, config_text=config_text, tensors=tensors)


def load_checkpoint(path: str | Path) -> tuple[Model, Checkpoint]:
    """Rebuild a model whose forward outputs are bit-identical to pre-save."""
    ckpt = read_checkpoint(path)
    config = configio.model_config_from_sections(ckpt.sections)
    model = Model.init(config, seed=0)
    expected = set(model.params)
    got = set(ckpt.tensors)
    if expected != got:
        missing = sorted(expected - got)
        extra = sorted(got - expected)
        raise DataError(
            f"checkpoint tensor names do not match config: missing {missing[:4]}, unexpected {extra[:4]}"
        )
    for name, arr in ckpt.tensors.items():
        tensor = model.params[name]
        if arr.shape != tensor.data.shape:
            raise DataError(
                f"tensor {name}: checkpoint shape {arr.shape} != configured shape {tensor.data.shape}"
            )
        tensor.data = arr.astype(np.float64)
    return model, ckpt
