"""Patch segmentation and token embedding.

A window is cut into non-overlapping patches at each scale, each patch is
flattened (time-major, then variable) and linearly embedded, coarse scales
are upsampled onto the finest patch grid by nearest-neighbor repetition,
and the scales are combined with softmax-normalized learned weights before
a fixed sinusoidal positional encoding is added.

Leftover timesteps never tile exactly; they are trimmed from the oldest
end so the final patch is always flush with the most recent observation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, UsageError


@dataclass(frozen=True)
class PatchGrid:
    """Per-scale segmentation of a window into N_p patches of length P."""

    scale_index: int
    patch_len: int
    n_patches: int
    patches: np.ndarray  # (N_p, P, D)
    dropped_prefix: int

    @property
    def n_vars(self) -> int:
        return self.patches.shape[2]

    def flattened(self) -> np.ndarray:
        """(N_p, P*D) rows, time-major then variable."""
        n, p, d = self.patches.shape
        return self.patches.reshape(n, p * d)


def patchify(values: np.ndarray, patch_len: int, scale_index: int = 0) -> PatchGrid:
    """Segment (L, D) values into floor(L/P) patches, trimming the oldest rows."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise UsageError(f"patchify expects an L x D matrix, got shape {values.shape}")
    L = values.shape[0]
    if patch_len < 1:
        raise UsageError(f"patch length must be >= 1, got {patch_len}")
    if L < patch_len:
        raise DataError(f"window length {L} shorter than patch length {patch_len}")
    n_patches = L // patch_len
    dropped = L - n_patches * patch_len
    trimmed = values[dropped:]
    patches = trimmed.reshape(n_patches, patch_len, values.shape[1])
    return PatchGrid(
        scale_index=scale_index,
        patch_len=patch_len,
        n_patches=n_patches,
        patches=patches,
        dropped_prefix=dropped,
    )


def unpatchify(grid: PatchGrid) -> np.ndarray:
    """Concatenate patches back into the retained (L - dropped_prefix, D) suffix."""
    n, p, d = grid.patches.shape
    return grid.patches.reshape(n * p, d)


def positional_encoding(n_positions: int, d_model: int) -> np.ndarray:
    """Fixed sinusoidal encoding; parameter-free and deterministic."""
    if d_model % 2 != 0:
        raise UsageError(f"d_model must be even for sinusoidal encoding, got {d_model}")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d_model)
    pe = np.zeros((n_positions, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def validate_scales(scales: tuple[int, ...]) -> None:
    """Scales must follow the doubling rule P_k = 2^(k-1) * P_1."""
    if not scales:
        raise UsageError("at least one patch scale is required")
    base = scales[0]
    for k, p in enumerate(scales):
        if p != base * 2**k:
            raise UsageError(f"scales {scales} violate the doubling rule at position {k}")


def embed_patches(grid: PatchGrid, weight: Tensor, bias: Tensor) -> Tensor:
    """Linear projection of flattened patches: rows = flat @ W + b.

    weight has shape (P*D, d_model); bias (d_model,).
    """
    flat = grid.flattened()
    in_dim = flat.shape[1]
    if weight.shape[0] != in_dim:
        raise UsageError(
            f"embedder weight expects input dim {weight.shape[0]}, patches flatten to {in_dim}"
        )
    return ad.constant(flat) @ weight + bias


def coarse_to_fine_indices(L: int, scales: tuple[int, ...], scale_index: int) -> np.ndarray:
    """Map each finest-grid patch to its nearest patch at a coarser scale.

    Alignment is by timestep: both grids are flush with the window end, so
    the few oldest fine patches that fall before the coarse grid's start
    clamp to the oldest coarse patch.
    """
    p1, pk = scales[0], scales[scale_index]
    n_fine = L // p1
    n_coarse = L // pk
    d_fine = L - n_fine * p1
    d_coarse = L - n_coarse * pk
    starts = d_fine + np.arange(n_fine) * p1
    idx = (starts - d_coarse) // pk
    return np.clip(idx, 0, n_coarse - 1)


@dataclass
class TokenEmbedding:
    """Final token sequence plus the scale-mixing weights that produced it."""

    tokens: Tensor  # (N, d_model)
    scale_weights: np.ndarray  # (K,), nonnegative, sums to 1
    d_model: int

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


def multiscale_tokenize(
    values: np.ndarray,
    embed_weights: list[Tensor],
    embed_biases: list[Tensor],
    agg_logits: Tensor,
    scales: tuple[int, ...],
    *,
    mask_indices: np.ndarray | None = None,
    mask_token: Tensor | None = None,
    add_positional: bool = True,
) -> TokenEmbedding:
    """Embed at every scale, aggregate onto the finest grid, add position info.

    When ``mask_indices`` is given, those finest-grid rows are replaced by the
    learnable mask embedding after aggregation and before the positional
    encoding, so masked positions keep their temporal identity.
    """
    validate_scales(scales)
    values = np.asarray(values, dtype=np.float64)
    L = values.shape[0]
    if L < scales[-1]:
        raise DataError(f"window length {L} shorter than coarsest patch {scales[-1]}")
    if len(embed_weights) != len(scales) or len(embed_biases) != len(scales):
        raise UsageError("one embedder weight/bias pair is required per scale")

    d_model = embed_weights[0].shape[1]
    n_fine = L // scales[0]
    alpha = ad.softmax(agg_logits, axis=0)

    agg: Tensor | None = None
    for k, p in enumerate(scales):
        grid = patchify(values, p, scale_index=k)
        emb = embed_patches(grid, embed_weights[k], embed_biases[k])
        if k > 0:
            emb = emb.take(coarse_to_fine_indices(L, scales, k), axis=0)
        weighted = emb * alpha.take([k], axis=0)
        agg = weighted if agg is None else agg + weighted

    tokens = agg
    if mask_indices is not None and len(mask_indices) > 0:
        if mask_token is None:
            raise UsageError("mask_indices given without a mask token")
        tokens = replace_rows(tokens, np.asarray(mask_indices), mask_token)

    if add_positional:
        tokens = tokens + ad.constant(positional_encoding(n_fine, d_model))
    return TokenEmbedding(tokens=tokens, scale_weights=alpha.data.copy(), d_model=d_model)


def replace_rows(tokens: Tensor, indices: np.ndarray, row: Tensor) -> Tensor:
    """Replace the given rows with a shared embedding; other rows untouched.

    Implemented multiplicatively so gradients flow to the replacement row and
    are cut for the replaced inputs.
    """
    n = tokens.shape[0]
    indices = np.asarray(indices, dtype=np.intp)
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise UsageError(f"row index out of range [0, {n})")
    keep = np.ones((n, 1))
    keep[indices] = 0.0
    fill = row.reshape(1, row.size)
    return tokens * ad.constant(keep) + fill * ad.constant(1.0 - keep)
