"""AdamW with a linear-warmup / cosine-decay step-size schedule.

Updated parameters are re-quantized onto the float32 grid after every step
so a model can be checkpointed bit-exactly at any point during training.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .model import quantize32


def lr_at_step(step: int, total_steps: int, peak_lr: float, warmup_fraction: float = 0.05) -> float:
    """Step-size at 0-based ``step``: linear warmup to peak, then cosine to 0."""
    if total_steps <= 0:
        return peak_lr
    warmup = max(1, int(round(warmup_fraction * total_steps)))
    if step < warmup:
        return peak_lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return peak_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def _decay_exempt(name: str) -> bool:
    # Biases, norm gains, scale logits, and the mask token carry no weight decay.
    last = name.rsplit(".", 1)[-1]
    return last.startswith("b") or last in ("gain", "logits", "token")


class AdamW:
    """Decoupled weight decay Adam over a named parameter dict."""

    def __init__(
        self,
        params: dict[str, Tensor],
        trainable: list[str] | None = None,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.names = sorted(trainable if trainable is not None else params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(params[n].data) for n in self.names}
        self.v = {n: np.zeros_like(params[n].data) for n in self.names}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name in self.names:
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            mhat = self.m[name] / bias1
            vhat = self.v[name] / bias2
            update = mhat / (np.sqrt(vhat) + self.eps)
            if self.weight_decay and not _decay_exempt(name):
                update = update + self.weight_decay * p.data
            p.data = quantize32(p.data - lr * update)

    def grad_norm(self) -> float:
        acc = 0.0
        for name in self.names:
            g = self.params[name].grad
            if g is not None:
                acc += float(np.sum(g * g))
        return float(np.sqrt(acc))
