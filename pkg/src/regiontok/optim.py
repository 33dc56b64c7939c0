"""AdamW with global-norm clipping and a warmup + cosine decay schedule.

The learning rate ramps linearly to the base rate over the warmup steps,
then follows a half-cosine to zero at the final step. Weight decay is
decoupled and skipped for LayerNorm parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .model import RenParams


def learning_rate(step: int, base_lr: float, warmup_steps: int,
                  total_steps: int) -> float:
    if step < 1:
        raise ValidationError("step index starts at 1")
    if step <= warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + float(np.cos(np.pi * progress)))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is <= max_norm.
    Returns the pre-clip norm."""
    total = 0.0
    for arr in grads.values():
        total += float((arr.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        factor = max_norm / norm
        for arr in grads.values():
            arr *= arr.dtype.type(factor)
    return norm


def _decays(name: str) -> bool:
    return ".ln1." not in name and ".ln2." not in name


@dataclass
class AdamW:
    lr: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 1000
    grad_clip_norm: float = 5.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: RenParams, grads: dict[str, np.ndarray]) -> dict:
        """One optimizer step, mutating params in place.

        Returns {"lr", "grad_norm"} for logging. Gradients are clipped to the
        configured global norm before the moment updates.
        """
        self.step_count += 1
        t = self.step_count
        lr = learning_rate(t, self.lr, self.warmup_steps, self.total_steps)
        norm = clip_global_norm(grads, self.grad_clip_norm)
        bias1 = 1.0 - self.beta1 ** t
        bias2 = 1.0 - self.beta2 ** t
        for name, arr in params.named_tensors():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(arr)
                self.v[name] = np.zeros_like(arr)
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            m_hat = m / arr.dtype.type(bias1)
            v_hat = v / arr.dtype.type(bias2)
            update = m_hat / (np.sqrt(v_hat) + arr.dtype.type(self.eps))
            if self.weight_decay > 0 and _decays(name):
                update = update + arr.dtype.type(self.weight_decay) * arr
            arr -= arr.dtype.type(lr) * update
        return {"lr": lr, "grad_norm": norm}
