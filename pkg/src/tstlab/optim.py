"""AdamW with decoupled weight decay, global-norm clipping and the WSD schedule."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .errors import NumericError


def wsd_lr(step: int, plan) -> float:
    """Warmup-Stable-Decay learning rate at ``step``.

    Linear 0 -> peak over the warmup, flat at peak, then linear peak -> 0
    over the last ``decay_fraction`` of the run.
    """
    total = plan.total_steps
    warm = plan.resolved_warmup()
    decay = plan.decay_steps()
    peak = plan.peak_lr
    if step < warm:
        return peak * step / warm
    if decay and step >= total - decay:
        return peak * max(total - step, 0) / decay
    return peak


class AdamW:
    """Bias-corrected Adam moments with decay applied straight to the weights.

    Moments are keyed by parameter name and stored in the parameter's dtype.
    """

    def __init__(self, betas=(0.9, 0.95), eps: float = 1e-8, weight_decay: float = 0.0):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    @classmethod
    def from_plan(cls, plan) -> "AdamW":
        return cls((plan.beta1, plan.beta2), plan.eps, plan.weight_decay)

    def reset(self, names=None) -> None:
        if names is None:
            self.m.clear()
            self.v.clear()
            self.t = 0
            return
        for n in names:
            self.m.pop(n, None)
            self.v.pop(n, None)

    def step(self, params: dict, grads: dict, lr: float) -> None:
        """Update ``params`` (name -> Tensor) in place from ``grads`` (name -> array)."""
        for name, g in grads.items():
            if g is not None and not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            w = p.data
            if name not in self.m:
                self.m[name] = np.zeros_like(w)
                self.v[name] = np.zeros_like(w)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay:
                w *= 1.0 - lr * self.weight_decay
            w -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values() if g is not None))


def clip_grads(grads: dict, max_norm: Optional[float]) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericError("gradient norm is not finite")
    if max_norm is not None and norm > max_norm:
        f = max_norm / norm
        for g in grads.values():
            if g is not None:
                g *= f
    return norm


def adamw_step(state, opt: AdamW, plan, step: int) -> float:
    """Clip, then apply one AdamW update to ``state`` at the WSD rate for ``step``.

    Gradients are read from ``state``'s parameters.  Returns the pre-clip
    gradient norm.  Raises :class:`NumericError` before touching any weight
    if a gradient is non-finite.
    """
    grads = {k: p.grad for k, p in state.params.items()}
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name} at step {step}")
    norm = clip_grads(grads, plan.grad_clip)
    opt.step(state.params, grads, wsd_lr(step, plan))
    return norm
