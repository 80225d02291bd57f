"""Central finite-difference checks for autodiff gradients."""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from .tensor import Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5,
                 indices: Optional[Iterable[int]] = None) -> dict[int, float]:
    """Central differences of scalar ``f`` w.r.t. flat entries of ``arr`` (mutated and restored)."""
    flat = arr.reshape(-1)
    out = {}
    for i in (range(flat.size) if indices is None else indices):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out[int(i)] = (up - down) / (2 * h)
    return out


def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5,
                    max_entries: Optional[int] = None, seed: int = 0, floor: float = 1e-6) -> dict[str, float]:
    """Max relative error between autodiff and finite differences, per parameter.

    ``loss_fn`` rebuilds the graph from the current parameter values.  With
    ``max_entries`` only that many randomly chosen entries per tensor are
    probed.  ``floor`` keeps near-zero gradients from inflating the ratio.
    """
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    worst = {}
    for name, p in params.items():
        n = p.data.size
        idx = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        num = numeric_grad(lambda: loss_fn().item(), p.data, h, idx)
        an = np.zeros(n) if p.grad is None else p.grad.reshape(-1)
        errs = relative_error(an[idx], np.array([num[int(i)] for i in idx]), floor)
        worst[name] = float(errs.max()) if errs.size else 0.0
    return worst
