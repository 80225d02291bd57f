"""Mutual-information decay, power-law fits, FLOPs accounting and reporting."""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ContractError, TSTError
from .model import ModelConfig, forward
from .tensor import no_grad


class FitError(TSTError):
    """The curve does not identify a power law; ``diagnostics`` says why."""

    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class MiCurve:
    distances: np.ndarray
    mi: np.ndarray
    pair_counts: np.ndarray
    stderr: np.ndarray = None
    bias: np.ndarray = None
    flags: list = field(default_factory=list)

    def valid(self) -> np.ndarray:
        return np.isfinite(self.mi)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["distance", "mi_nats", "pairs", "stderr", "miller_madow_bias", "flag"])
        for i, d in enumerate(self.distances):
            w.writerow([int(d), f"{self.mi[i]:.10g}", int(self.pair_counts[i]),
                        "" if self.stderr is None else f"{self.stderr[i]:.6g}",
                        "" if self.bias is None else f"{self.bias[i]:.6g}",
                        self.flags[i] if self.flags else ""])
        return buf.getvalue()


@dataclass
class PowerLawFit:
    C0: float
    a: float
    k: float
    rss: float
    domain: tuple
    decaying: bool

    def __call__(self, d):
        return self.C0 + self.a * np.asarray(d, dtype=np.float64) ** self.k

    def to_csv(self) -> str:
        return ("C0,a,k,rss,d_min,d_max,decaying\n"
                f"{self.C0:.10g},{self.a:.10g},{self.k:.10g},{self.rss:.6g},"
                f"{self.domain[0]},{self.domain[1]},{int(self.decaying)}\n")


# ---------------------------------------------------------------------------
# mutual information


def cap_vocabulary(tokens: np.ndarray, cap: Optional[int]) -> tuple[np.ndarray, int]:
    """Map the ``cap`` most frequent ids to ``0..cap-1`` and the rest to ``cap``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    k = int(tokens.max()) + 1 if tokens.size else 1
    if cap is None or cap >= k:
        return tokens, k
    order = np.argsort(-np.bincount(tokens), kind="stable")
    remap = np.full(k, cap, dtype=np.int64)
    remap[order[:cap]] = np.arange(cap)
    return remap[tokens], cap + 1


def _plugin_mi(codes: np.ndarray, k: int) -> tuple[float, float]:
    """Plug-in MI (nats) of pairs coded as ``x*k + y`` and its Miller-Madow bias."""
    n = codes.size
    joint = np.bincount(codes, minlength=k * k).reshape(k, k).astype(np.float64)
    px = joint.sum(axis=1)
    py = joint.sum(axis=0)
    nz = joint > 0
    ratio = joint[nz] * n / np.outer(px, py)[nz]
    mi = float((joint[nz] * np.log(ratio)).sum() / n)
    bias = (nz.sum() - (px > 0).sum() - (py > 0).sum() + 1) / (2.0 * n)
    return mi, float(bias)


def estimate_mi(tokens, max_distance: int, vocab_cap: Optional[int] = None, bootstrap: int = 100,
                block: int = 256, min_pairs: Optional[int] = None, seed: int = 0) -> MiCurve:
    """Plug-in MI between ``x_t`` and ``x_{t+d}`` for ``d = 1..max_distance``.

    ``stderr`` comes from a moving-block bootstrap over pair positions
    (blocks keep the serial dependence of the stream).  Distances with fewer
    than ``min_pairs`` pairs (default ``10 * K**2``) are flagged and left NaN.
    Values are not bias corrected; the Miller-Madow bias is reported.
    """
    tokens = getattr(tokens, "tokens", tokens)
    codes_src, k = cap_vocabulary(np.asarray(tokens), vocab_cap)
    if max_distance < 1:
        raise ContractError("max_distance must be >= 1")
    min_pairs = 10 * k * k if min_pairs is None else min_pairs
    rng = np.random.default_rng(seed)
    ds = np.arange(1, max_distance + 1)
    mi = np.full(len(ds), np.nan)
    se = np.full(len(ds), np.nan)
    bias = np.full(len(ds), np.nan)
    counts = np.zeros(len(ds), dtype=np.int64)
    flags = [""] * len(ds)
    for i, d in enumerate(ds):
        n = codes_src.size - d
        counts[i] = max(n, 0)
        if n < min_pairs:
            flags[i] = "insufficient_pairs"
            continue
        codes = codes_src[:-d] * k + codes_src[d:]
        val, bias[i] = _plugin_mi(codes, k)
        if val < 0:
            val, flags[i] = 0.0, "clipped_negative"
        mi[i] = val
        if bootstrap:
            b = min(block, n)
            nblocks = int(math.ceil(n / b))
            offs = np.arange(b)
            reps = np.empty(bootstrap)
            for j in range(bootstrap):
                starts = rng.integers(0, n - b + 1, size=nblocks)
                idx = (starts[:, None] + offs[None, :]).reshape(-1)[:n]
                reps[j] = _plugin_mi(codes[idx], k)[0]
            se[i] = reps.std(ddof=1)
    return MiCurve(ds, mi, counts, se, bias, flags)


# ---------------------------------------------------------------------------
# power-law fit


def _profile(d: np.ndarray, y: np.ndarray, k: float):
    x = np.column_stack([np.ones_like(d), d ** k])
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    r = y - x @ coef
    return float(r @ r), coef


def fit_power_law(curve, k_range=(-3.0, -0.1), grid: int = 291) -> PowerLawFit:
    """Least-squares fit of ``mi(d) = C0 + a * d**k``.

    For fixed ``k`` the model is linear in ``(C0, a)``, so the fit profiles
    out those two by least squares, scans ``k`` on a grid and polishes the
    best grid point with a bounded scalar minimiser.  Works in linear space.
    """
    if isinstance(curve, MiCurve):
        ok = curve.valid()
        d, y = curve.distances[ok].astype(np.float64), curve.mi[ok].astype(np.float64)
    else:
        d, y = (np.asarray(v, dtype=np.float64) for v in curve)
        ok = np.isfinite(y)
        d, y = d[ok], y[ok]
    if d.size < 4:
        raise FitError(f"need at least 4 valid distances, got {d.size}", {"valid": int(d.size)})
    spread = float(np.ptp(y))
    if spread <= 1e-12 * max(1.0, float(np.abs(y).max())):
        raise FitError("curve is flat; the exponent is not identifiable",
                       {"spread": spread, "mean": float(y.mean())})
    ks = np.linspace(k_range[0], k_range[1], grid)
    rss = np.array([_profile(d, y, k)[0] for k in ks])
    j = int(np.argmin(rss))
    lo, hi = ks[max(j - 1, 0)], ks[min(j + 1, grid - 1)]
    res = minimize_scalar(lambda k: _profile(d, y, k)[0], bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-12})
    k = float(res.x) if res.fun <= rss[j] else float(ks[j])
    best, (c0, a) = _profile(d, y, k)
    fit = PowerLawFit(float(c0), float(a), k, best, (int(d.min()), int(d.max())), bool(a > 0 and k < 0))
    if not fit.decaying:
        warnings.warn(f"fitted power law is not decaying (a={a:.4g}, k={k:.4g})", RuntimeWarning, stacklevel=2)
    return fit


# ---------------------------------------------------------------------------
# compute


def flops_breakdown(cfg: ModelConfig, base_length: int, s: int = 1, phase: str = "superposition") -> dict:
    """Forward FLOPs per sequence by term (2 FLOPs per multiply-accumulate).

    The latent length is ``base_length`` in both phases; only the input
    embedding differs: a bag mean costs ``s`` operations per element per
    position, while a plain lookup is free.
    """
    if phase not in ("superposition", "recovery"):
        raise ContractError(f"unknown phase {phase!r}")
    l, d, f, v = base_length, cfg.d_model, cfg.d_ff, cfg.vocab_size
    bag = s if phase == "superposition" else 1
    per_layer_proj = 2 * l * 4 * d * d
    per_layer_attn = 2 * 2 * l * l * d
    per_layer_mlp = 2 * l * 3 * d * f
    return {
        "embedding": l * bag * d if bag > 1 else 0,
        "attention_proj": cfg.n_layers * per_layer_proj,
        "attention_scores": cfg.n_layers * per_layer_attn,
        "mlp": cfg.n_layers * per_layer_mlp,
        "head": 2 * l * d * v,
    }


def flops_per_step(cfg: ModelConfig, base_length: int, s: int = 1, phase: str = "superposition",
                   batch_rows: int = 1) -> float:
    return float(batch_rows * sum(flops_breakdown(cfg, base_length, s, phase).values()))


# ---------------------------------------------------------------------------
# evaluation and reporting


def eval_ce(state, tokens, batch_rows: int = 16, length: Optional[int] = None, max_windows: int = 64) -> float:
    """Mean next-token CE (nats) over the first ``max_windows`` held-out windows."""
    tokens = np.asarray(getattr(tokens, "tokens", tokens))
    length = length or state.config.max_len
    starts = list(range(0, len(tokens) - length, length))[:max_windows]
    if not starts:
        raise ContractError(f"held-out slice of {len(tokens)} tokens is shorter than one window")
    total, count = 0.0, 0
    with no_grad():
        for i in range(0, len(starts), batch_rows):
            chunk = starts[i:i + batch_rows]
            win = np.stack([tokens[p: p + length + 1] for p in chunk])
            z = forward(state, win[:, :-1], "none").data.astype(np.float64)
            m = z.max(axis=-1, keepdims=True)
            lse = (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[..., 0]
            picked = np.take_along_axis(z, win[:, 1:, None], axis=-1)[..., 0]
            total += float((lse - picked).sum())
            count += picked.size
    return total / count


def summarize_sweep(run_dirs: Sequence, metric: str = "heldout_ce") -> str:
    """Rows ``r``, columns ``s``, cells ``metric``; ``--`` marks missing or failed cells."""
    cells = {}
    for rd in run_dirs:
        p = Path(rd) / "summary.json"
        if not p.exists():
            continue
        summ = json.loads(p.read_text())
        s, r = int(summ["s"]), round(float(summ["r"]), 6)
        if s == 1 or r == 0.0:
            s, r = 1, 0.0
        cells[(r, s)] = summ.get(metric) if summ.get("status") == "ok" else None
    rs = sorted({r for r, _ in cells})
    ss = sorted({s for _, s in cells})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["r\\s"] + [str(s) for s in ss])
    for r in rs:
        w.writerow([f"{r:.1f}" if round(r, 1) == r else f"{r:g}"]
                   + [f"{cells[(r, s)]:.4f}" if cells.get((r, s)) is not None else "--" for s in ss])
    return buf.getvalue()
