"""Fast in-package checks of the loss identities and gradients (double precision)."""

from __future__ import annotations

import math

import numpy as np

from . import losses as L
from . import model as M
from .data import IGNORE_INDEX, fold_inputs, shift_labels
from .gradcheck import check_gradients
from .tensor import Tensor


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def check_loss_identities(rng, trials: int = 200) -> str:
    worst_val = worst_grad = 0.0
    for _ in range(trials):
        v, n = int(rng.integers(2, 33)), int(rng.integers(1, 6))
        s = int(rng.integers(1, min(v, 8) + 1))
        z = rng.normal(size=(n, v)) * 3
        # distinct tokens, so the target entropy is exactly log s
        bag = np.stack([rng.choice(v, size=s, replace=False) for _ in range(n)])
        za, zb = Tensor(z.copy(), requires_grad=True), Tensor(z.copy(), requires_grad=True)
        plain, corr = L.mce_uniform(za, bag), L.mce_uniform(zb, bag, corrected=True)
        worst_val = max(worst_val, abs(corr.item() - (plain.item() - math.log(s))))
        plain.backward()
        corr.backward()
        worst_grad = max(worst_grad, float(np.abs(za.grad - zb.grad).max()))
    assert worst_val < 1e-9, f"corrected - simplified differs from -log|y| by {worst_val:.3g}"
    assert worst_grad < 1e-12, f"gradients of the two forms differ by {worst_grad:.3g}"
    return f"max value err {worst_val:.2e}, max grad diff {worst_grad:.2e}"


def check_kl_oracles(rng, trials: int = 200) -> str:
    worst = 0.0
    for _ in range(trials):
        v, s = int(rng.integers(2, 33)), int(rng.integers(1, 9))
        z = rng.normal(size=(1, v)) * 3
        bag = rng.integers(0, v, size=(1, s))
        p = _softmax(z)[0]
        t = np.bincount(bag[0], minlength=v) / s
        nz = t > 0
        kl = float((t[nz] * np.log(t[nz] / p[nz])).sum())
        worst = max(worst, abs(L.mce_uniform(Tensor(z), bag, corrected=True).item() - kl))
        alt = -math.log(p[np.unique(bag[0])].sum())
        worst = max(worst, abs(L.mce_alt(Tensor(z), bag).item() - alt))
    assert worst < 1e-9, f"oracle mismatch {worst:.3g}"
    return f"max oracle err {worst:.2e}"


def check_reductions(rng) -> str:
    z = Tensor(rng.normal(size=(6, 11)))
    y = rng.integers(0, 11, size=6)
    y[2] = IGNORE_INDEX
    ce = L.ce_loss(z, y).item()
    bag = y[:, None]
    for name, val in {
        "mce": L.mce_uniform(z, bag).item(),
        "mce_corrected": L.mce_uniform(z, bag, corrected=True).item(),
        "mce_alt": L.mce_alt(z, bag).item(),
        "power_law": L.mce_weighted(z, bag, L.BagWeighting("power_law")).item(),
    }.items():
        assert val == ce, f"{name} at s=1 is {val!r}, CE is {ce!r}"
    toks = rng.integers(0, 50, size=(2, 12))
    assert np.array_equal(fold_inputs(toks, 1)[..., 0], toks)
    assert np.array_equal(shift_labels(toks, 1)[..., 0], toks)
    return "all variants bitwise equal to CE at s=1"


def check_model_gradients(rng) -> str:
    cfg = M.ModelConfig(vocab_size=17, d_model=16, n_layers=2, n_heads=2, d_ff=24, max_len=8)
    state = M.init_state(cfg, "double")
    x = rng.integers(0, 17, size=(2, 8, 2))
    y = shift_labels(rng.integers(0, 17, size=(2, 16)), 2)
    worst = 0.0
    for fn in (lambda: L.mce_uniform(M.forward(state, x, "full"), y),
               lambda: L.mce_alt(M.forward(state, x, "full"), y)):
        worst = max(worst, max(check_gradients(fn, state.params, max_entries=6).values()))
    assert worst < 1e-3, f"finite-difference mismatch {worst:.3g}"
    return f"max relative error {worst:.2e}"


CHECKS = {
    "loss identities": check_loss_identities,
    "KL / composite oracles": check_kl_oracles,
    "s=1 reductions": check_reductions,
    "model gradients": check_model_gradients,
}


def run(seed: int = 0, echo=print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        rng = np.random.default_rng(seed)
        try:
            detail = fn(rng)
            echo(f"PASS  {name}: {detail}")
        except AssertionError as exc:
            ok = False
            echo(f"FAIL  {name}: {exc}")
    return ok
