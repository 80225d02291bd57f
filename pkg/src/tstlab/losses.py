"""Cross-entropy and the multi-hot bag losses built on it.

All bag losses share one aggregation rule: a masked mean over rows for each
bag slot, then a weighted combination of the slot means using weights
``g(i)`` over slots that have at least one valid target.  With full bags
this equals the per-row formula ``sum_i g(i) CE(z, y_i) / sum_i g(i)``
averaged over rows.  Label value ``-100`` is ignored everywhere.

Logits are ``[N, V]`` or ``[B, l, V]`` (flattened internally); integer
targets are plain numpy arrays.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .data import IGNORE_INDEX
from .errors import ContractError
from .tensor import Tensor

WEIGHTING_KINDS = ("uniform", "power_law", "exponential", "first_token", "fitted_power_law")
MCE_VARIANTS = ("uniform_simplified", "uniform_corrected", "alt")
WEIGHT_FLOOR = 1e-6


class EmptyTargetWarning(UserWarning):
    """Every target of a loss evaluation was ignored; the loss is defined as 0."""


@dataclass(frozen=True)
class BagWeighting:
    kind: str = "uniform"
    params: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in WEIGHTING_KINDS:
            raise ContractError(f"unknown weighting {self.kind!r}; expected one of {WEIGHTING_KINDS}")
        if self.kind == "fitted_power_law":
            if self.params is None or len(self.params) != 3:
                raise ContractError("fitted_power_law needs params (C0, a, k)")
            object.__setattr__(self, "params", tuple(float(p) for p in self.params))

    def weights(self, s: int) -> np.ndarray:
        """Unnormalised weights g(1..s)."""
        i = np.arange(1, s + 1, dtype=np.float64)
        if self.kind == "uniform":
            return np.ones(s)
        if self.kind == "power_law":
            return 1.0 / i
        if self.kind == "exponential":
            return np.exp(-i)
        if self.kind == "first_token":
            return (i == 1).astype(np.float64)
        c0, a, k = self.params
        return np.maximum(c0 + a * i ** k, WEIGHT_FLOOR)

    def as_dict(self) -> dict:
        return {"kind": self.kind, "params": list(self.params) if self.params else None}


@dataclass
class LossReport:
    value: Tensor
    per_position_values: np.ndarray
    valid_target_count: int
    kind: str = "ce"

    @property
    def loss(self) -> float:
        return self.value.item()


def _flatten(logits: Tensor, targets: np.ndarray, bagged: bool):
    targets = np.asarray(targets)
    v = logits.shape[-1]
    lead = logits.shape[:-1]
    tshape = targets.shape[:-1] if bagged else targets.shape
    if tshape != lead:
        raise ContractError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if not np.issubdtype(targets.dtype, np.integer):
        raise ContractError("targets must be integer ids")
    bad = (targets != IGNORE_INDEX) & ((targets < 0) | (targets >= v))
    if bad.any():
        raise ContractError(f"target ids must lie in [0, {v}) or equal {IGNORE_INDEX}")
    z = T.reshape(logits, (-1, v)) if logits.ndim != 2 else logits
    n = z.shape[0]
    return z, targets.reshape(n, -1)


def _empty(z: Tensor, what: str) -> Tensor:
    warnings.warn(f"{what}: every target is ignored; loss defined as 0", EmptyTargetWarning, stacklevel=3)
    return T.scale(T.tsum(z), 0.0)


def _slot_terms(z: Tensor, bag: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Per-(row, slot) CE terms ``lse(z) - z_y`` with one logsumexp per row."""
    valid = bag != IGNORE_INDEX
    safe = np.where(valid, bag, 0)
    lse = T.logsumexp(z)
    picked = T.take_last(z, safe)
    n, s = bag.shape
    return T.sub(T.reshape(lse, (n, 1)) if s == 1 else _repeat_cols(lse, s), picked), valid


def _repeat_cols(x: Tensor, s: int) -> Tensor:
    # [N] -> [N, s] by a constant ones matmul keeps the op set small
    ones = Tensor(np.ones((1, s), dtype=x.dtype))
    return T.matmul(T.reshape(x, (-1, 1)), ones)


def _combine(terms: Tensor, valid: np.ndarray, g: np.ndarray):
    """Weighted combination of masked slot means; returns (value, slot means, count)."""
    counts = valid.sum(axis=0)
    live = (counts > 0) & (g > 0)
    total = g[live].sum()
    if not live.any() or total <= 0:
        return None, np.full(len(g), np.nan), 0
    coef = np.where(live, g / np.where(counts > 0, counts, 1) / total, 0.0)
    w = np.where(valid, coef[None, :], 0.0).astype(terms.dtype)
    value = T.tsum(T.mul(terms, Tensor(w)))
    slot = np.where(counts > 0, (terms.data * valid).sum(axis=0) / np.maximum(counts, 1), np.nan)
    return value, slot, int(valid[:, live].sum())


def ce_loss(logits: Tensor, targets) -> Tensor:
    """Mean next-token cross-entropy over non-ignored targets."""
    z, t = _flatten(logits, targets, bagged=False)
    valid = t != IGNORE_INDEX
    count = int(valid.sum())
    if count == 0:
        return _empty(z, "ce_loss")
    terms = T.sub(T.reshape(T.logsumexp(z), (-1, 1)), T.take_last(z, np.where(valid, t, 0)))
    w = np.where(valid, 1.0 / count, 0.0).astype(terms.dtype)
    return T.tsum(T.mul(terms, Tensor(w)))


def mce_weighted_report(logits: Tensor, bag, weighting: BagWeighting = BagWeighting()) -> LossReport:
    z, b = _flatten(logits, bag, bagged=True)
    terms, valid = _slot_terms(z, b)
    value, slot, count = _combine(terms, valid, weighting.weights(b.shape[1]))
    if value is None:
        value = _empty(z, f"mce[{weighting.kind}]")
    return LossReport(value, slot, count, f"mce_{weighting.kind}")


def mce_weighted(logits: Tensor, bag, weighting: BagWeighting = BagWeighting()) -> Tensor:
    """sum_i g(i) CE(z, y_i) / sum_i g(i), ignoring ``-100`` slots."""
    return mce_weighted_report(logits, bag, weighting).value


def target_entropy(bag: np.ndarray) -> np.ndarray:
    """Entropy of each row's uniform-over-slots target distribution.

    Equals ``log |y|`` when the valid entries are distinct; a repeated token
    carries proportionally more mass and lowers the entropy.  Rows without
    valid entries get 0.
    """
    bag = np.asarray(bag)
    valid = bag != IGNORE_INDEX
    n = valid.sum(axis=1)
    # multiplicity of each valid entry within its row
    same = (bag[:, :, None] == bag[:, None, :]) & valid[:, :, None] & valid[:, None, :]
    mult = np.where(valid, same.sum(axis=2), 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.log(np.maximum(n, 1)) - np.where(valid, np.log(mult), 0.0).sum(axis=1) / np.maximum(n, 1)
    return np.where(n > 0, h, 0.0)


def _entropy_correction(bag: np.ndarray) -> float:
    """Mean target entropy over rows with any valid target."""
    rows = (bag != IGNORE_INDEX).any(axis=1)
    return float(target_entropy(bag)[rows].mean()) if rows.any() else 0.0


def mce_uniform(logits: Tensor, bag, corrected: bool = False) -> Tensor:
    """Multi-hot CE with equal target mass on each bag token.

    ``corrected`` subtracts the target entropy (``log |y|`` for a bag of
    distinct tokens), turning the loss into KL(uniform bag || softmax).  The
    subtraction is a constant, so both forms have identical gradients.
    """
    value = mce_weighted(logits, bag, BagWeighting("uniform"))
    if not corrected:
        return value
    flat = np.asarray(bag).reshape(-1, np.asarray(bag).shape[-1])
    return T.sub(value, Tensor(np.asarray(_entropy_correction(flat), dtype=value.dtype)))


def _dedup_mask(bag: np.ndarray) -> np.ndarray:
    valid = bag != IGNORE_INDEX
    keep = valid.copy()
    s = bag.shape[1]
    for i in range(1, s):
        dup = np.zeros(bag.shape[0], dtype=bool)
        for j in range(i):
            dup |= valid[:, j] & (bag[:, j] == bag[:, i])
        keep[:, i] &= ~dup
    return keep


def mce_alt(logits: Tensor, bag) -> Tensor:
    """-log of the total softmax mass on the bag (duplicates counted once)."""
    z, b = _flatten(logits, bag, bagged=True)
    keep = _dedup_mask(b)
    rows = keep.any(axis=1)
    if not rows.any():
        return _empty(z, "mce_alt")
    picked = T.take_last(z, np.where(keep, b, 0))
    mask = keep | ~rows[:, None]  # rows without targets get a dummy entry and zero weight
    terms = T.sub(T.logsumexp(z), T.logsumexp(picked, mask=mask))
    w = np.where(rows, 1.0 / rows.sum(), 0.0).astype(terms.dtype)
    return T.tsum(T.mul(terms, Tensor(w)))


def loss_for_phase(phase: str, logits: Tensor, labels, spec=None) -> LossReport:
    """Pick the objective for a training phase.

    Recovery always uses plain next-token CE and never consults ``spec``.
    The superposition phase uses the spec's MCE variant on bagged labels, or
    CE when the labels are single tokens (input-only ablation).
    """
    labels = np.asarray(labels)
    if phase == "recovery":
        if labels.ndim != logits.ndim - 1:
            raise ContractError("recovery phase expects next-token labels, got bagged labels")
        value = ce_loss(logits, labels)
        return LossReport(value, np.array([value.item()]), int((labels != IGNORE_INDEX).sum()), "ce")
    if phase != "superposition":
        raise ContractError(f"unknown phase {phase!r}")
    if spec is None:
        raise ContractError("superposition phase needs a SuperpositionSpec")
    if labels.ndim == logits.ndim - 1:
        value = ce_loss(logits, labels)
        return LossReport(value, np.array([value.item()]), int((labels != IGNORE_INDEX).sum()), "ce")
    variant = spec.mce_variant
    if variant == "alt":
        value = mce_alt(logits, labels)
        slot = mce_weighted_report(logits, labels).per_position_values
        return LossReport(value, slot, int((labels != IGNORE_INDEX).sum()), "mce_alt")
    if variant not in MCE_VARIANTS:
        raise ContractError(f"unknown mce variant {variant!r}")
    rep = mce_weighted_report(logits, labels, spec.weighting)
    if variant == "uniform_corrected":
        if spec.weighting.kind != "uniform":
            raise ContractError("the entropy-corrected form is defined for uniform weighting only")
        corr = _entropy_correction(labels.reshape(-1, labels.shape[-1]))
        rep.value = T.sub(rep.value, Tensor(np.asarray(corr, dtype=rep.value.dtype)))
        rep.per_position_values = rep.per_position_values - corr
        rep.kind = "mce_uniform_corrected"
    return rep


def uniform_loss_floor(vocab: int) -> float:
    """CE of a uniform prediction, ln V."""
    return math.log(vocab)
