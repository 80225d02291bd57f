"""Plain next-token trainer with no superposition machinery on its path.

This module deliberately imports neither :mod:`tstlab.data` nor
:mod:`tstlab.losses`: it cuts its own windows and computes its own
cross-entropy, so it doubles as the reference build that TST runs are
compared against.  The recovery phase of a two-phase run is executed by
:func:`train` after reloading the phase-boundary checkpoint from disk.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataError, NumericError
from .metrics import MetricsLog, MetricsRecord
from .model import forward, init_state, ModelState
from .optim import AdamW, adamw_step, wsd_lr


@dataclass
class WindowCursor:
    position: int = 0
    epoch: int = 0
    tokens_seen: int = 0

    def as_dict(self) -> dict:
        return {"position": self.position, "epoch": self.epoch, "tokens_seen": self.tokens_seen}


def next_token_batch(tokens: np.ndarray, cursor: WindowCursor, rows: int, length: int):
    """``(inputs, targets)`` of shape ``[rows, length]`` from sequential windows."""
    n = len(tokens)
    if n < length + 1:
        raise DataError(f"corpus of {n} tokens cannot fill a window of {length + 1}")
    inputs = np.empty((rows, length), dtype=np.int64)
    targets = np.empty((rows, length), dtype=np.int64)
    for r in range(rows):
        if cursor.position + length + 1 > n:
            cursor.position = 0
            cursor.epoch += 1
        p = cursor.position
        inputs[r] = tokens[p: p + length]
        targets[r] = tokens[p + 1: p + length + 1]
        cursor.position += length
        cursor.tokens_seen += length
    return inputs, targets


def next_token_ce(logits: T.Tensor, targets: np.ndarray) -> T.Tensor:
    """Mean of ``logsumexp(z) - z_y`` over all positions."""
    v = logits.shape[-1]
    z = T.reshape(logits, (-1, v))
    y = targets.reshape(-1, 1)
    terms = T.sub(T.reshape(T.logsumexp(z), (-1, 1)), T.take_last(z, y))
    w = np.full(y.shape, 1.0 / y.size).astype(terms.dtype)
    return T.tsum(T.mul(terms, T.Tensor(w)))


@dataclass
class TrainResult:
    state: ModelState
    opt: AdamW
    cursor: WindowCursor
    step: int
    records: list = field(default_factory=list)
    wallclock: float = 0.0


def train(cfg, corpus, run_dir=None, *, resume=None, metrics: Optional[MetricsLog] = None,
          stop_step: Optional[int] = None, checkpoint_name: str = "final.ckpt") -> TrainResult:
    """Next-token training from ``resume`` (or a fresh init) up to ``stop_step``.

    ``corpus`` only needs a ``tokens`` array.  With ``run_dir`` set, a
    checkpoint is written when the loop ends.
    """
    plan = cfg.plan
    offset = 0.0
    if resume is not None:
        state, opt, header = load_checkpoint(resume)
        start = header["step"]
        cursor = WindowCursor(**header["cursor"]) if header["cursor"] else WindowCursor()
        offset = float(header["extra"].get("wallclock", 0.0))
        if opt is None or plan.reset_moments:
            opt = AdamW.from_plan(plan)
    else:
        state = init_state(cfg.model, plan.precision)
        opt = AdamW.from_plan(plan)
        start = 0
        cursor = WindowCursor()
    end = plan.total_steps if stop_step is None else min(stop_step, plan.total_steps)
    own_log = metrics is None and run_dir is not None
    if own_log:
        metrics = MetricsLog(Path(run_dir) / "metrics.jsonl")
    tokens = corpus.tokens
    records = []
    t0 = time.perf_counter()
    try:
        for step in range(start, end):
            inputs, targets = next_token_batch(tokens, cursor, plan.batch_rows, plan.base_length)
            logits = forward(state, inputs, "none")
            loss = next_token_ce(logits, targets)
            state.zero_grad()
            loss.backward()
            try:
                norm = adamw_step(state, opt, plan, step)
            except NumericError as exc:
                if metrics is not None:
                    metrics.write({"step": step, "phase": "recovery", "event": "numeric_abort", "message": str(exc)})
                raise
            rec = MetricsRecord(step, "recovery", "ce", loss.item(), wsd_lr(step, plan), cursor.tokens_seen,
                                offset + time.perf_counter() - t0, norm)
            records.append(rec)
            if metrics is not None and (step % plan.log_every == 0 or step == end - 1):
                metrics.write(rec)
    finally:
        if own_log:
            metrics.close()
    wall = offset + time.perf_counter() - t0
    if run_dir is not None:
        save_checkpoint(Path(run_dir) / "checkpoints" / checkpoint_name, state, opt, end,
                        "recovery", cursor.as_dict(), {"wallclock": wall})
    return TrainResult(state, opt, cursor, end, records, wall)
