"""Two-phase superposition -> recovery runs, ablations and sweeps.

A run directory holds::

    config.yaml          resolved configuration (replayable)
    metrics.jsonl        one record per step, both phases
    checkpoints/         boundary.ckpt (phase switch) and final.ckpt
    summary.json         final numbers and status

The superposition phase runs here.  At the boundary the state is written
to disk and the recovery phase is handed to :func:`tstlab.baseline.train`,
which reloads it; no in-memory state crosses the phase switch.
"""

from __future__ import annotations

import concurrent.futures
import copy
import json
import logging
import time
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from . import baseline
from .analysis import eval_ce, summarize_sweep
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, save_config
from .data import Corpus, Cursor, load_corpus, make_batch
from .errors import NumericError, TSTError
from .losses import loss_for_phase
from .metrics import MetricsLog, MetricsRecord
from .model import forward, init_state, reinit_io
from .optim import AdamW, adamw_step, wsd_lr

log = logging.getLogger(__name__)

ABLATION_KINDS = ("input_only", "output_only", "full", "reinit_io")
REINIT_SEED_OFFSET = 7919


@dataclass
class RunResult:
    run_dir: Path
    summary: dict


def prepare_corpora(cfg: RunConfig, corpus: Optional[Corpus] = None,
                    heldout: Optional[Corpus] = None) -> tuple[Corpus, Corpus]:
    if corpus is None:
        corpus = load_corpus(cfg.data.as_loader_dict())
    if heldout is None:
        corpus, heldout = corpus.split(cfg.data.heldout_fraction)
    return corpus, heldout


def _write_summary(run_dir: Path, summary: dict) -> None:
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")


def run_superposition_phase(cfg: RunConfig, corpus: Corpus, run_dir: Path, metrics: MetricsLog):
    """Steps ``[0, boundary)`` on bagged batches; writes ``boundary.ckpt``."""
    plan, spec = cfg.plan, cfg.spec
    boundary = spec.boundary(plan.total_steps)
    state = init_state(cfg.model, plan.precision)
    opt = AdamW.from_plan(plan)
    cursor = Cursor()
    mode = spec.ablation
    t0 = time.perf_counter()
    for step in range(boundary):
        batch = make_batch(corpus, cursor, plan.batch_rows, plan.base_length, spec.s, "superposition", mode)
        logits = forward(state, batch.inputs, mode)
        rep = loss_for_phase("superposition", logits, batch.labels, spec)
        state.zero_grad()
        rep.value.backward()
        try:
            norm = adamw_step(state, opt, plan, step)
        except NumericError as exc:
            metrics.write({"step": step, "phase": "superposition", "event": "numeric_abort", "message": str(exc)})
            raise
        if step % plan.log_every == 0 or step == boundary - 1:
            metrics.write(MetricsRecord(step, "superposition", rep.kind, rep.loss, wsd_lr(step, plan),
                                        cursor.tokens_seen, time.perf_counter() - t0, norm))
    path = run_dir / "checkpoints" / "boundary.ckpt"
    save_checkpoint(path, state, opt, boundary, "recovery", cursor.as_dict(),
                    {"wallclock": time.perf_counter() - t0, "superposition_steps": boundary})
    return path, boundary


def _reinit_boundary(path: Path, cfg: RunConfig) -> Path:
    state, opt, header = load_checkpoint(path)
    state = reinit_io(state, cfg.plan.seed + REINIT_SEED_OFFSET)
    if opt is not None:
        opt.reset(["embedding", "head"])
    out = path.with_name("boundary_reinit.ckpt")
    save_checkpoint(out, state, opt, header["step"], header["phase"], header["cursor"],
                    dict(header["extra"], reinit_io=True))
    return out


def run_two_phase(cfg: RunConfig, out_dir, corpus: Optional[Corpus] = None,
                  heldout: Optional[Corpus] = None, reinit_at_boundary: bool = False) -> RunResult:
    """Superposition for ``round(r * T)`` steps, then plain next-token training.

    One learning-rate schedule spans both phases.  ``s == 1`` or ``r == 0``
    makes the first phase empty, so the run is exactly a baseline run.
    """
    cfg.validate()
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.yaml")
    corpus, heldout = prepare_corpora(cfg, corpus, heldout)
    summary = {"status": "running", "s": cfg.spec.s, "r": cfg.spec.r, "ablation": cfg.spec.ablation,
               "reinit_io": reinit_at_boundary, "seed": cfg.plan.seed, "total_steps": cfg.plan.total_steps}
    metrics_path = run_dir / "metrics.jsonl"
    if metrics_path.exists():
        metrics_path.unlink()
    t0 = time.perf_counter()
    with MetricsLog(metrics_path) as metrics:
        try:
            ckpt, boundary = run_superposition_phase(cfg, corpus, run_dir, metrics)
            summary["boundary_step"] = boundary
            if reinit_at_boundary:
                ckpt = _reinit_boundary(ckpt, cfg)
            res = baseline.train(cfg, corpus, run_dir, resume=ckpt, metrics=metrics)
        except TSTError as exc:
            summary.update(status="aborted", error=f"{type(exc).__name__}: {exc}",
                           exit_code=exc.exit_code, wallclock=time.perf_counter() - t0)
            _write_summary(run_dir, summary)
            raise
    last = res.records[-1].loss if res.records else None
    summary.update(
        status="ok",
        final_train_loss=last,
        heldout_ce=eval_ce(res.state, heldout, cfg.plan.batch_rows, cfg.plan.base_length, cfg.plan.eval_windows),
        data_tokens_seen=res.cursor.tokens_seen,
        epochs=res.cursor.epoch,
        wallclock=time.perf_counter() - t0,
    )
    _write_summary(run_dir, summary)
    log.info("run %s: heldout_ce=%.4f tokens=%d", run_dir, summary["heldout_ce"], summary["data_tokens_seen"])
    return RunResult(run_dir, summary)


def run_ablation(kind: str, cfg: RunConfig, out_dir, corpus=None, heldout=None) -> RunResult:
    """Two-phase run with the input or output side switched, or I/O layers redrawn at the boundary."""
    if kind not in ABLATION_KINDS:
        raise TSTError(f"unknown ablation {kind!r}; expected one of {ABLATION_KINDS}")
    cfg = copy.deepcopy(cfg)
    cfg.spec.ablation = "full" if kind == "reinit_io" else kind
    return run_two_phase(cfg, out_dir, corpus, heldout, reinit_at_boundary=(kind == "reinit_io"))


def _cell_dir(root: Path, s: int, r: float) -> Path:
    return root / f"s{s}_r{r:g}"


def _run_cell(args) -> dict:
    cfg, run_dir, corpus, heldout = args
    try:
        res = run_two_phase(cfg, run_dir, corpus, heldout)
        return res.summary
    except Exception as exc:  # one failed cell must not stop the sweep
        run_dir.mkdir(parents=True, exist_ok=True)
        summ = {"status": "failed", "s": cfg.spec.s, "r": cfg.spec.r,
                "error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc()}
        _write_summary(run_dir, summ)
        return summ


def run_sweep(cfg: RunConfig, s_values: Sequence[int], r_values: Sequence[float], out_dir,
              jobs: int = 1, shared_seed: bool = True, include_baseline: bool = False,
              corpus: Optional[Corpus] = None) -> tuple[list[Path], str]:
    """One two-phase run per ``(s, r)`` cell plus a summary table.

    Returns the cell directories and the summary CSV text, which is also
    written to ``summary.csv``.
    """
    if not s_values or not r_values:
        raise TSTError("sweep grid must be non-empty")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    corpus, heldout = prepare_corpora(cfg, corpus)
    cells = [(1, 0.0)] if include_baseline else []
    cells += [(int(s), float(r)) for r in r_values for s in s_values]
    work = []
    for i, (s, r) in enumerate(cells):
        c = copy.deepcopy(cfg)
        c.spec.s, c.spec.r = s, r
        if not shared_seed:
            c.plan.seed = cfg.plan.seed + i
            c.model.init_seed = cfg.model.init_seed + i
        work.append((c, _cell_dir(root, s, r), corpus, heldout))
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, work))
    else:
        results = [_run_cell(w) for w in work]
    dirs = [w[1] for w in work]
    table = summarize_sweep(dirs)
    (root / "summary.csv").write_text(table)
    (root / "cells.json").write_text(json.dumps(
        [{"s": s, "r": r, "dir": str(d), "status": res.get("status"), "heldout_ce": res.get("heldout_ce")}
         for (s, r), d, res in zip(cells, dirs, results)], indent=2) + "\n")
    return dirs, table
