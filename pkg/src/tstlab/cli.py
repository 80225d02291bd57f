"""Command-line entry point: ``tstlab <verb> [options]``.

Exit codes: 0 success, 1 self-test failure, 2 usage or config error,
3 data error, 4 numeric abort, 5 checkpoint I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import analysis, selftest, trainer
from .checkpoint import load_checkpoint
from .config import load_config
from .data import load_corpus
from .errors import ConfigError, TSTError
from .model import generate

OUT_ENV = "TSTLAB_OUT"


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. plan.total_steps=100 (repeatable, last wins)")
    p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs)")
    p.add_argument("--seed", type=int, help="run seed (sets plan.seed and model.init_seed)")
    p.add_argument("--precision", choices=("single", "double"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tstlab", description="Token-superposition pre-training lab")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    p = sub.add_parser("train", help="two-phase run (r=0 or s=1 gives a baseline run)")
    _common(p)

    p = sub.add_parser("sweep", help="grid over bag size s and ratio r")
    _common(p)
    p.add_argument("--s", dest="s_values", default="2,4", help="comma-separated bag sizes")
    p.add_argument("--r", dest="r_values", default="0.3,0.5", help="comma-separated ratios")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--independent-seeds", action="store_true")
    p.add_argument("--with-baseline", action="store_true", help="add the (s=1, r=0) cell")

    p = sub.add_parser("ablate", help="input-only / output-only / full / reinit_io run")
    _common(p)
    p.add_argument("--kind", required=True, choices=trainer.ABLATION_KINDS)

    p = sub.add_parser("eval", help="held-out CE of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("mi-fit", help="MI decay curve of the corpus and its power-law fit")
    _common(p)
    p.add_argument("--max-distance", type=int, default=16)
    p.add_argument("--vocab-cap", type=int)
    p.add_argument("--bootstrap", type=int, default=50)

    p = sub.add_parser("generate", help="sample from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True, help="comma-separated token ids, or text with --bytes")
    p.add_argument("--bytes", action="store_true", help="treat the prompt as UTF-8 text (byte tokens)")
    p.add_argument("-n", type=int, default=32)
    p.add_argument("--temperature", type=float, default=0.0)

    p = sub.add_parser("selftest", help="loss-identity and gradient checks")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _resolve(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides += [f"plan.seed={args.seed}", f"model.init_seed={args.seed}"]
    if args.precision:
        overrides.append(f"plan.precision={args.precision}")
    return load_config(args.config, overrides)


def _out_dir(args, name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / name


def _summary_line(summ: dict) -> str:
    return (f"final_loss={summ.get('final_train_loss', float('nan')):.4f} "
            f"heldout_ce={summ.get('heldout_ce', float('nan')):.4f} "
            f"tokens_seen={summ.get('data_tokens_seen', 0)} wallclock={summ.get('wallclock', 0.0):.1f}s")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print("config error:", file=sys.stderr)
        for item in exc.problems:
            print(f"  - {item}", file=sys.stderr)
        return exc.exit_code
    except TSTError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


def _dispatch(args) -> int:
    if args.verb == "selftest":
        return 0 if selftest.run(args.seed) else 1

    cfg = _resolve(args)
    if args.verb == "train":
        out = _out_dir(args, f"train_s{cfg.spec.s}_r{cfg.spec.r:g}_seed{cfg.plan.seed}")
        res = trainer.run_two_phase(cfg, out)
        print(f"{out}: {_summary_line(res.summary)}")
        return 0

    if args.verb == "ablate":
        out = _out_dir(args, f"ablate_{args.kind}_s{cfg.spec.s}_r{cfg.spec.r:g}_seed{cfg.plan.seed}")
        res = trainer.run_ablation(args.kind, cfg, out)
        print(f"{out}: {_summary_line(res.summary)}")
        return 0

    if args.verb == "sweep":
        try:
            s_values = [int(x) for x in args.s_values.split(",") if x]
            r_values = [float(x) for x in args.r_values.split(",") if x]
        except ValueError:
            raise ConfigError("--s and --r take comma-separated numbers") from None
        out = _out_dir(args, "sweep")
        dirs, table = trainer.run_sweep(cfg, s_values, r_values, out, jobs=args.jobs,
                                        shared_seed=not args.independent_seeds,
                                        include_baseline=args.with_baseline)
        print(table, end="")
        print(f"{len(dirs)} runs under {out}")
        return 0

    if args.verb == "eval":
        state, _, _ = load_checkpoint(args.checkpoint)
        _, heldout = trainer.prepare_corpora(cfg)
        ce = analysis.eval_ce(state, heldout, cfg.plan.batch_rows, cfg.plan.base_length, cfg.plan.eval_windows)
        print(f"heldout_ce={ce:.6f}")
        return 0

    if args.verb == "mi-fit":
        corpus = load_corpus(cfg.data.as_loader_dict())
        curve = analysis.estimate_mi(corpus, args.max_distance, args.vocab_cap, bootstrap=args.bootstrap)
        fit = analysis.fit_power_law(curve)
        out = _out_dir(args, "mi_fit")
        out.mkdir(parents=True, exist_ok=True)
        (out / "mi_curve.csv").write_text(curve.to_csv())
        (out / "power_law_fit.csv").write_text(fit.to_csv())
        print(f"C0={fit.C0:.4f} a={fit.a:.4f} k={fit.k:.4f} rss={fit.rss:.3g} -> {out}")
        return 0

    if args.verb == "generate":
        state, _, _ = load_checkpoint(args.checkpoint)
        if args.bytes:
            prompt = list(args.prompt.encode())
        else:
            try:
                prompt = [int(t) for t in args.prompt.split(",") if t.strip()]
            except ValueError:
                raise ConfigError("--prompt must be comma-separated token ids (or use --bytes)") from None
        toks = generate(state, prompt, args.n, args.temperature, seed=cfg.plan.seed)
        if args.bytes:
            print(bytes(t % 256 for t in toks).decode("utf-8", errors="replace"))
        else:
            print(json.dumps(toks))
        return 0
    raise ConfigError(f"unknown verb {args.verb!r}")


if __name__ == "__main__":
    sys.exit(main())
