"""Command-line entry point: ``hfseq {train,eval,sample,timelag,gradcheck,presets}``.

Exit codes: 0 success, 1 failed check, 2 configuration or data error,
3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .core import (ARCHITECTURES, MULTIPLICATIVE, OUTPUT_MODES, STREAM_SAMPLE, ConfigError,
                   DimensionError, InitScheme, ModelConfig, NumericError, init_params,
                   load_checkpoint, make_rng)
from .models import Batch, gradient, gv_product, make_context
from .verify import OracleReport, compare, dense_gauss_newton, fd_gradient

log = logging.getLogger("hfseq")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def cmd_train(args) -> int:
    from .run import load_run_config, train
    cfg = load_run_config(args.config, args.set)
    if args.output:
        cfg.run.output_dir = args.output
    try:
        outcome = train(cfg, cfg.run.output_dir, resume=args.resume, stream=sys.stdout)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"# stopped: {outcome.stop}; best validation {outcome.best_val:.6f}", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .run import evaluate_checkpoint
    bpc = evaluate_checkpoint(args.checkpoint, args.corpus, args.split, args.T)
    print(f"{bpc:.6f}")
    return EXIT_OK


def _load_text_model(path):
    from .run import checkpoint_vocabulary
    params, extra, _ = load_checkpoint(path)
    return params, checkpoint_vocabulary(extra)


def cmd_sample(args) -> int:
    from .analysis import sample
    params, vocab = _load_text_model(args.checkpoint)
    rng = make_rng(args.seed, STREAM_SAMPLE)
    run = sample(params.config, params, vocab, args.context, args.length, rng,
                 set(args.constraints) if args.constraints else None)
    sys.stdout.write(run.text)
    if run.text:
        sys.stdout.write("\n")
    return EXIT_OK


def cmd_timelag(args) -> int:
    from .analysis import timelag_probe
    params, vocab = _load_text_model(args.checkpoint)
    res = timelag_probe(params.config, params, vocab, make_rng(args.seed, STREAM_SAMPLE),
                        args.exp, args.ctrl, args.steps, args.trials)
    tsv = res.to_tsv()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(tsv)
    sys.stdout.write(tsv)
    return EXIT_OK


def gradcheck_reports(architectures=ARCHITECTURES, modes=OUTPUT_MODES, h: float = 1e-5,
                      tolerance: float = 1e-4, hidden: int = 4, vocab: int = 5, T: int = 7,
                      n: int = 2, seed: int = 0, curvature: bool = True):
    """Gradient (and Gauss-Newton product) oracle reports for tiny models."""
    reports = []
    for arch in architectures:
        for mode in modes:
            hs = (hidden, hidden - 1) if arch == "stacked_mrnn" else (hidden,)
            fs = hs if arch in MULTIPLICATIVE else None
            config = ModelConfig(arch, vocab, hs, fs, mode, seed)
            params = init_params(config, InitScheme.dense(0.3), make_rng(seed, 0))
            rng = make_rng(seed, 9)
            inputs = rng.integers(vocab, size=(T, n))
            if mode == "softmax_xent":
                targets = rng.integers(vocab, size=(T, n))
            else:
                targets = rng.normal(size=(T, n, vocab))
            batch = Batch(inputs, targets)
            g, _ = gradient(config, params, batch)
            reports.append(compare(f"{arch}/{mode}/gradient", g,
                                   fd_gradient(config, params, batch, h), tolerance))
            if curvature and params.size <= 500:
                G = dense_gauss_newton(config, params, batch, mu=0.3, lam=0.0, h=h)
                ctx = make_context(config, params, batch, mu=0.3)
                v = rng.normal(size=params.size)
                Gv = gv_product(ctx, v)
                err = np.linalg.norm(Gv - G @ v) / max(np.linalg.norm(G @ v), 1e-12)
                reports.append(OracleReport(f"{arch}/{mode}/gauss_newton", float(err),
                                            float(err), -1, tolerance))
    return reports


def cmd_gradcheck(args) -> int:
    archs = ARCHITECTURES if args.architecture == "all" else (args.architecture,)
    modes = OUTPUT_MODES if args.output_mode == "all" else (args.output_mode,)
    reports = gradcheck_reports(archs, modes, args.h, args.tolerance, args.hidden, args.vocab,
                                args.T, args.n, args.seed, not args.no_curvature)
    for r in reports:
        print(r.as_line() if args.tsv else str(r))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def cmd_presets(args) -> int:
    from .run import preset_names
    for name in preset_names():
        print(name)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hfseq", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a YAML config or preset name")
    t.add_argument("config")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable)")
    t.add_argument("--output", help="run directory (overrides run.output_dir)")
    t.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="bits/char of a checkpoint on a corpus split")
    e.add_argument("checkpoint")
    e.add_argument("corpus")
    e.add_argument("--split", default="valid", choices=("train", "valid", "test"))
    e.add_argument("--T", type=int, default=None, help="window length for streaming")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("sample", help="generate text from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--context", default=" ")
    s.add_argument("--length", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--constraints", default=None, help="string of the only symbols to emit")
    s.set_defaults(fn=cmd_sample)

    lag = sub.add_parser("timelag", help="bracket closing-probability probe")
    lag.add_argument("checkpoint")
    lag.add_argument("--steps", type=int, default=1000)
    lag.add_argument("--trials", type=int, default=10)
    lag.add_argument("--exp", default="[[")
    lag.add_argument("--ctrl", default="Th")
    lag.add_argument("--seed", type=int, default=0)
    lag.add_argument("--out", default=None, help="also write the table to this file")
    lag.set_defaults(fn=cmd_timelag)

    g = sub.add_parser("gradcheck", help="compare analytic derivatives with finite differences")
    g.add_argument("--architecture", default="all", choices=("all", *ARCHITECTURES))
    g.add_argument("--output-mode", default="all", choices=("all", *OUTPUT_MODES))
    g.add_argument("--h", type=float, default=1e-5)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--hidden", type=int, default=4)
    g.add_argument("--vocab", type=int, default=5)
    g.add_argument("--T", type=int, default=7)
    g.add_argument("--n", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--no-curvature", action="store_true")
    g.add_argument("--tsv", action="store_true", help="machine-readable output")
    g.set_defaults(fn=cmd_gradcheck)

    ps = sub.add_parser("presets", help="list shipped config presets")
    ps.set_defaults(fn=cmd_presets)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except (ConfigError, DimensionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
