"""``changeguide`` command line.

Exit codes: 0 success, 2 configuration or input schema error, 3 I/O error,
4 missing artifact from an earlier stage.  The default config file can be set
with ``CHANGEGUIDE_CONFIG``; ``--set section.field=value`` overrides single
fields (values are parsed as JSON when possible).
"""
from __future__ import annotations

import argparse
import json
import os
import sys

CONFIG_ENV = "CHANGEGUIDE_CONFIG"
EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_MISSING = 0, 2, 3, 4
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def build_parser() -> argparse.ArgumentParser:
    # global flags work before or after the subcommand; SUPPRESS keeps the
    # subcommand parser from overwriting values given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config field, e.g. gen.change_rate=0.0")
    common.add_argument("--grid", help="block grid, e.g. 4x4, 8x8, 16x16")
    common.add_argument("--threads", type=int, help="BLAS threads; 1 gives bitwise reproducible runs")
    common.add_argument("--seed", type=int, help="shortcut for --set seed=N")

    p = argparse.ArgumentParser(prog="changeguide", parents=[common],
                                description="Block reasoning plus mask-guided change detection.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic scene split")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--split", default="train")

    e = sub.add_parser("encode", parents=[common], help="PGM mask to run string")
    e.add_argument("mask")
    e.add_argument("--tau", type=float, default=0.0)

    d = sub.add_parser("decode", parents=[common], help="run string to coarse PGM mask")
    d.add_argument("runs")
    d.add_argument("--out", required=True)

    s = sub.add_parser("score", parents=[common], help="reward report for JSONL predictions")
    s.add_argument("predictions")
    s.add_argument("--manifest")
    s.add_argument("--out")

    for name, helptext in (("sft", "supervised reasoner training"), ("grpo", "GRPO reasoner fine-tuning")):
        c = sub.add_parser(name, parents=[common], help=helptext)
        c.add_argument("--split", default="train")

    t = sub.add_parser("train-decoder", parents=[common], help="train the mask-guided decoder")
    t.add_argument("--split", default="train")
    t.add_argument("--coarse", choices=("oracle", "reasoner"))
    t.add_argument("--reasoner", choices=("sft", "grpo"), default="grpo")
    t.add_argument("--no-guidance", action="store_true", help="freeze the guidance strengths at 0")

    i = sub.add_parser("infer", parents=[common], help="reasoner -> coarse mask -> decoder")
    i.add_argument("--split", default="test")
    i.add_argument("--coarse", choices=("oracle", "reasoner"), default="reasoner")
    i.add_argument("--reasoner", choices=("sft", "grpo"), default="grpo")
    i.add_argument("--no-guidance", action="store_true")

    v = sub.add_parser("eval", parents=[common], help="pixel metrics of predicted masks")
    v.add_argument("--split", default="test")
    v.add_argument("--pred")
    v.add_argument("--gt")
    v.add_argument("--out")
    return p


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args):
    from .pipeline import ConfigError, PipelineConfig

    path = args.config or os.environ.get(CONFIG_ENV)
    cfg = PipelineConfig.load(path) if path else PipelineConfig()
    overrides = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = _parse_value(value)
    if args.grid:
        try:
            rows, cols = (int(v) for v in args.grid.lower().split("x"))
        except ValueError:
            raise ConfigError(f"grid: expected ROWSxCOLS, got {args.grid!r}") from None
        overrides["grid.rows"], overrides["grid.cols"] = rows, cols
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "no_guidance", False):
        overrides["mgd.guidance"] = False
    return cfg.with_overrides(overrides) if overrides else cfg


def run(args) -> int:
    from . import pipeline as P

    cfg = load_config(args)
    cmd = args.command
    if cmd == "gen-data":
        if args.n < 0:
            raise P.ConfigError(f"n must be >= 0, got {args.n}")
        result = {"manifest": str(P.cmd_gen_data(cfg, args.n, args.split))}
    elif cmd == "encode":
        print(P.cmd_encode(args.mask, cfg.grid_spec, args.tau))
        return EXIT_OK
    elif cmd == "decode":
        result = {"mask": str(P.cmd_decode(args.runs, cfg.grid_spec, args.out))}
    elif cmd == "score":
        result = P.cmd_score(cfg, args.predictions, args.manifest, args.out)["aggregate"]
    elif cmd == "sft":
        result = {"checkpoint": str(P.cmd_sft(cfg, args.split))}
    elif cmd == "grpo":
        result = {"checkpoint": str(P.cmd_grpo(cfg, args.split))}
    elif cmd == "train-decoder":
        result = {"checkpoint": str(P.cmd_train_decoder(cfg, args.split, args.coarse, args.reasoner))}
    elif cmd == "infer":
        result = {"predictions": str(P.cmd_infer(cfg, args.split, args.coarse, args.reasoner))}
    elif cmd == "eval":
        result = P.cmd_eval(cfg, args.split, args.pred, args.gt, args.out)["aggregate"]
    else:  # argparse rejects unknown commands before this point
        raise AssertionError(cmd)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("config", None), ("set", []), ("grid", None), ("threads", None), ("seed", None)):
        if not hasattr(args, name):
            setattr(args, name, default)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
        # only effective when numpy has not been loaded yet, i.e. in a fresh process
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)

    from .codec import FormatError, ParseError
    from .netpbm import NetpbmError
    from .pipeline import ConfigError, MissingArtifactError

    try:
        return run(args)
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, ParseError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, NetpbmError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # invalid grid/image combinations and similar schema problems
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
