"""Command-line entry point.

Subcommands mirror the experiment drivers one-to-one; every flag mirrors a
config key.  Exit codes: 0 success, 1 detection/oracle-suite failure,
2 configuration or file errors.
"""

from __future__ import annotations

import argparse
import sys

from . import harness
from .errors import ConfigError, WatermarkLabError

_OVERRIDE_KEYS = [
    ("corpus", str), ("order", int), ("smoothing", float), ("level", str),
    ("key", int), ("context-width", int), ("temperature", float), ("top-k", int),
    ("max-tokens", int), ("prompt-length", int), ("master-seed", int),
    ("alpha", float), ("fpr", float), ("null-mode", str), ("mc-samples", int),
    ("sweep-prompts", int), ("diversity-prompts", int), ("diversity-repeats", int),
    ("calibrate-sequences", int), ("schemes", str),
]


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help=f"INI config path (default: ${harness.CONFIG_ENV_VAR})")
    for name, kind in _OVERRIDE_KEYS:
        parser.add_argument(f"--{name}", type=kind, default=None, help=f"override config key {name.replace('-', '_')}")


def _build_config(args: argparse.Namespace) -> harness.ExperimentConfig:
    overrides = {}
    for name, _ in _OVERRIDE_KEYS:
        value = getattr(args, name.replace("-", "_"), None)
        if value is not None:
            overrides[name.replace("-", "_")] = value
    return harness.load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="wmlab", description="Watermark sampling laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="generate (possibly watermarked) sequences")
    _add_common(p_gen)
    p_gen.add_argument("--scheme", required=True, help="scheme name or 'none'")
    p_gen.add_argument("--strength", type=float, default=0.0)
    p_gen.add_argument("--count", type=int, default=None)
    p_gen.add_argument("--out", required=True)

    p_det = sub.add_parser("detect", help="detect watermarks in a generations file")
    p_det.add_argument("--generations", required=True)
    p_det.add_argument("--out", required=True)
    p_det.add_argument("--key", type=int, default=None, help="override the detection key")
    p_det.add_argument("--scheme", default=None)
    p_det.add_argument("--strength", type=float, default=None)
    p_det.add_argument("--score-spec", default=None)
    p_det.add_argument("--alpha", type=float, default=0.01)

    p_sweep = sub.add_parser("sweep", help="detectability/constraint trade-off sweep")
    _add_common(p_sweep)
    p_sweep.add_argument("--count", type=int, default=None)
    p_sweep.add_argument("--out", required=True)

    p_div = sub.add_parser("diversity", help="repeat-sampling self-BLEU protocol")
    _add_common(p_div)
    p_div.add_argument("--out", required=True)

    p_cal = sub.add_parser("calibrate", help="null-text false-positive rates per scheme")
    _add_common(p_cal)
    p_cal.add_argument("--count", type=int, default=None)
    p_cal.add_argument("--out", required=True)

    p_ora = sub.add_parser("oracle-check", help="closed-form vs brute-force equivalence suites")
    p_ora.add_argument("--max-vocab", type=int, default=4)
    p_ora.add_argument("--instances", type=int, default=40)
    p_ora.add_argument("--seed", type=int, default=0)

    args = parser.parse_args(argv)
    try:
        if args.command == "generate":
            cfg = _build_config(args)
            n = harness.cmd_generate(cfg, args.scheme, args.strength, args.out, count=args.count)
            print(f"wrote {n} records to {args.out}")
            return 0
        if args.command == "detect":
            results = harness.cmd_detect(
                args.generations, args.out,
                key=args.key, scheme=args.scheme, strength=args.strength,
                spec_string=args.score_spec, alpha=args.alpha,
            )
            flagged = sum(r.decision for r in results)
            print(f"{flagged}/{len(results)} sequences flagged at alpha={args.alpha}")
            return 0
        if args.command == "sweep":
            cfg = _build_config(args)
            points = harness.cmd_sweep(cfg, args.out, count=args.count)
            print(f"wrote {len(points)} sweep points to {args.out}")
            return 0
        if args.command == "diversity":
            cfg = _build_config(args)
            rows = harness.cmd_diversity(cfg, args.out)
            print(f"wrote {len(rows)} diversity rows to {args.out}")
            return 0
        if args.command == "calibrate":
            cfg = _build_config(args)
            rows, ok = harness.cmd_calibrate(cfg, args.out, count=args.count)
            print(f"wrote {len(rows)} calibration rows to {args.out}")
            if not ok:
                print("calibration FAILED: an empirical FPR exceeded twice its alpha", file=sys.stderr)
                return 1
            return 0
        if args.command == "oracle-check":
            ok = harness.cmd_oracle_check(args.max_vocab, args.instances, args.seed)
            return 0 if ok else 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except WatermarkLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
