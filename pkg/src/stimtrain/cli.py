"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 runtime error (including a
failed gradient or bound check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import dump_config, load_config, set_key
from .errors import StimTrainError, ValidationError

log = logging.getLogger("stimtrain")

SUBCOMMANDS = ("train", "eval", "loafing", "amplitude", "erf", "enumerate-space", "gradcheck", "bound-check")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--preset", help="named experiment preset")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("stimtrain_out"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stimtrain", description="Stimulative training of residual networks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training experiment")
    _common(p)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("eval", help="top-1/top-5 of a checkpoint on the test split")
    _common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--mask", help="comma-separated kept blocks per stage (default: full)")

    p = sub.add_parser("loafing", help="in-ensemble vs standalone subnet accuracy")
    _common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--standalone", action="append", default=[], metavar="MASK=CKPT")

    p = sub.add_parser("amplitude", help="mean logit magnitude per network")
    _common(p)
    p.add_argument("--ckpt", type=Path, action="append", required=True)
    p.add_argument("--mask")

    p = sub.add_parser("erf", help="effective receptive field heatmap")
    _common(p)
    p.add_argument("--ckpt", type=Path, help="checkpoint (default: freshly initialized network)")
    p.add_argument("--mask")
    p.add_argument("--input-size", type=int, default=32)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--noise", action="store_true", help="use Gaussian noise instead of dataset images")

    p = sub.add_parser("enumerate-space", help="list every mask of the sampling space")
    _common(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    _common(p)
    p.add_argument("--probes", type=int, default=20)

    p = sub.add_parser("bound-check", help="validate the CE-gap bound")
    _common(p)
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--metrics", type=Path, action="append", default=[], help="metrics.jsonl to audit")
    return parser


def _mask(text):
    from .nncore import DepthMask

    return None if not text else DepthMask.parse(text)


def _test_set(cfg):
    from .trainer import load_datasets

    return load_datasets(cfg)[1]


def run(args) -> int:
    cfg = load_config(args.config, args.overrides, args.preset)
    if args.seed is not None:
        set_key(cfg, "seed", args.seed)
        cfg.validate()
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(dump_config(cfg))

    if args.command == "train":
        from .trainer import run_experiment

        result = run_experiment(cfg, out, resume=args.resume)
        if result.records:
            print(result.records[-1].to_json())
        return 0

    if args.command == "enumerate-space":
        from .sampler import enumerate_space

        for mask in enumerate_space(cfg.network_spec(), cfg.sampling_rule()):
            print(mask)
        return 0

    if args.command == "gradcheck":
        from .gradcheck import run_all

        results = run_all(args.probes, cfg.seed)
        for r in results:
            print(r.line())
        return 0 if all(r.passed for r in results) else 2

    if args.command == "bound-check":
        from .diagnostics import validate_bound

        check = validate_bound(args.trials, cfg.seed)
        ok = check.ok
        print(f"{'PASS' if check.ok else 'FAIL'} brute force: {check.counterexamples}/{check.trials} "
              f"counterexamples, max gap/bound {check.max_ratio:.4f}")
        for path in args.metrics:
            bad = 0
            seen = 0
            for line in path.read_text().splitlines():
                rec = json.loads(line)
                if rec.get("ce_gap_bound") is None:
                    continue
                seen += 1
                bad += rec["ce_gap"] > rec["ce_gap_bound"]
            ok = ok and bad == 0
            print(f"{'PASS' if bad == 0 else 'FAIL'} {path}: {bad}/{seen} eval epochs violate the bound")
        return 0 if ok else 2

    from .diagnostics import (
        accumulate_amplitude,
        amplitude_csv,
        compute_erf,
        load_network,
        measure_loafing,
    )

    if args.command == "eval":
        from .trainer import evaluate

        model = load_network(args.ckpt)
        top1, top5 = evaluate(model, _mask(args.mask), _test_set(cfg), cfg.eval)
        result = {"mask": args.mask or "full", "top1": top1, "top5": top5}
        (out / "eval.json").write_text(json.dumps(result) + "\n")
        print(json.dumps(result))
        return 0

    if args.command == "loafing":
        model = load_network(args.ckpt)
        standalone = {}
        for item in args.standalone:
            mask, _, path = item.partition("=")
            standalone[_mask(mask)] = Path(path)
        report = measure_loafing(model, cfg.sampling_rule(), _test_set(cfg), standalone, cfg.eval)
        text = report.to_csv()
        (out / "loafing.csv").write_text(text)
        print(text, end="")
        return 0

    if args.command == "amplitude":
        test = _test_set(cfg)
        rows = {str(p): accumulate_amplitude(load_network(p), _mask(args.mask), test, cfg.eval) for p in args.ckpt}
        text = amplitude_csv(rows)
        (out / "amplitude.csv").write_text(text)
        print(text, end="")
        return 0

    if args.command == "erf":
        from .nncore import build_network

        model = load_network(args.ckpt) if args.ckpt else build_network(cfg.network_spec(), cfg.seed)
        dataset = None if args.noise else _test_set(cfg)
        mask = _mask(args.mask)
        erf = compute_erf(model, mask, args.input_size, args.samples, np.random.default_rng(cfg.seed), dataset)
        tag = f"{(str(mask) if mask else 'full').replace(',', '-')}_{args.input_size}"
        (out / f"erf_{tag}.csv").write_text(erf.to_csv())
        (out / f"erf_{tag}.pgm").write_text(erf.to_pgm())
        print(json.dumps({f"area_ratio@{t}": v for t, v in erf.area_ratios().items()}))
        return 0

    raise ValidationError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return run(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (StimTrainError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
