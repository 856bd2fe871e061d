"""Command-line entry point: ``seta <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 numeric failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import torch

from .autodiff import NumericError, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .core import Skeleton, load_sample, save_png
from .engine import VARIANTS, AdaptationAborted, run_order_variant, run_seta
from .experiments import (
    ablate_iters, compare_variants, identity_from_dir, iters_label, make_identities, read_identities,
    write_identities,
)
from .features import init_extractor
from .metrics import evaluate_set
from .model import arch_of, forward, init_model, pose_tensor, pretrain, to_image
from .synth import PRESETS, make_domain, write_dataset

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else RunConfig()


def _write_json(path, data) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from exc


def _load_model(path):
    params = load_checkpoint(path)
    if not params.is_finite():
        raise NumericError(f"{path}: checkpoint contains non-finite values")
    return params


def _extractors(params):
    arch = arch_of(params)
    return (init_extractor("perceptual_analog", height=arch.height, width=arch.width),
            init_extractor("reid_analog", height=arch.height, width=arch.width))


# --- subcommands -------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = RunConfig(seed=args.seed)
    domain = make_domain(args.domain)
    if args.targets:
        idents = make_identities(domain, args.count, args.targets, args.seed)
        write_identities(idents, args.out, cfg.stamp())
    write_dataset(domain, args.count, args.seed, args.out, text=cfg.stamp())
    print(f"wrote {args.count} samples to {args.out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    pc = cfg.pretrain
    params = init_model(cfg.arch, cfg.seed)
    params, curve = pretrain(params, make_domain(pc.domain), pc.steps, cfg.seed, pc.lr, pc.batch,
                             log_every=args.log_every)
    params.meta = {**params.meta, **cfg.stamp()}
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, args.out, {"run": cfg.to_json(), **cfg.stamp()})
    curve_path = args.curve or f"{args.out}.loss.csv"
    with open(curve_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "config_hash", "seed"])
        for i, v in enumerate(curve):
            w.writerow([i, v, cfg.config_hash(), cfg.seed])
    print(f"checkpoint {args.out}  loss curve {curve_path}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = _config(args)
    acfg = cfg.adaptation
    params = _load_model(args.ckpt)
    ident = identity_from_dir(args.sample, args.targets)
    psi, phi = _extractors(params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = out / "trace.jsonl"
    try:
        if args.variant == "sequential":
            adapted, trace, report = run_seta(params, ident.sample, ident.targets, acfg, ident.pairs, psi, phi)
        else:
            adapted, trace, report = run_order_variant(args.variant, params, ident.sample, ident.targets,
                                                       acfg, ident.pairs, psi, phi)
    except AdaptationAborted as exc:
        trace_path.write_text(exc.trace.to_jsonl(cfg.stamp()))
        print(f"numeric failure: {exc}; partial trace at {trace_path}", file=sys.stderr)
        return EXIT_NUMERIC
    adapted.meta = {**adapted.meta, **cfg.stamp()}
    save_checkpoint(adapted, out / "adapted.ckpt", {"run": cfg.to_json(), **cfg.stamp()})
    trace_path.write_text(trace.to_jsonl(cfg.stamp()))
    _write_json(out / "report.json", {**report.to_json(), **cfg.stamp(), "variant": args.variant})
    print(report.to_csv(), end="")
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg = _config(args)
    params = _load_model(args.ckpt)
    arch = arch_of(params)
    sample = load_sample(args.sample)
    skel = Skeleton.from_json(json.loads(Path(args.pose).read_text()))
    with torch.no_grad():
        img, _ = forward(params, sample.image, pose_tensor(skel, arch)[None])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_png(to_image(img), args.out, cfg.stamp())
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    params = _load_model(args.ckpt)
    psi, _ = _extractors(params)
    pairs = [p for ident in read_identities(args.pairs) for p in ident.pairs]
    if not pairs:
        raise UsageError(f"{args.pairs} has no ground-truth pairs")
    report = evaluate_set(params, pairs, psi, args.label, cfg.seed)
    _write_json(args.out, {**report.to_json(), **cfg.stamp()})
    print(report.to_csv(), end="")
    return EXIT_OK


def cmd_ablate_iters(args) -> int:
    cfg = _config(args)
    params = _load_model(args.ckpt)
    idents = read_identities(args.pairs)
    budgets = _int_list(args.iters)
    report, walls = ablate_iters(params, idents, cfg.adaptation, budgets)
    out = Path(args.out)
    for b in budgets:
        label = iters_label(b)
        single = {"conditions": {label: report.to_json()["conditions"][label]}, "iters": b,
                  "wall_seconds": walls[label], **cfg.stamp()}
        _write_json(out / f"iters_{b}.json", single)
    text = report.to_csv({"wall_seconds": walls, "config_hash": dict.fromkeys(walls, cfg.config_hash()),
                          "seed": dict.fromkeys(walls, cfg.seed)})
    (out / "ablate_iters.csv").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_ablate_order(args) -> int:
    cfg = _config(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variants {bad}; choose from {VARIANTS}")
    params = _load_model(args.ckpt)
    idents = read_identities(args.pairs)
    report, walls = compare_variants(params, idents, cfg.adaptation, variants)
    out = Path(args.out)
    _write_json(out / "ablate_order.json", {**report.to_json(), "wall_seconds": walls, **cfg.stamp()})
    text = report.to_csv({"wall_seconds": walls, "config_hash": dict.fromkeys(walls, cfg.config_hash()),
                          "seed": dict.fromkeys(walls, cfg.seed)})
    (out / "ablate_order.csv").write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import LOSSES, format_table, run_all

    names = LOSSES if args.loss == "all" else tuple(n.strip() for n in args.loss.split(","))
    bad = [n for n in names if n not in LOSSES]
    if bad:
        raise UsageError(f"unknown losses {bad}; choose from {LOSSES}")
    seeds = tuple(range(args.seed, args.seed + args.repeats))
    results = run_all(names, seeds, args.coords)
    print(format_table(results))
    if args.out:
        _write_json(args.out, {"results": [r.to_json() for r in results], "seed": args.seed})
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


# --- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seta", description="Sequential test-time adaptation for toy pose transfer.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render synthetic person samples")
    s.add_argument("--domain", choices=PRESETS, required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--targets", type=int, default=0, metavar="K",
                   help="also write K target poses with held-out truth per sample, plus pairs.json")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("pretrain", help="train the generator on the source domain")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--curve", help="loss-curve CSV path (default: <out>.loss.csv)")
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("adapt", help="run sequential adaptation on one sample")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--sample", required=True)
    s.add_argument("--targets", required=True, help="directory holding targets.json")
    s.add_argument("--config")
    s.add_argument("--variant", choices=VARIANTS, default="sequential")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_adapt)

    s = sub.add_parser("transfer", help="generate one image of a sample in a new pose")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--sample", required=True)
    s.add_argument("--pose", required=True, help="skeleton.json")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_transfer)

    s = sub.add_parser("eval", help="score a checkpoint on held-out pairs")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--pairs", required=True)
    s.add_argument("--config")
    s.add_argument("--label", default="eval")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("ablate-iters", help="sweep the appearance-stage budget")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--pairs", required=True)
    s.add_argument("--iters", default="0,5,10,30")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_ablate_iters)

    s = sub.add_parser("ablate-order", help="compare stage orderings")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--pairs", required=True)
    s.add_argument("--variants", default=",".join(VARIANTS))
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_ablate_order)

    s = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    s.add_argument("--loss", default="all")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--repeats", type=int, default=1, help="number of consecutive seeds")
    s.add_argument("--coords", type=int, default=200)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    threads = os.environ.get("SETA_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ArithmeticError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
