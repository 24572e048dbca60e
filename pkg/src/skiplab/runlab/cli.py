"""``skiplab`` command line.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from ..autograd import NonFiniteError
from ..fusion import NumericalFailure
from .emit import EmitError, PlotSpec, read_jsonl, write_svg
from .runner import (ConfigError, ExperimentSpec, dynamics_panels, run_ablation_grid,
                     run_grad_dynamics, run_lr_sweep, run_probe, run_theory, run_training)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

_FUSION_FLAGS = {"stride": "stride", "detach": "detach_count", "blocks": "total_blocks",
                 "skip_scale": "skip_scale", "hidden_dim": "hidden_dim", "dropout": "dropout"}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        nxt = d.get(p)
        if nxt is None:
            nxt = d[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot set {key}: {p} is not an object")
        d = nxt
    d[parts[-1]] = value


def build_spec(args: argparse.Namespace, suite: str) -> ExperimentSpec:
    data: dict = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    data.setdefault("suite", suite)
    base = ExperimentSpec.from_dict(data).to_dict()
    if args.seed is not None:
        base["seeds"] = [args.seed]
    if args.seeds:
        base["seeds"] = [int(s) for s in args.seeds.split(",")]
    if args.steps is not None:
        base["steps"] = args.steps
    if args.out is not None:
        base["out_dir"] = args.out
    for flag in ("lr", "batch_size", "workers"):
        v = getattr(args, flag, None)
        if v is not None:
            base[flag] = v
    for flag, key in _FUSION_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            base["fusion"][key] = v
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set_dotted(base, k, _parse_value(v))
    return ExperimentSpec.from_dict(base)


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment spec")
    p.add_argument("--seed", type=int, help="single seed (overrides the config's seeds)")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", help="output directory (relative to $SKIPLAB_OUT when set)")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--detach", type=int, help="number of detached shallow taps")
    p.add_argument("--blocks", type=int)
    p.add_argument("--skip-scale", dest="skip_scale", type=float)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any spec field, dotted for nesting (fusion.stride=2)")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skiplab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("train", "train the fusion model"),
                        ("dynamics", "pathwise gradient dynamics with windowed statistics"),
                        ("ablate", "stride x detach-count grid"),
                        ("lrsweep", "transition step across learning rates"),
                        ("probe", "reconstruction probe: modality ablation and adapter sweep"),
                        ("theory", "Monte-Carlo checks of the theory identities")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        if name == "ablate":
            p.add_argument("--strides", default="1,2,3,4")
            p.add_argument("--detach-counts", dest="detach_counts", default="0,1,2")
        if name == "lrsweep":
            p.add_argument("--lrs", default="3e-4,1e-3,3e-3")
        if name == "probe":
            p.add_argument("--adapters", default="identity,16,4,1",
                           help="comma list: identity or bottleneck widths")
    p = sub.add_parser("plot", help="re-render a dynamics SVG from its JSONL")
    p.add_argument("jsonl")
    p.add_argument("--svg", help="output path (default: alongside the JSONL)")
    p.add_argument("--horizon", type=int, default=50)
    return parser


def _summary(obj) -> None:
    print(json.dumps(obj, indent=2, default=str))


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "plot":
        return _plot(args)
    spec = build_spec(args, args.command)
    if args.command == "train":
        recs = run_training(spec)
        _summary({"records": len(recs), "out": str(spec.out_path(spec.suite))})
    elif args.command == "dynamics":
        res = run_grad_dynamics(spec)
        _summary([{"seed": r["seed"], "t_trans": r["t_trans"],
                   "early_assumptions": r["early_assumptions"]} for r in res])
    elif args.command == "ablate":
        rep = run_ablation_grid(spec, _ints(args.strides), _ints(args.detach_counts))
        _summary({"baseline": rep["baseline"], "nofusion": rep["nofusion"],
                  "cells": len(rep["cells"]), "skipped": len(rep["skipped"])})
    elif args.command == "lrsweep":
        _summary(run_lr_sweep(spec, _floats(args.lrs)))
    elif args.command == "probe":
        adapters = [a if a == "identity" else int(a) for a in args.adapters.split(",")]
        rep = run_probe(spec, adapters)
        _summary({"note": rep["note"], "ablation": [[(r["mask_image"], r["text"], r["final_loss"])
                                                     for r in a["rows"]] for a in rep["ablation"]]})
    elif args.command == "theory":
        recs = run_theory(spec)
        _summary({"checks": len(recs), "passed": sum(bool(r["pass"]) for r in recs)})
    return EXIT_OK


def _plot(args: argparse.Namespace) -> int:
    path = Path(args.jsonl)
    try:
        records = read_jsonl(path)
    except OSError as exc:
        raise EmitError(f"cannot read {path}: {exc.strerror}") from exc
    if not records:
        raise ConfigError(f"{path} holds no records")
    need = {"step", "norm_main", "norm_skip", "cos", "delta"}
    if not need <= set(records[0]):
        raise ConfigError(f"{path} is not a dynamics stream (missing {sorted(need - set(records[0]))})")
    windows = [{"step": r["step"], "tr_main": r["tr_m"], "tr_skip": r["tr_s"]}
               for r in records if r.get("tr_m") is not None]
    res = {"records": records, "windows": windows}
    out = Path(args.svg) if args.svg else path.with_suffix(".svg")
    write_svg(out, dynamics_panels(res, args.horizon), PlotSpec(title=path.stem, columns=2))
    print(out)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
