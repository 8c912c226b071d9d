"""Command-line front end.

Subcommands: precompute, run, sweep, oracle-gap, validate-config.
Exit codes: 0 success, 2 configuration error (including usage), 3 numerical
error.  Every output file embeds a manifest (config hash, command, seeds,
tool version) so results can be re-derived; nothing in the outputs depends
on wall-clock time, so reruns with the same seed are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, control, oracle, sim, valuefn
from .config import load_config
from .errors import ConfigurationError, NumericalError

TRACE_HEADER = ("slot", "pair", "Q_bits", "rate_bps", "power_w", "active")


def _manifest(config, command: str, seeds=None, out=None, extra=None) -> dict:
    man = {
        "config_hash": config.config_hash(),
        "command": command,
        "tool_version": __version__,
    }
    if seeds is not None:
        man["seeds"] = [int(s) for s in seeds]
    if out is not None:
        man["out"] = str(out)
    if extra:
        man.update(extra)
    return man


def _write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _wmmse_opts(args) -> control.WmmseOptions:
    return control.WmmseOptions(max_iters=args.max_iters, obj_tol=args.obj_tol)


def cmd_validate(args) -> int:
    load_config(args.config)
    print("config ok")
    return 0


def cmd_precompute(args) -> int:
    config = load_config(args.config)
    model = valuefn.build_value_model(config)
    payload = {
        "manifest": _manifest(config, "precompute", out=args.out),
        "value_model": valuefn.value_model_to_dict(model),
    }
    _write_json(args.out, payload)
    for flow in model.flows:
        print(f"pair {flow.k}: lambda={flow.lambda_k:.6e} c_inf={flow.c_inf:.6g} "
              f"Q*={flow.q_star_k:.6g} C={flow.big_c:.6e}")
    print(f"wrote {args.out}")
    return 0


def _load_model(config, path):
    with open(path) as fh:
        payload = json.load(fh)
    model = valuefn.value_model_from_dict(payload["value_model"])
    if model.config_hash and model.config_hash != config.config_hash():
        raise ConfigurationError(
            "value model was precomputed for a different config "
            f"({model.config_hash} != {config.config_hash()})"
        )
    return model


def cmd_run(args) -> int:
    config = load_config(args.config)
    seeds = [int(s) for s in args.seeds]
    opts = _wmmse_opts(args)
    model = None
    alpha = None
    if args.controller == "proposed":
        model = _load_model(config, args.model) if args.model \
            else valuefn.build_value_model(config)
    if args.controller == "cop":
        alpha = sim.calibrate_uniform_weight(config, seed=config.rng_seed, opts=opts)
    elif args.controller == "qwp":
        alpha = sim.calibrate_qwp_alpha(config, seed=config.rng_seed, opts=opts)
    cells = []
    for seed in seeds:
        if args.controller == "proposed":
            ctrl = sim.ProposedController(config, model, opts)
        elif args.controller == "zero":
            ctrl = sim.ZeroController(config)
        elif args.controller == "zfp":
            ctrl = sim.ZfpController(config)
        elif args.controller == "cop":
            ctrl = sim.CopController(config, alpha, opts)
        elif args.controller == "qwp":
            ctrl = sim.QwpController(config, alpha, opts)
        else:
            raise ConfigurationError(f"unknown controller {args.controller!r}")
        rng = sim.episode_rng(config.rng_seed, 0, seed)
        metrics, trace = sim.run_episode(
            ctrl, config, rng, args.slots, warmup=args.warmup,
            collect_trace=args.trace is not None,
        )
        cells.append({"seed": seed, "metrics": metrics.to_dict()})
        if args.trace is not None:
            path = Path(args.trace)
            if len(seeds) > 1:
                path = path.with_name(f"{path.stem}.seed{seed}{path.suffix}")
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(TRACE_HEADER)
                writer.writerows(trace)
            print(f"wrote trace {path}")
    objective = float(np.mean([c["metrics"]["objective"] for c in cells]))
    payload = {
        "manifest": _manifest(config, "run", seeds=seeds, out=args.out,
                              extra={"controller": args.controller,
                                     "slots": args.slots,
                                     "alpha": alpha,
                                     "value_model_cache": args.model}),
        "cells": cells,
        "objective_mean": objective,
    }
    _write_json(args.out, payload)
    print(f"{args.controller}: mean objective {objective:.6g} over {len(seeds)} seed(s)")
    print(f"wrote {args.out}")
    return 0


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    if not args.values:
        raise ConfigurationError("sweep needs at least one axis value")
    seeds = [int(s) for s in args.seeds]
    cells = sim.sweep(
        config, args.axis, [float(v) for v in args.values], seeds, args.slots,
        controllers=tuple(args.controllers), warmup=args.warmup,
        opts=_wmmse_opts(args), n_workers=args.threads,
    )
    payload = {
        "manifest": _manifest(config, "sweep", seeds=seeds, out=args.out,
                              extra={"axis": args.axis,
                                     "values": [float(v) for v in args.values],
                                     "controllers": list(args.controllers),
                                     "slots": args.slots}),
        "cells": cells,
        "summary": sim.summarize_cells(cells),
    }
    _write_json(args.out, payload)
    for row in payload["summary"]:
        print(f"{args.axis}={row['axis_value']} {row['controller']}: "
              f"objective {row['objective_mean']:.4g} +/- {row['objective_sem']:.2g}")
    print(f"wrote {args.out}")
    return 0


def cmd_oracle_gap(args) -> int:
    config = load_config(args.config)
    reports = []
    if args.cross_ratios:
        for rho in args.cross_ratios:
            raw = dict(config.raw)
            gains = dict(raw["path_gains"])
            gains["cross_ratio"] = float(rho)
            raw["path_gains"] = gains
            from .config import config_from_dict

            cfg = config_from_dict(raw)
            model = valuefn.build_value_model(cfg)
            rep = oracle.oracle_report(
                cfg, model, args.grid_points, args.channel_samples,
                seed=config.rng_seed, vi_tol=args.vi_tol,
                max_sweeps=args.max_sweeps,
            )
            rep["cross_ratio"] = float(rho)
            reports.append(rep)
            print(f"cross_ratio={rho}: theta*={rep['theta_star']:.6g} "
                  f"theta~={rep['theta_proposed']:.6g} gap={rep['gap']:.6g}")
    else:
        model = valuefn.build_value_model(config)
        rep = oracle.oracle_report(config, model, args.grid_points,
                                   args.channel_samples, seed=config.rng_seed,
                                   vi_tol=args.vi_tol, max_sweeps=args.max_sweeps)
        reports.append(rep)
        print(f"theta*={rep['theta_star']:.6g} theta~={rep['theta_proposed']:.6g} "
              f"gap={rep['gap']:.6g}")
    payload = {
        "manifest": _manifest(config, "oracle-gap", out=args.out,
                              extra={"grid_points": args.grid_points,
                                     "channel_samples": args.channel_samples}),
        "reports": reports,
    }
    _write_json(args.out, payload)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mimostream",
        description="Queue-aware MIMO precoder control simulator",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("config", help="path to the scenario JSON")
        p.add_argument("--max-iters", type=int, default=100)
        p.add_argument("--obj-tol", type=float, default=1e-6)

    p = sub.add_parser("validate-config", help="check a scenario file")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("precompute", help="solve and cache the value model")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_precompute)

    p = sub.add_parser("run", help="simulate one controller")
    add_common(p)
    p.add_argument("--controller", required=True,
                   choices=sim.CONTROLLER_NAMES)
    p.add_argument("--slots", type=int, default=10000)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--seeds", nargs="+", default=["0"])
    p.add_argument("--model", default=None, help="precomputed value-model JSON")
    p.add_argument("--trace", default=None, help="write per-slot CSV here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run all controllers over an axis")
    add_common(p)
    p.add_argument("--axis", required=True, choices=sim.SWEEP_AXES)
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--seeds", nargs="+", default=["0", "1", "2", "3"])
    p.add_argument("--slots", type=int, default=20000)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--controllers", nargs="+", default=list(sim.CONTROLLER_NAMES))
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle-gap", help="optimality gap on a discretised instance")
    add_common(p)
    p.add_argument("--grid-points", type=int, default=48)
    p.add_argument("--channel-samples", type=int, default=16)
    p.add_argument("--cross-ratios", nargs="*", type=float, default=None)
    p.add_argument("--vi-tol", type=float, default=1e-8)
    p.add_argument("--max-sweeps", type=int, default=20000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oracle_gap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
