"""Command-line entry points: single runs, parameter sweeps, and
value-function convergence traces.

Configuration can come from a TOML or JSON file (--config) with flags
overriding file values.  Results are written as a CSV of per-replication
rows plus a JSON summary; the output directory defaults to the
CRANSIM_OUTDIR environment variable, falling back to ./results.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .config import ClusterConfig, ConstraintConfig, TrafficConfig, dbm_to_watts
from .sim import (
    SCHEMES,
    ExperimentConfig,
    export_metrics,
    run_experiment,
    run_replications,
    run_sweep,
)

_SWEEP_PARAMS = {
    "arrival-rate": "arrival_rate",
    "p-max-dbm": "max_power_w",
    "r-max-mbps": "max_fronthaul_bps",
    "sigma": "sigma",
}


def _load_config_file(path: str) -> dict:
    if path.endswith(".json"):
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    try:
        import tomllib  # py311+
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def _add_common_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML or JSON file with any of the flag values")
    p.add_argument("--scheme", choices=SCHEMES, help="transmission scheme")
    p.add_argument("--frames", type=int, help="frames per run")
    p.add_argument("--warmup", type=int, help="frames excluded from averages")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--replications", type=int, help="independent replications")
    p.add_argument("--m", type=int, help="RRH/UE count")
    p.add_argument("--nt", type=int, help="transmit antennas per RRH")
    p.add_argument("--nr", type=int, help="receive antennas per UE")
    p.add_argument("--bandwidth-mhz", type=float, help="system bandwidth, MHz")
    p.add_argument("--frame-ms", type=float, help="scheduling frame length, ms")
    p.add_argument("--noise-dbm", type=float, help="receiver noise power, dBm")
    p.add_argument("--arrival-rate", type=float, help="packets per second per UE")
    p.add_argument("--packet-mbits", type=float, help="mean packet size, Mbit")
    p.add_argument("--buffer-mbits", type=float, help="buffer size, Mbit")
    p.add_argument("--p-max-dbm", type=float, help="average power budget, dBm")
    p.add_argument("--r-max-mbps", type=float, help="average fronthaul budget, Mbit/s")
    p.add_argument("--sigma", type=float, help="CSIT error variance in [0, 1]")
    p.add_argument("--out", help="output directory (default $CRANSIM_OUTDIR or ./results)")
    p.add_argument("--basename", default="metrics", help="output file stem")


def _merged(args: argparse.Namespace) -> dict:
    merged: dict = {}
    if args.config:
        merged.update(_load_config_file(args.config))
    for key, val in vars(args).items():
        if val is not None and key not in ("config", "command", "out", "basename",
                                           "param", "values", "schemes"):
            merged[key.replace("_", "-")] = val
    return merged


def build_experiment(options: dict) -> ExperimentConfig:
    """Turn flat CLI/file options into a validated ExperimentConfig."""
    cluster = ClusterConfig(
        m=int(options.get("m", 3)),
        nt=int(options.get("nt", 5)),
        nr=int(options.get("nr", 2)),
        bandwidth_hz=float(options.get("bandwidth-mhz", 20.0)) * 1e6,
        frame_duration_s=float(options.get("frame-ms", 10.0)) / 1e3,
        noise_power_w=dbm_to_watts(float(options.get("noise-dbm", -15.0))),
    )
    traffic = TrafficConfig(
        arrival_rate=float(options.get("arrival-rate", 2.5)),
        mean_packet_bits=float(options.get("packet-mbits", 4.0)) * 1e6,
        buffer_bits=float(options.get("buffer-mbits", 32.0)) * 1e6,
    )
    constraints = ConstraintConfig(
        max_power_w=dbm_to_watts(float(options.get("p-max-dbm", 10.0))),
        max_fronthaul_bps=float(options.get("r-max-mbps", 20.0)) * 1e6,
    )
    kwargs = dict(cluster=cluster, traffic=traffic, constraints=constraints)
    if "scheme" in options:
        kwargs["scheme"] = options["scheme"]
    if "frames" in options:
        kwargs["frames"] = int(options["frames"])
    if "warmup" in options:
        kwargs["warmup"] = int(options["warmup"])
    if "seed" in options:
        kwargs["seed"] = int(options["seed"])
    if "replications" in options:
        kwargs["replications"] = int(options["replications"])
    if "sigma" in options:
        kwargs["sigma"] = float(options["sigma"])
    return ExperimentConfig(**kwargs)


def _out_dir(args: argparse.Namespace) -> str:
    return args.out or os.environ.get("CRANSIM_OUTDIR", "results")


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = build_experiment(_merged(args))
    records = run_replications(cfg)
    paths = export_metrics(records, _out_dir(args), basename=args.basename, config=cfg)
    for kind, path in sorted(paths.items()):
        print(f"{kind}: {path}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    options = _merged(args)
    cfg = build_experiment(options)
    param = _SWEEP_PARAMS[args.param]
    raw = [float(v) for v in args.values.split(",") if v.strip()]
    if not raw:
        print("error: empty sweep grid", file=sys.stderr)
        return 2
    if args.param == "p-max-dbm":
        values = [dbm_to_watts(v) for v in raw]
    elif args.param == "r-max-mbps":
        values = [v * 1e6 for v in raw]
    else:
        values = raw
    schemes = args.schemes.split(",") if args.schemes else [cfg.scheme]
    for s in schemes:
        if s not in SCHEMES:
            print(f"error: unknown scheme {s!r}", file=sys.stderr)
            return 2
    records = run_sweep(cfg, param, values, schemes=schemes)
    paths = export_metrics(records, _out_dir(args), basename=args.basename, config=cfg)
    for kind, path in sorted(paths.items()):
        print(f"{kind}: {path}")
    return 0


def _cmd_convergence(args: argparse.Namespace) -> int:
    options = _merged(args)
    options["scheme"] = "QAH-CoMP"
    cfg = build_experiment(options)
    record = run_experiment(cfg, replication=0)
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, f"{args.basename}_values.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        n_regions = record.value_snapshots.shape[1]
        writer.writerow(["frame"] + [f"region_{k}" for k in range(n_regions)])
        for frame, row in zip(record.snapshot_frames, record.value_snapshots):
            writer.writerow([int(frame)] + [repr(float(v)) for v in row])
    print(f"values: {path}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cransim",
        description="Downlink C-RAN cluster simulator with hybrid CoMP and "
                    "queue-aware resource allocation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one configuration (all replications)")
    _add_common_args(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="sweep one parameter over a grid")
    _add_common_args(p_sweep)
    p_sweep.add_argument("--param", required=True, choices=sorted(_SWEEP_PARAMS),
                         help="parameter to sweep")
    p_sweep.add_argument("--values", required=True,
                         help="comma-separated grid values")
    p_sweep.add_argument("--schemes", help="comma-separated schemes to compare")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_conv = sub.add_parser("convergence",
                            help="trace the learned value table of UE 1 over time")
    _add_common_args(p_conv)
    p_conv.set_defaults(func=_cmd_convergence)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
