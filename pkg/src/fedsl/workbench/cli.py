"""Command line entry point: run, sweep, optimize-split, grad-check, validate.

Exit codes: 0 ok, 1 config error, 2 runtime error, 3 check failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from fedsl import adapt_opt
from fedsl.errors import ConfigError, FedSLError
from fedsl.sim_core import trace_enabled, write_trace
from fedsl.workbench.config import load_config
from fedsl.workbench.runner import build_setup, final_rows, run_experiment, sweep, write_csv

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_axis(spec: str):
    """``/channel/packet_loss_rate=0,0.1`` -> (pointer, [0, 0.1])."""
    pointer, sep, values = spec.partition("=")
    if not sep or not pointer.startswith("/") or not values:
        raise ConfigError(f"axis must look like /path/to/leaf=v1,v2,... (got {spec!r})")
    return pointer, [_parse_value(v) for v in values.split(",")]


def parse_seeds(text: str) -> list[int]:
    try:
        parts = [int(p) for p in text.split(",")]
    except ValueError:
        raise ConfigError(f"bad --seeds value {text!r}") from None
    if len(parts) == 1:
        if parts[0] < 1:
            raise ConfigError("--seeds count must be >= 1")
        return list(range(parts[0]))
    return parts


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    table = run_experiment(cfg)
    out = _out_dir(args.out)
    write_csv(table, out / "metrics.csv")
    if trace_enabled() and "trace" in table.extras:
        write_trace(table.extras["trace"], out / "trace.csv")
    last = table.final
    print(f"{last.framework} seed={last.seed} round={last.round} t={last.sim_time_s:.4f}s acc={last.test_acc:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    pointer, values = parse_axis(args.axis)
    table = sweep(cfg, pointer, values, parse_seeds(args.seeds), workers=args.workers)
    out = _out_dir(args.out)
    write_csv(table, out / "sweep.csv")
    finals = final_rows(table)
    write_csv(finals, out / "final.csv")
    for r in finals:
        print(f"{r.framework} {pointer}={r.axis_value} seed={r.seed} acc={r.test_acc:.4f}")
    return EXIT_OK


def cmd_optimize_split(args) -> int:
    cfg = load_config(args.config)
    setup = build_setup(cfg)
    client = next((c for c in setup.clients if c.id == args.client), None)
    if client is None:
        raise ConfigError(f"no client {args.client}", "/framework/num_clients")
    cut, table = adapt_opt.select_split_layer(
        setup.spec,
        client.device,
        client.channel,
        client.distance,
        cfg.framework.batch_size,
        objective=args.objective,
        server=setup.server,
        latency_weight=args.weight,
    )
    sys.stdout.write(adapt_opt.format_cost_table(table))
    print(f"best cut ({args.objective}): {cut}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from fedsl.gradcheck import run_suite

    results = run_suite(args.trials, args.seed)
    worst = max(results, key=lambda r: r.max_rel_error)
    bad = [r for r in results if not r.max_rel_error <= args.tol or math.isnan(r.max_rel_error)]
    print(f"{len(results)} checks, worst {worst.name} rel err {worst.max_rel_error:.3e} (tol {args.tol:g})")
    for r in bad:
        print(f"FAIL {r.name}: {r.max_rel_error:.3e}")
    return EXIT_CHECK if bad else EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    from fedsl.workbench.runner import check_config

    check_config(cfg)
    print(f"{args.config}: ok ({cfg.framework.kind.value}, N={cfg.framework.num_clients})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsl", description="Deterministic federated split learning simulator")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment and write metrics.csv")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="sweep one config leaf over values x seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", required=True, help="JSON pointer and values, e.g. /channel/packet_loss_rate=0,0.3")
    s.add_argument("--seeds", default="1", help="count (0..n-1) or comma list")
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    o = sub.add_parser("optimize-split", help="print the split-layer cost table")
    o.add_argument("--config", required=True)
    o.add_argument("--objective", choices=("latency", "energy", "weighted"), default="latency")
    o.add_argument("--weight", type=float, default=0.5, help="latency weight for the weighted objective")
    o.add_argument("--client", type=int, default=0)
    o.set_defaults(func=cmd_optimize_split)

    g = sub.add_parser("grad-check", help="finite-difference gradient suite")
    g.add_argument("--trials", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-6)
    g.set_defaults(func=cmd_grad_check)

    v = sub.add_parser("validate", help="check a config file")
    v.add_argument("--config", required=True)
    v.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FedSLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
