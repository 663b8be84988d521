"""Command-line interface.

Subcommands:

* ``run``     - simulate a trading day from a config file plus traces
                (CSV or synthesized) and export the report bundle.
* ``verify``  - replay an exported event log and re-validate every
                transition and finalized interval.
* ``oracle``  - run the solver against the independent reference
                optimizer on random instances.
* ``metrics`` - recompute trading metrics from an event log.

The config file is a flat ``key = value`` format; ``#`` starts a comment.
Structured values use ``:`` and ``;`` (for example
``feeders = f01:2000:2500; f02:2000:2500``). Any key can be overridden on
the command line with ``--set key=value``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .ledger import read_events_jsonl, verify_log
from .market import Feeder, GridModel
from .metrics import DEFAULT_UNIT_PRICE, compute_metrics, export_report
from .oracle import run_comparison_suite
from .sim import FailureSpec, SimConfig, run
from .traces import ingest_traces, synthesize_traces


class CliError(Exception):
    pass


def parse_flat_config(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; later keys win."""
    values: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"config line {line_no}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _get(cfg: dict[str, str], key: str, default, cast):
    if key not in cfg:
        return default
    try:
        if cast is bool:
            return cfg[key].lower() in ("1", "true", "yes", "on")
        return cast(cfg[key])
    except ValueError as exc:
        raise CliError(f"config key {key!r}: {exc}") from exc


def _parse_feeders(text: str) -> list[Feeder]:
    feeders = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(":")
        if len(parts) != 3:
            raise CliError(f"feeder entry {chunk!r}: expected id:net_kw:internal_kw")
        feeders.append(Feeder(parts[0].strip(), float(parts[1]), float(parts[2])))
    return feeders


def _parse_failures(text: str) -> list[FailureSpec]:
    specs = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(":")
        if len(parts) != 3:
            raise CliError(f"failure entry {chunk!r}: expected id:fail_time:recover_time")
        recover = None if parts[2].strip() in ("-", "") else float(parts[2])
        specs.append(FailureSpec(parts[0].strip(), float(parts[1]), recover))
    return specs


def _parse_synthesize(text: str) -> dict[str, int]:
    spec = {}
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        key, _, value = chunk.partition("=")
        spec[key.strip()] = int(value)
    missing = {"homes", "producers", "feeders", "intervals"} - set(spec)
    if missing:
        raise CliError(f"synthesize spec missing {sorted(missing)}")
    return spec


def build_run_setup(cfg: dict[str, str], traces_path: str | None):
    """Assemble (SimConfig, traces, unit_price) from flat config values."""
    if traces_path is not None:
        traces = ingest_traces(traces_path)
    elif "synthesize" in cfg:
        spec = _parse_synthesize(cfg["synthesize"])
        traces = synthesize_traces(
            spec["homes"], spec["producers"], spec["feeders"], spec["intervals"],
            seed=_get(cfg, "seed", 0, int))
    else:
        raise CliError("provide --traces or a 'synthesize' config key")

    feeders = _parse_feeders(cfg.get("feeders", ""))
    known = {f.id for f in feeders}
    default_net = _get(cfg, "default_feeder_net_kw", 1e6, float)
    default_internal = _get(cfg, "default_feeder_internal_kw", 1e6, float)
    for trace in traces:
        if trace.feeder not in known:
            feeders.append(Feeder(trace.feeder, default_net, default_internal))
            known.add(trace.feeder)
    if not feeders:
        raise CliError("no feeders defined")

    grid = GridModel(
        feeders=tuple(feeders),
        interval_hours=_get(cfg, "interval_hours", 0.25, float),
        clearing_lead=_get(cfg, "clearing_lead", 1, int),
    )
    horizon = _get(cfg, "horizon", None, int)
    if horizon is None:
        raise CliError("config key 'horizon' is required")

    config = SimConfig(
        grid=grid,
        horizon=horizon,
        seconds_per_interval=_get(cfg, "seconds_per_interval", 4.0, float),
        prediction_window=_get(cfg, "prediction_window", 3, int),
        solver_period=_get(cfg, "solver_period", 1.0, float),
        lookahead=_get(cfg, "lookahead", 5, int),
        n_solvers=_get(cfg, "solvers", 1, int),
        n_adversaries=_get(cfg, "adversaries", 0, int),
        seed=_get(cfg, "seed", 0, int),
        price_cap=_get(cfg, "price_cap", 1.0, float),
        failures=tuple(_parse_failures(cfg.get("failures", ""))),
        detect_latency=_get(cfg, "detect_latency", 0.14, float),
        notify_latency=_get(cfg, "notify_latency", 1.88, float),
        reactivate_latency=_get(cfg, "reactivate_latency", 6.52, float),
        confirmation_delay=_get(cfg, "confirmation_delay", 0.0, float),
        adaptive=_get(cfg, "adaptive", False, bool),
    )
    unit_price = _get(cfg, "unit_price", DEFAULT_UNIT_PRICE, float)
    return config, traces, unit_price


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = parse_flat_config(Path(args.config).read_text(encoding="utf-8"))
    for override in args.set or []:
        key, _, value = override.partition("=")
        if not _:
            raise CliError(f"--set {override!r}: expected key=value")
        cfg[key.strip()] = value.strip()
    config, traces, _ = build_run_setup(cfg, args.traces)
    report = run(config, traces)
    paths = export_report(report, args.out)
    print(f"finalized {report.intervals_finalized}/{report.horizon} intervals")
    print(f"traded {report.metrics.traded_kwh:.6g} kWh "
          f"(sell offered {report.metrics.sell_offered_kwh:.6g}, "
          f"buy offered {report.metrics.buy_offered_kwh:.6g})")
    print(f"events {len(report.events)}; report written to {Path(args.out).resolve()}")
    for name in sorted(paths):
        print(f"  {name}: {paths[name].name}")
    return 0


def _cmd_verify(args: argparse.Namespace) -> int:
    header, events = read_events_jsonl(args.log)
    grid = GridModel.from_payload(header["grid"])
    problems = verify_log(grid, events, price_cap=header.get("price_cap", 1.0))
    if problems:
        for problem in problems:
            print(json.dumps({"error": "verification", "detail": problem}),
                  file=sys.stderr)
        return 1
    print(f"ok: {len(events)} events verified")
    return 0


def _cmd_oracle(args: argparse.Namespace) -> int:
    results = run_comparison_suite(args.instances, seed=args.seed)
    failures = 0
    for r in results:
        status = "ok" if r.ok else "MISMATCH"
        vertex = "-" if r.vertex_objective is None else f"{r.vertex_objective:.6f}"
        print(f"instance {r.index:03d}: vars={r.n_variables:3d} "
              f"solver={r.solver_objective:.6f} reference={r.reference_objective:.6f} "
              f"vertex={vertex} diff={r.difference:.2e} {status}")
        if not r.ok:
            failures += 1
    print(f"{len(results) - failures}/{len(results)} instances agree")
    return 0 if failures == 0 else 1


def _cmd_metrics(args: argparse.Namespace) -> int:
    header, events = read_events_jsonl(args.log)
    grid = GridModel.from_payload(header["grid"])
    metrics = compute_metrics(events, grid.interval_hours, unit_price=args.unit_price)
    for name, value in metrics.rows():
        print(f"{name},{format(value, '.9g')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridtrade",
        description="Forward-trading energy exchange simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a simulation and export reports")
    p_run.add_argument("--config", required=True, help="flat key=value config file")
    p_run.add_argument("--traces", help="prosumer trace CSV (else synthesize)")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key")
    p_run.set_defaults(func=_cmd_run)

    p_verify = sub.add_parser("verify", help="replay and validate an event log")
    p_verify.add_argument("--log", required=True, help="events.jsonl path")
    p_verify.set_defaults(func=_cmd_verify)

    p_oracle = sub.add_parser("oracle", help="compare solver vs reference optimizer")
    p_oracle.add_argument("--instances", type=int, default=200)
    p_oracle.add_argument("--seed", type=int, default=0)
    p_oracle.set_defaults(func=_cmd_oracle)

    p_metrics = sub.add_parser("metrics", help="recompute metrics from a log")
    p_metrics.add_argument("--log", required=True, help="events.jsonl path")
    p_metrics.add_argument("--unit-price", type=float, default=DEFAULT_UNIT_PRICE)
    p_metrics.set_defaults(func=_cmd_metrics)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
