"""Command-line entry point: ``qedgeproxy {simulate,compare,topology,serve,report}``.

Exit codes: 0 success, 1 domain error (bad config, failed validation), 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import yaml

from .emulator import dump_topology, load_topology, paper_topology
from .model import ConfigurationError
from .pool import PoolSettings
from .routing import QEDGE_SELECTIONS, RouterKind
from .scenarios import (
    BUILTIN_SCENARIOS,
    COMPARISON,
    FORMATS,
    export_phases,
    export_report,
    read_records,
    resolve_scenario,
    run,
    summarize,
    write_records,
)

log = logging.getLogger("qedgeproxy")

CONFIG_ENV = "QEDGE_CONFIG"


def _env_config() -> dict:
    path = os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{CONFIG_ENV} file must hold a mapping")
    return data


def _violation_limit(text: str) -> Optional[int]:
    if text.lower() in ("none", "inf", "off"):
        return None
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("violation limit must be >= 1 or 'none'")
    return value


def _add_estimator_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("estimator")
    g.add_argument("--beta", type=float, help="EWMA weight of a new sample (default 0.3)")
    g.add_argument(
        "--violation-limit",
        type=_violation_limit,
        default=argparse.SUPPRESS,
        help="consecutive SLO violations before ejection (default 1; 'none' disables)",
    )
    g.add_argument("--prior-ms", type=float, help="prior processing time for initial estimates")
    g.add_argument("--probe-every", type=int, help="re-probe ejected instances every N requests")
    p.add_argument("--nodeport-overhead", type=float, default=0.0, metavar="MS",
                   help="extra per-request latency charged to NodePort")


def _settings(args, env: dict) -> PoolSettings:
    est = dict(env.get("estimator") or {})
    if args.beta is not None:
        est["beta"] = args.beta
    if hasattr(args, "violation_limit"):
        est["violation_limit"] = args.violation_limit
    if args.prior_ms is not None:
        est["prior_processing_ms"] = args.prior_ms
    if args.probe_every is not None:
        est["probe_every"] = args.probe_every
    return PoolSettings(**est)


def _write(path: Optional[str], text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def cmd_simulate(args, parser) -> int:
    if args.alpha is not None and args.router != "proximity":
        parser.error("--alpha only applies to --router proximity")
    env = _env_config()
    if args.router == "proximity":
        if args.alpha is None:
            print("warning: --alpha not given, using 1.0", file=sys.stderr)
            args.alpha = 1.0
        kind = RouterKind.proximity(args.alpha, args.refresh_period)
    else:
        kind = RouterKind(args.router)
    scenario = resolve_scenario(args.scenario)
    records = run(
        scenario,
        kind,
        args.seed,
        settings=_settings(args, env),
        nodeport_overhead_ms=args.nodeport_overhead,
        fallback_on_empty_pool=args.fallback,
        qedge_selection=args.qedge_selection,
    )
    report = summarize(records, scenario.spec, kind.label)
    if args.out:
        _write(args.out, write_records(records))
    if args.phases:
        _write(args.phases, export_phases(report))
    sys.stdout.write(export_report([report], args.format))
    return 0


def cmd_compare(args, parser) -> int:
    env = _env_config()
    settings = _settings(args, env)
    names = list(BUILTIN_SCENARIOS) if args.scenario == "all" else [args.scenario]
    reports = []
    for name in names:
        scenario = resolve_scenario(name)
        for kind in COMPARISON:
            records = run(scenario, kind, args.seed, settings=settings,
                          nodeport_overhead_ms=args.nodeport_overhead)
            label = kind.label if len(names) == 1 else f"{kind.label} ({scenario.name})"
            reports.append(summarize(records, scenario.spec, label))
    sys.stdout.write(export_report(reports, args.format))
    return 0


def cmd_topology(args, parser) -> int:
    if args.action == "dump":
        sys.stdout.write(dump_topology(paper_topology()))
        return 0
    if not args.file:
        parser.error("topology validate needs a FILE")
    try:
        topo = load_topology(Path(args.file).read_text(encoding="utf-8"))
    except ConfigurationError as exc:
        for problem in getattr(exc, "problems", [str(exc)]):
            print(f"{args.file}: {problem}", file=sys.stderr)
        return 1
    print(f"{args.file}: ok ({len(topo.vertices)} vertices, {len(topo.links)} links)")
    return 0


def cmd_serve(args, parser) -> int:
    from .server import load_proxy_config, serve

    path = args.config or os.environ.get(CONFIG_ENV)
    if not path:
        parser.error(f"serve needs --config or {CONFIG_ENV}")
    config = load_proxy_config(Path(path).read_text(encoding="utf-8"), Path(path).parent)
    if args.bind:
        config.bind = args.bind
    serve(config)
    return 0


def cmd_report(args, parser) -> int:
    records = read_records(Path(args.records).read_text(encoding="utf-8"))
    if not records:
        raise ConfigurationError(f"{args.records} holds no records")
    report = summarize(records, configuration=args.label)
    sys.stdout.write(export_report([report], args.format))
    if args.phases:
        _write(args.phases, export_phases(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qedgeproxy", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one router through a scenario")
    p.add_argument("--scenario", default="static", help="static, dynamic or a scenario YAML file")
    p.add_argument("--router", choices=["qedge", "nodeport", "proximity"], default="qedge")
    p.add_argument("--alpha", type=float, help="proximity trade-off in [0, 1]")
    p.add_argument("--refresh-period", type=int, default=100,
                   help="proximity latency refresh period in requests")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", help="write the per-request record stream (CSV) here")
    p.add_argument("--phases", help="write per-phase instance counts (CSV) here")
    p.add_argument("--format", choices=FORMATS, default="markdown")
    p.add_argument("--fallback", action="store_true",
                   help="route to the best estimate when the QoS pool is empty")
    p.add_argument("--qedge-selection", choices=QEDGE_SELECTIONS, default="cyclic",
                   help="equal-weight pick within the QoS pool")
    _add_estimator_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="run all four router configurations")
    p.add_argument("--scenario", default="all", help="static, dynamic, all or a scenario YAML file")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--format", choices=FORMATS, default="markdown")
    _add_estimator_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("topology", help="dump the default topology or validate a file")
    p.add_argument("action", choices=["dump", "validate"])
    p.add_argument("file", nargs="?")
    p.set_defaults(func=cmd_topology)

    p = sub.add_parser("serve", help="run the HTTP proxy")
    p.add_argument("--config", help=f"proxy config YAML (default: ${CONFIG_ENV})")
    p.add_argument("--bind", help="override the bind address host:port")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("report", help="summarize a record stream written by simulate --out")
    p.add_argument("records")
    p.add_argument("--format", choices=FORMATS, default="markdown")
    p.add_argument("--label", default="run")
    p.add_argument("--phases", help="write per-phase instance counts (CSV) here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args, parser)
    except (ConfigurationError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
