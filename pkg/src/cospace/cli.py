"""Command-line entry point: serve, simulate, sweep, audit, conformance, replay."""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path

from . import __version__


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="cospace",
        description="Edge server and simulation toolkit for co-located "
                    "multi-user spatial collaboration.",
    )
    parser.add_argument("--version", action="version", version=f"cospace {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_serve = sub.add_parser("serve", help="run the edge server")
    p_serve.add_argument("--config", required=True, help="server config YAML")
    p_serve.add_argument("--backend", choices=["mock", "external"],
                         help="override the configured backend kind")

    p_sim = sub.add_parser("simulate", help="run a scripted scenario")
    p_sim.add_argument("scenario", help="scenario YAML file")
    p_sim.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p_sim.add_argument("--realtime", action="store_true",
                       help="drive real loopback sockets on the wall clock")
    p_sim.add_argument("--out-dir", default=None, help="write events.log and latency.json here")

    p_sweep = sub.add_parser("sweep", help="registration distance/tag-size sweep")
    p_sweep.add_argument("--distances", default="0.5,1,2,3,5",
                         help="comma-separated meters")
    p_sweep.add_argument("--tag-sizes", default="0.1,0.2", help="comma-separated meters")
    p_sweep.add_argument("--trials", type=int, default=100, help="trials per cell")
    p_sweep.add_argument("--seed", type=int, default=0)
    p_sweep.add_argument("--position-std", type=float, default=0.002, help="meters")
    p_sweep.add_argument("--rotation-std", type=float, default=0.1, help="degrees")
    p_sweep.add_argument("--distance-scale", type=float, default=0.1)
    p_sweep.add_argument("--out-dir", default=None)

    p_audit = sub.add_parser("audit", help="privacy audit over an audit trial spec")
    p_audit.add_argument("trials", help="audit trials YAML (frames + crops)")
    p_audit.add_argument("--out-dir", default=None)

    sub.add_parser("conformance", help="check the golden wire-format fixtures")

    p_replay = sub.add_parser("replay", help="re-execute an event log and verify state")
    p_replay.add_argument("log", help="events.log from a previous run")
    p_replay.add_argument("--scenario", required=True,
                          help="scenario file the log was produced from")

    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    return _dispatch(args)


def _dispatch(args) -> int:
    if args.command == "serve":
        return _cmd_serve(args)
    if args.command == "simulate":
        return _cmd_simulate(args)
    if args.command == "sweep":
        return _cmd_sweep(args)
    if args.command == "audit":
        return _cmd_audit(args)
    if args.command == "conformance":
        return _cmd_conformance()
    if args.command == "replay":
        return _cmd_replay(args)
    raise AssertionError(args.command)


def _cmd_serve(args) -> int:
    from .config import build_core, load_server_config
    from .transport import EdgeServer

    config = load_server_config(args.config)
    if args.backend:
        config.backend_kind = args.backend
    core, backend = build_core(config, measure_local_processing=True)
    edge = EdgeServer(core, backend, host=config.host, port=config.port,
                      ws_port=config.ws_port, retry_policy=config.retry_policy)

    async def run():
        await edge.start()
        print(f"listening on {config.host}:{edge.bound_port}"
              + (f" (ws {edge.bound_ws_port})" if edge.bound_ws_port else ""),
              flush=True)
        await edge.serve_forever()

    try:
        asyncio.run(run())
    except KeyboardInterrupt:
        pass
    return 0


def _cmd_simulate(args) -> int:
    if args.realtime:
        from .realtime import run_scenario_realtime

        payload = run_scenario_realtime(args.scenario, out_dir=args.out_dir)
        print(json.dumps(payload, indent=2, sort_keys=True))
        return 0
    from .reports import render_latency_table, write_latency_files
    from .sim import run_scenario

    result = run_scenario(args.scenario, out_dir=args.out_dir, seed=args.seed)
    print(render_latency_table(result.report))
    if args.out_dir:
        write_latency_files(result.report, args.out_dir)
        print(f"wrote {Path(args.out_dir) / 'events.log'}")
    return 0


def _cmd_sweep(args) -> int:
    from .colocation import NoiseSpec
    from .reports import render_sweep_table, write_sweep_csv
    from .sim import registration_sweep

    distances = [float(v) for v in args.distances.split(",") if v]
    tag_sizes = [float(v) for v in args.tag_sizes.split(",") if v]
    noise = NoiseSpec(
        position_std_m=args.position_std,
        rotation_std_deg=args.rotation_std,
        distance_scale=args.distance_scale,
        seed=args.seed,
    )
    rows = registration_sweep(distances, tag_sizes, noise, args.trials, seed=args.seed)
    print(render_sweep_table(rows), end="")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_sweep_csv(rows, out / "sweep.csv")
        print(f"wrote {out / 'sweep.csv'}")
    return 0


def _cmd_audit(args) -> int:
    from .reports import run_privacy_audit

    summary = run_privacy_audit(args.trials)
    print(summary.table(), end="")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "audit.json", "w", encoding="utf-8") as fh:
            json.dump(
                {"original": summary.original, "cropped": summary.cropped,
                 "trials": summary.trials},
                fh, indent=2, sort_keys=True,
            )
        print(f"wrote {out / 'audit.json'}")
    return 0


def _cmd_conformance() -> int:
    from .sync import run_conformance

    failures = run_conformance()
    if failures:
        for failure in failures:
            print(f"FAIL {failure}", file=sys.stderr)
        return 1
    print("wire conformance: all golden fixtures pass")
    return 0


def _cmd_replay(args) -> int:
    from .config import load_server_config
    from .protocol import dumps_canonical
    from .sim import EventLog, load_scenario, replay_log

    scenario_path = Path(args.scenario)
    doc = load_scenario(scenario_path)
    config = load_server_config(doc.get("server", {}), base_dir=scenario_path.parent)
    entries = EventLog.load(args.log)
    replayed, logged = replay_log(entries, config)
    if dumps_canonical(replayed) == dumps_canonical(logged):
        print("replay: final state matches the log")
        return 0
    print("replay: MISMATCH between replayed and logged state", file=sys.stderr)
    return 1


if __name__ == "__main__":
    raise SystemExit(main())
