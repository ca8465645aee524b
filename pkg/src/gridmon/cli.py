"""Command-line launcher.

Subcommands map one-to-one onto the services' external interfaces:

    gridmon run-registry --listen HOST:PORT [--peers a,b] [--groups g1,g2]
    gridmon run-station  --config station.json
    gridmon run-repo     --config repo.json
    gridmon run-scenario --config scenario.toml [--duration SECONDS]
    gridmon admin        <module-toggle|deploy-filter|restart> ...
    gridmon export       --store DIR --format csv [--out PREFIX]
"""
from __future__ import annotations

import argparse
import json
import signal
import sys
import threading

from .clock import Clock
from .collector import ExecModule
from .overlay import MstConfig
from .registry import RegistryCore, RegistryServer
from .repository import RepoConfig, Repository
from .scenario import ScenarioConfig, run_scenario
from .simnet import NodeTable, SimCollectModule, SimNetModule, SimNode
from .station import ScheduleEntry, StationConfig, StationServer
from .store import TimeSeriesStore
from .subscription import FilterSpec, Predicate


_stop = threading.Event()


def _install_stop_handlers() -> None:
    def handler(signum, frame):
        _stop.set()

    try:
        signal.signal(signal.SIGINT, handler)
        signal.signal(signal.SIGTERM, handler)
    except ValueError:
        pass  # not on the main thread (tests); rely on _stop directly


def _wait_forever() -> None:
    while not _stop.is_set():
        _stop.wait(0.5)


def _load_json(path: str) -> dict:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def cmd_run_registry(args) -> int:
    clock = Clock()
    groups = set(args.groups.split(",")) if args.groups else None
    core = RegistryCore(clock, groups=groups, sweep_ms=args.sweep_ms)
    peers = [p for p in (args.peers or "").split(",") if p]
    server = RegistryServer(core, listen=args.listen, peers=peers,
                            token=args.token)
    server.start()
    print(f"registry listening on {server.endpoint} "
          f"groups={sorted(groups) if groups else 'all'} peers={peers}", flush=True)
    _wait_forever()
    server.stop()
    return 0


def cmd_run_station(args) -> int:
    cfg = _load_json(args.config)
    clock = Clock()
    station_cfg = StationConfig(
        station_id=cfg["station_id"], farm=cfg["farm"],
        groups=set(cfg["groups"]), listen=cfg.get("listen", "127.0.0.1:0"),
        registries=cfg.get("registries", []),
        store_path=cfg.get("store_path"),
        trust_key=cfg.get("trust_key", "dev-trust-key"),
        token=cfg.get("token"), lease_ms=int(cfg.get("lease_ms", 30_000)),
        max_workers=int(cfg.get("max_workers", 64)),
        default_deadline_ms=int(cfg.get("deadline_ms", 10_000)),
        schedule=[ScheduleEntry(module=e["module"], targets=list(e["targets"]),
                                period_ms=int(e["period_ms"]),
                                deadline_ms=e.get("deadline_ms"))
                  for e in cfg.get("schedule", [])])
    station = StationServer(station_cfg, clock)
    nodes = NodeTable()
    seed = int(cfg.get("seed", 0))
    for entry in station_cfg.schedule:
        for target in entry.targets:
            if nodes.get(target) is None:
                nodes.add(SimNode(target, farm=station_cfg.farm,
                                  cluster=cfg.get("cluster", "compute"),
                                  seed=seed,
                                  params=int(cfg.get("params_per_node", 8))))
    station.register_module(SimCollectModule(nodes))
    station.register_module(SimNetModule(nodes))
    for name, command in (cfg.get("exec_modules") or {}).items():
        module = ExecModule(command)
        module.name = name
        station.register_module(module)
    station.apply_schedule()
    station.start()
    print(f"station {station_cfg.station_id} listening on {station.endpoint}", flush=True)
    _wait_forever()
    station.stop()
    return 0


def cmd_run_repo(args) -> int:
    cfg = _load_json(args.config)
    clock = Clock()
    repo = Repository(RepoConfig(
        registries=cfg["registries"], groups=set(cfg["groups"]),
        listen=cfg.get("listen", "127.0.0.1:0"),
        predicates=[Predicate.from_wire(p) for p in cfg.get("predicates", [{}])],
        admin_tokens=set(cfg.get("admin_tokens", [])),
        trust_key=cfg.get("trust_key", "dev-trust-key"),
        token=cfg.get("token"), store_path=cfg.get("store_path"),
        mst=MstConfig(momentum=float(cfg.get("momentum", 0.8)),
                      recompute_period_ms=int(cfg.get("recompute_ms", 10_000))),
        mst_group=cfg.get("mst_group"),
        alert_log_path=cfg.get("alert_log_path")), clock)
    repo.start()
    print(f"repository API on http://{repo.http_endpoint}", flush=True)
    _wait_forever()
    repo.stop()
    return 0


def cmd_run_scenario(args) -> int:
    cfg = ScenarioConfig.load(args.config)
    if args.duration is not None:
        cfg.duration_ms = int(args.duration * 1000)
    if args.time_scale is not None:
        cfg.time_scale = args.time_scale
    if args.report:
        cfg.report_path = args.report
    report = run_scenario(cfg)
    print(json.dumps(report, indent=2))
    if cfg.report_path:
        print(f"report written to {cfg.report_path}", file=sys.stderr)
    return 0


def cmd_admin(args) -> int:
    import urllib.request

    if args.cmd == "module-toggle":
        body = {"kind": "MODULE_TOGGLE", "target": args.service,
                "payload": {"module": args.module, "enabled": not args.off}}
    elif args.cmd == "restart":
        body = {"kind": "RESTART_TARGET", "target": args.service,
                "payload": {"node": args.node or args.service}}
    elif args.cmd == "deploy-filter":
        spec = FilterSpec.from_wire(_load_json(args.spec))
        body = {"kind": "DEPLOY_FILTER", "target": args.service,
                "payload": {"spec": spec.to_wire(), "signature": args.signature}}
    else:
        print(f"unknown admin command {args.cmd}", file=sys.stderr)
        return 2
    req = urllib.request.Request(
        f"http://{args.repo}/api/admin", data=json.dumps(body).encode(),
        headers={"Content-Type": "application/json",
                 "Authorization": f"Bearer {args.token}"}, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            print(resp.read().decode())
    except Exception as e:
        body = getattr(e, "read", lambda: b"")()
        print(f"admin failed: {e} {body.decode() if body else ''}",
              file=sys.stderr)
        return 1
    return 0


def cmd_export(args) -> int:
    store = TimeSeriesStore(path=args.store)
    prefix = args.out or "export"
    raw_path = f"{prefix}-values.csv"
    bins_path = f"{prefix}-bins.csv"
    with open(raw_path, "w", encoding="utf-8") as f:
        f.write("key,time,value\n")
        n_raw = store.export_raw_csv(f)
    with open(bins_path, "w", encoding="utf-8") as f:
        f.write("key,t_start,t_end,mean,min,max,count\n")
        n_bins = store.export_bins_csv(f)
    print(f"{n_raw} values -> {raw_path}; {n_bins} bins -> {bins_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridmon",
                                     description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run-registry", help="run a lookup/registry service")
    p.add_argument("--listen", default="127.0.0.1:4160")
    p.add_argument("--peers", default="", help="comma list of peer endpoints")
    p.add_argument("--groups", default="", help="comma list of served groups")
    p.add_argument("--sweep-ms", type=int, default=1000)
    p.add_argument("--token", default=None)
    p.set_defaults(fn=cmd_run_registry)

    p = sub.add_parser("run-station", help="run a station server")
    p.add_argument("--config", required=True, help="station config (json)")
    p.set_defaults(fn=cmd_run_station)

    p = sub.add_parser("run-repo", help="run the repository/API service")
    p.add_argument("--config", required=True, help="repository config (json)")
    p.set_defaults(fn=cmd_run_repo)

    p = sub.add_parser("run-scenario", help="run a simulated scenario")
    p.add_argument("--config", required=True, help="scenario config (toml/json)")
    p.add_argument("--duration", type=float, default=None,
                   help="override duration, seconds (scenario time)")
    p.add_argument("--time-scale", type=float, default=None)
    p.add_argument("--report", default=None, help="report file path")
    p.set_defaults(fn=cmd_run_scenario)

    p = sub.add_parser("admin", help="send an admin command via the repository")
    p.add_argument("cmd", choices=["module-toggle", "deploy-filter", "restart"])
    p.add_argument("--repo", required=True, help="repository host:port")
    p.add_argument("--token", required=True)
    p.add_argument("--service", required=True, help="target service id")
    p.add_argument("--module", default=None)
    p.add_argument("--off", action="store_true")
    p.add_argument("--node", default=None)
    p.add_argument("--spec", default=None, help="filter spec file (json)")
    p.add_argument("--signature", default=None)
    p.set_defaults(fn=cmd_admin)

    p = sub.add_parser("export", help="export a store directory to CSV")
    p.add_argument("--store", required=True)
    p.add_argument("--format", choices=["csv"], default="csv")
    p.add_argument("--out", default=None, help="output file prefix")
    p.set_defaults(fn=cmd_export)

    return parser


def main(argv=None) -> int:
    _install_stop_handlers()
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
