"""The `ice` command line: daemons and client verbs for the ecosystem.

Daemons (registry, serve-instrument, data serve, bridge) run until
SIGINT/SIGTERM and reload their policy file on SIGHUP. Client verbs
(call, status, steer, data sync) talk to a running ecosystem and exit.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path

from . import __version__, bridge as bridge_mod, client, control_server, datachannel
from . import instrument, policy as policy_mod, registry as registry_mod, workflow

log = logging.getLogger("ice")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except (
        client.ClientError,
        policy_mod.PolicyLoadError,
        workflow.WorkflowParseError,
        OSError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ice",
        description="instrument-computing ecosystem control plane",
    )
    parser.add_argument("--log-level", default="info",
                        choices=["debug", "info", "warning", "error"])
    parser.add_argument("--version", action="version", version=f"ice {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("registry", help="run the name registry daemon")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=registry_mod.DEFAULT_PORT)
    p.add_argument("--snapshot", default=None, help="JSON snapshot file, written on change")
    p.add_argument("--policy", default=None, help="policy rule file (default: allow all)")
    p.set_defaults(func=cmd_registry)

    p = sub.add_parser("serve-instrument", help="run the control server with the simulator")
    p.add_argument("--config", default=None, help="JSON config file; flags override its values")
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--registry", default=None, help="registry HOST:PORT to self-register with")
    p.add_argument("--policy", default=None)
    p.add_argument("--store", default=None, help="measurement store directory")
    p.add_argument("--time-scale", type=float, default=None,
                   help="simulated->wall time factor (0 = instantaneous)")
    p.add_argument("--object", default=None, help="exposed object name")
    p.add_argument("--audit", default=None, help="append-only NDJSON audit log path")
    p.add_argument("--advertise-host", default=None)
    p.set_defaults(func=cmd_serve_instrument)

    p = sub.add_parser("call", help="invoke one method on an exposed object")
    p.add_argument("object")
    p.add_argument("method")
    p.add_argument("--param", action="append", default=[], metavar="K=V",
                   help="parameter; V parses as JSON, falling back to string")
    p.add_argument("--registry", default=None)
    p.add_argument("--endpoint", default=None, help="skip the registry, talk to HOST:PORT")
    p.add_argument("--principal", default="ops")
    p.add_argument("--timeout-ms", type=int, default=client.DEFAULT_TIMEOUT_MS)
    p.set_defaults(func=cmd_call)

    p = sub.add_parser("status", help="shorthand for `ice call OBJECT scan_status`")
    p.add_argument("object")
    p.add_argument("--registry", default=None)
    p.add_argument("--endpoint", default=None)
    p.add_argument("--principal", default="ops")
    p.add_argument("--timeout-ms", type=int, default=client.DEFAULT_TIMEOUT_MS)
    p.set_defaults(func=cmd_status)

    p = sub.add_parser("steer", help="run a workflow file")
    p.add_argument("workflow_file")
    p.add_argument("--registry", default=None)
    p.add_argument("--principal", default="ops")
    p.add_argument("--timeout-ms", type=int, default=client.DEFAULT_TIMEOUT_MS)
    p.set_defaults(func=cmd_steer)

    data = sub.add_parser("data", help="data channel commands").add_subparsers(
        dest="data_command", required=True
    )
    p = data.add_parser("serve", help="run the measurement store server")
    p.add_argument("--dir", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=9102)
    p.add_argument("--policy", default=None)
    p.set_defaults(func=cmd_data_serve)

    p = data.add_parser("sync", help="mirror a remote store once or continuously")
    p.add_argument("--remote", required=True, metavar="HOST:PORT")
    p.add_argument("--dir", required=True)
    p.add_argument("--watch", action="store_true")
    p.add_argument("--interval", type=int, default=2000, metavar="MS")
    p.add_argument("--principal", default="ops")
    p.set_defaults(func=cmd_data_sync)

    p = sub.add_parser("bridge", help="run the HTTP/SSE console gateway")
    p.add_argument("--registry", default=None)
    p.add_argument("--endpoint", default=None, help="instrument HOST:PORT (skip the registry)")
    p.add_argument("--mirror", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--object", default="u200.microscope")
    p.add_argument("--poll-ms", type=int, default=bridge_mod.DEFAULT_POLL_MS)
    p.add_argument("--heartbeat-s", type=float, default=bridge_mod.DEFAULT_HEARTBEAT_S)
    p.add_argument("--static", default=None, help="directory with the console bundle")
    p.add_argument("--principal", default="console")
    p.set_defaults(func=cmd_bridge)

    pol = sub.add_parser("policy", help="policy administration").add_subparsers(
        dest="policy_command", required=True
    )
    p = pol.add_parser("reload", help="ask a daemon to reload its policy file (SIGHUP)")
    p.add_argument("--pid", type=int, required=True)
    p.set_defaults(func=cmd_policy_reload)

    return parser


def _policy_engine(path) -> policy_mod.PolicyEngine:
    if path is None:
        return policy_mod.PolicyEngine.allow_all()
    return policy_mod.PolicyEngine.from_file(path)


def _run_daemon(stop_callbacks, policy_engine) -> int:
    """Block until SIGINT/SIGTERM; SIGHUP hot-reloads the policy file."""
    done = threading.Event()

    def on_stop(signum, frame):
        done.set()

    def on_reload(signum, frame):
        policy_engine.reload()

    signal.signal(signal.SIGINT, on_stop)
    signal.signal(signal.SIGTERM, on_stop)
    signal.signal(signal.SIGHUP, on_reload)
    done.wait()
    for callback in stop_callbacks:
        callback()
    return 0


def cmd_registry(args) -> int:
    engine = _policy_engine(args.policy)
    server = registry_mod.RegistryServer(args.host, args.port, args.snapshot, engine)
    server.start()
    print(f"registry listening on {server.endpoint}", flush=True)
    return _run_daemon([server.stop], engine)


def _load_config(path) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ValueError(f"config {path} must be a JSON object")
    return doc


def cmd_serve_instrument(args) -> int:
    config = _load_config(args.config)

    def setting(flag, key, default):
        return flag if flag is not None else config.get(key, default)

    host = setting(args.host, "host", "127.0.0.1")
    port = setting(args.port, "port", 9101)
    registry_ep = setting(args.registry, "registry", None)
    policy_path = setting(args.policy, "policy", None)
    store = setting(args.store, "store", None)
    time_scale = setting(args.time_scale, "time_scale", 1.0)
    object_name = setting(args.object, "object", "u200.microscope")
    audit_path = setting(args.audit, "audit", None)
    advertise = setting(args.advertise_host, "advertise_host", None)
    if store is None:
        print("error: --store (or config key 'store') is required", file=sys.stderr)
        return 1

    engine = _policy_engine(policy_path)
    simulator = instrument.MicroscopeSimulator(store, time_scale=time_scale)
    server = control_server.ControlServer(
        host, int(port), engine, registry_ep, audit_path, advertise
    )
    server.expose(
        object_name,
        simulator.dispatch_table(),
        simulator.MUTATING_METHODS,
        metadata=simulator.metadata().to_dict()["fields"]
        | {"instrument_name": simulator.metadata().instrument_name},
    )
    server.start()
    print(f"control server listening on {server.endpoint} exposing {object_name}", flush=True)
    return _run_daemon([server.stop], engine)


def _parse_params(pairs) -> dict:
    params = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise ValueError(f"--param {pair!r} is not K=V")
        try:
            params[key] = json.loads(raw)
        except ValueError:
            params[key] = raw
    return params


def _make_proxy(args) -> client.Proxy:
    if args.endpoint is None and args.registry is None:
        raise ValueError("need --registry or --endpoint")
    return client.Proxy(
        args.object,
        registry=args.registry,
        endpoint=args.endpoint,
        principal=args.principal,
        timeout_ms=args.timeout_ms,
    )


def cmd_call(args) -> int:
    result = _make_proxy(args).invoke(args.method, _parse_params(args.param))
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def cmd_status(args) -> int:
    result = _make_proxy(args).invoke("scan_status", {})
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def cmd_steer(args) -> int:
    report = workflow.run_workflow(
        args.workflow_file,
        registry=args.registry,
        principal=args.principal,
        timeout_ms=args.timeout_ms,
    )
    print(json.dumps(report.to_dict(), indent=2))
    return 0 if report.ok else 1


def cmd_data_serve(args) -> int:
    engine = _policy_engine(args.policy)
    server = datachannel.StoreServer(args.dir, args.host, args.port, engine)
    server.start()
    print(f"store server listening on {server.endpoint} serving {args.dir}", flush=True)
    return _run_daemon([server.stop], engine)


def cmd_data_sync(args) -> int:
    if not args.watch:
        report = datachannel.sync_once(args.remote, args.dir, principal=args.principal)
        print(json.dumps(report.to_dict(), indent=2))
        return 0 if not report.mismatches else 1
    stop = threading.Event()
    signal.signal(signal.SIGINT, lambda *a: stop.set())
    signal.signal(signal.SIGTERM, lambda *a: stop.set())
    print(f"watching {args.remote} -> {args.dir} every {args.interval} ms", flush=True)
    datachannel.watch_and_sync(
        args.remote, args.dir, args.interval, principal=args.principal, stop=stop
    )
    return 0


def cmd_bridge(args) -> int:
    gateway = bridge_mod.Bridge(
        mirror_dir=args.mirror,
        registry=args.registry,
        instrument_endpoint=args.endpoint,
        object_name=args.object,
        host=args.host,
        port=args.port,
        poll_ms=args.poll_ms,
        heartbeat_s=args.heartbeat_s,
        static_dir=args.static,
        principal=args.principal,
    )
    gateway.start()
    print(f"bridge listening on {gateway.url}", flush=True)
    return _run_daemon([gateway.stop], policy_mod.PolicyEngine.allow_all())


def cmd_policy_reload(args) -> int:
    os.kill(args.pid, signal.SIGHUP)
    print(f"sent SIGHUP to {args.pid}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
