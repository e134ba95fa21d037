#!/usr/bin/env python3
"""The whole ecosystem in one process: registry, control server, store,
sync watcher, and a steering workflow, all on localhost.

Run: python demos/04_end_to_end_steering.py
"""

import json
import tempfile
import threading
from pathlib import Path

from ice.control_server import ControlServer
from ice.datachannel import StoreServer, watch_and_sync
from ice.instrument import MicroscopeSimulator
from ice.policy import PolicyEngine
from ice.registry import RegistryServer
from ice.workflow import WorkflowRunner


def main() -> None:
    root = Path(tempfile.mkdtemp(prefix="ice-demo-"))
    store_dir = root / "store"
    mirror_dir = root / "mirror"
    policy_file = root / "policy.rules"
    policy_file.write_text(
        "allow * 127.0.0.0/8 registry\n"
        "allow ops 127.0.0.0/8 control\n"
        "allow ops 127.0.0.0/8 data\n"
    )
    policy = PolicyEngine.from_file(policy_file)

    registry = RegistryServer(port=0, policy=policy).start()
    print("registry       :", registry.endpoint)

    simulator = MicroscopeSimulator(store_dir, time_scale=0.01)
    control = ControlServer(port=0, policy=policy, registry_endpoint=registry.endpoint,
                            audit_path=root / "audit.ndjson")
    control.expose("u200.microscope", simulator.dispatch_table(), simulator.MUTATING_METHODS)
    control.start()
    print("control server :", control.endpoint)

    store = StoreServer(store_dir, port=0, policy=policy).start()
    print("store server   :", store.endpoint)

    stop_watch = threading.Event()
    watcher = threading.Thread(
        target=watch_and_sync,
        args=(store.endpoint, mirror_dir, 200),
        kwargs={"principal": "ops", "stop": stop_watch},
        daemon=True,
    )
    watcher.start()
    print("sync watcher   : every 200 ms ->", mirror_dir)

    steps = [
        {"kind": "Invoke", "object": "u200.microscope", "method": "scan_status"},
        {"kind": "Assert", "expect": {"state": "Idle"}},
        {"kind": "Invoke", "object": "u200.microscope", "method": "set_probe_position",
         "params": {"x": 0.3, "y": 0.7}},
        {"kind": "Invoke", "object": "u200.microscope", "method": "start_scan",
         "params": {"width": 64, "height": 64, "dwell_time_us": 10000, "seed": 42}},
        {"kind": "WaitUntil", "object": "u200.microscope", "method": "scan_status",
         "expect": {"state": "Idle", "frames_completed": 1},
         "poll_ms": 100, "deadline_ms": 30000},
        {"kind": "Sync", "source": store.endpoint, "dest": str(mirror_dir)},
        {"kind": "Assert", "object": "local", "method": "has_complete_measurement",
         "params": {"dir": str(mirror_dir)}, "expect": True},
    ]
    print("\nrunning the steering workflow...")
    report = WorkflowRunner(registry=registry.endpoint, principal="ops").run(steps)
    print(json.dumps(report.to_dict(), indent=2))

    print("\nmirrored files:")
    for path in sorted(mirror_dir.rglob("*")):
        if path.is_file() and not path.name.startswith("."):
            print(f"  {path.relative_to(mirror_dir)}  ({path.stat().st_size} bytes)")

    print("\naudit log tail:")
    for line in (root / "audit.ndjson").read_text().splitlines()[-3:]:
        entry = json.loads(line)
        print(f"  #{entry['sequence_no']} {entry['principal']} "
              f"{entry['object']}.{entry['method']} -> {entry['outcome']}")

    stop_watch.set()
    watcher.join(timeout=5)
    store.stop()
    control.stop()
    registry.stop()
    print("\noverall:", report.overall)


if __name__ == "__main__":
    main()
