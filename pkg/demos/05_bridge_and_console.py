#!/usr/bin/env python3
"""Bring up the ecosystem plus the HTTP bridge and keep it running so the
web console (or curl) can steer the instrument.

Run: python demos/05_bridge_and_console.py [--minutes 10]
Then open the printed URL, or try:
    curl http://127.0.0.1:PORT/api/status
    curl -X POST http://127.0.0.1:PORT/api/command \
         -d '{"method":"start_scan","params":{"width":64,"height":64,"dwell_time_us":10000,"seed":1}}'
    curl -N http://127.0.0.1:PORT/api/events
"""

import argparse
import tempfile
import threading
import time
from pathlib import Path

from ice.bridge import Bridge
from ice.control_server import ControlServer
from ice.datachannel import StoreServer, watch_and_sync
from ice.instrument import MicroscopeSimulator
from ice.registry import RegistryServer


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("--minutes", type=float, default=10.0)
    parser.add_argument("--port", type=int, default=8080)
    args = parser.parse_args()

    root = Path(tempfile.mkdtemp(prefix="ice-console-demo-"))
    registry = RegistryServer(port=0).start()
    simulator = MicroscopeSimulator(root / "store", time_scale=0.01)
    control = ControlServer(port=0, registry_endpoint=registry.endpoint)
    control.expose("u200.microscope", simulator.dispatch_table(), simulator.MUTATING_METHODS)
    control.start()
    store = StoreServer(root / "store", port=0).start()
    stop = threading.Event()
    threading.Thread(
        target=watch_and_sync,
        args=(store.endpoint, root / "mirror", 200),
        kwargs={"stop": stop},
        daemon=True,
    ).start()

    console_dir = Path(__file__).resolve().parent.parent / "frontend"
    static = console_dir if (console_dir / "index.html").exists() else None
    gateway = Bridge(
        mirror_dir=root / "mirror",
        registry=registry.endpoint,
        port=args.port,
        static_dir=static,
    ).start()
    print("bridge :", gateway.url)
    if static:
        print("console:", gateway.url, "(open in a browser)")
    else:
        print("console: frontend/ not built; API only")
    print(f"running for {args.minutes:.0f} min, Ctrl-C to stop")
    try:
        time.sleep(args.minutes * 60)
    except KeyboardInterrupt:
        pass
    finally:
        stop.set()
        gateway.stop()
        store.stop()
        control.stop()
        registry.stop()


if __name__ == "__main__":
    main()
