"""CLI surface tests: daemons and client verbs as real subprocesses."""

import json
import os
import signal
import subprocess
import sys
import time

import pytest

from conftest import get_free_port, wait_for_port, wait_until

ICE = [sys.executable, "-m", "ice"]


def spawn(*args):
    return subprocess.Popen(
        [*ICE, *args],
        stdout=subprocess.PIPE,
        stderr=subprocess.STDOUT,
        text=True,
    )


def run(*args, check=True, timeout=60):
    proc = subprocess.run(
        [*ICE, *args], capture_output=True, text=True, timeout=timeout
    )
    if check and proc.returncode != 0:
        raise AssertionError(f"ice {' '.join(args)} failed:\n{proc.stdout}\n{proc.stderr}")
    return proc


def stop(proc):
    if proc.poll() is None:
        proc.send_signal(signal.SIGTERM)
        try:
            proc.wait(timeout=10)
        except subprocess.TimeoutExpired:
            proc.kill()
            proc.wait(timeout=5)


@pytest.fixture
def registry_proc():
    port = get_free_port()
    proc = spawn("registry", "--port", str(port))
    wait_for_port("127.0.0.1", port)
    yield f"127.0.0.1:{port}", proc
    stop(proc)


@pytest.fixture
def instrument_proc(registry_proc, tmp_path):
    registry_ep, _ = registry_proc
    port = get_free_port()
    proc = spawn(
        "serve-instrument",
        "--port", str(port),
        "--registry", registry_ep,
        "--store", str(tmp_path / "store"),
        "--time-scale", "0",
    )
    wait_for_port("127.0.0.1", port)
    yield f"127.0.0.1:{port}", registry_ep, proc
    stop(proc)


class TestBasics:
    def test_version(self):
        proc = run("--version")
        assert proc.stdout.startswith("ice ")

    def test_call_and_status_verbs(self, instrument_proc):
        endpoint, registry_ep, _ = instrument_proc
        out = run("status", "u200.microscope", "--registry", registry_ep).stdout
        assert json.loads(out)["state"] == "Idle"
        run("call", "u200.microscope", "set_probe_position",
            "--param", "x=0.25", "--param", "y=0.5", "--registry", registry_ep)
        out = run("call", "u200.microscope", "get_probe_position",
                  "--endpoint", endpoint).stdout
        assert json.loads(out) == {"x": 0.25, "y": 0.5}

    def test_call_param_json_typing(self, instrument_proc):
        endpoint, _, _ = instrument_proc
        out = run(
            "call", "u200.microscope", "start_scan",
            "--param", "width=4", "--param", "height=4",
            "--param", "dwell_time_us=1", "--param", "seed=7",
            "--endpoint", endpoint,
        ).stdout
        assert json.loads(out).startswith("scan-")

    def test_call_failure_exits_nonzero(self, instrument_proc):
        endpoint, _, _ = instrument_proc
        proc = run("call", "u200.microscope", "fire_laser",
                   "--endpoint", endpoint, check=False)
        assert proc.returncode == 1
        assert "NotFound" in proc.stderr


class TestSteer:
    def test_workflow_ok_and_failure_exit_codes(self, instrument_proc, tmp_path):
        _, registry_ep, _ = instrument_proc
        good = tmp_path / "good.json"
        good.write_text(json.dumps({"steps": [
            {"kind": "Invoke", "object": "u200.microscope", "method": "scan_status"},
            {"kind": "Assert", "expect": {"state": "Idle"}},
        ]}))
        proc = run("steer", str(good), "--registry", registry_ep)
        report = json.loads(proc.stdout)
        assert report["overall"] == "Ok"

        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"steps": [
            {"kind": "Invoke", "object": "u200.microscope", "method": "scan_status"},
            {"kind": "Assert", "expect": {"state": "Scanning"}},
            {"kind": "Sleep", "duration_ms": 1},
        ]}))
        proc = run("steer", str(bad), "--registry", registry_ep, check=False)
        assert proc.returncode == 1
        report = json.loads(proc.stdout)
        assert report["overall"] == "Failed"
        assert [s["status"] for s in report["steps"]] == ["Ok", "Failed", "Skipped"]

    def test_unparseable_workflow_reports_line(self, tmp_path):
        broken = tmp_path / "broken.json"
        broken.write_text("{\n  oops\n}\n")
        proc = run("steer", str(broken), "--registry", "127.0.0.1:1", check=False)
        assert proc.returncode == 1
        assert ":2:" in proc.stderr


class TestDataVerbs:
    def test_serve_and_sync_once(self, tmp_path):
        store = tmp_path / "store"
        store.mkdir()
        (store / "a.bin").write_bytes(b"alpha")
        port = get_free_port()
        server = spawn("data", "serve", "--dir", str(store), "--port", str(port))
        try:
            wait_for_port("127.0.0.1", port)
            mirror = tmp_path / "mirror"
            proc = run("data", "sync", "--remote", f"127.0.0.1:{port}", "--dir", str(mirror))
            report = json.loads(proc.stdout)
            assert report["files_transferred"] == 1
            assert (mirror / "a.bin").read_bytes() == b"alpha"
        finally:
            stop(server)

    def test_watch_mode_mirrors_new_files(self, tmp_path):
        store = tmp_path / "store"
        store.mkdir()
        port = get_free_port()
        server = spawn("data", "serve", "--dir", str(store), "--port", str(port))
        watcher = None
        try:
            wait_for_port("127.0.0.1", port)
            mirror = tmp_path / "mirror"
            watcher = spawn(
                "data", "sync", "--remote", f"127.0.0.1:{port}",
                "--dir", str(mirror), "--watch", "--interval", "100",
            )
            time.sleep(0.3)
            (store / "late.bin").write_bytes(b"late")
            wait_until(lambda: (mirror / "late.bin").is_file(), 5, message="watch pickup")
        finally:
            if watcher:
                stop(watcher)
            stop(server)


class TestConfigFile:
    def test_config_file_with_flag_override(self, tmp_path):
        registry_port = get_free_port()
        registry = spawn("registry", "--port", str(registry_port))
        try:
            wait_for_port("127.0.0.1", registry_port)
            config_port = get_free_port()
            override_port = get_free_port()
            config = tmp_path / "server.json"
            config.write_text(json.dumps({
                "port": config_port,
                "registry": f"127.0.0.1:{registry_port}",
                "store": str(tmp_path / "store"),
                "time_scale": 0,
                "object": "cfg.microscope",
            }))
            server = spawn("serve-instrument", "--config", str(config),
                           "--port", str(override_port))
            try:
                wait_for_port("127.0.0.1", override_port)  # flag beats file
                out = run("call", "cfg.microscope", "scan_status",
                          "--endpoint", f"127.0.0.1:{override_port}").stdout
                assert json.loads(out)["state"] == "Idle"
            finally:
                stop(server)
        finally:
            stop(registry)

    def test_missing_store_is_reported(self):
        proc = run("serve-instrument", "--port", str(get_free_port()), check=False)
        assert proc.returncode == 1
        assert "store" in proc.stdout + proc.stderr


class TestPolicyReload:
    def test_sighup_reloads_policy(self, tmp_path):
        # only "admin" may pass: connections are admitted (some principal
        # could be allowed) but the default "ops" caller is denied
        rules = tmp_path / "rules"
        rules.write_text("allow admin * registry\n")
        port = get_free_port()
        proc = spawn("registry", "--port", str(port), "--policy", str(rules))
        try:
            wait_for_port("127.0.0.1", port)
            denied = run("call", "registry", "list", "--param", 'prefix=""',
                         "--endpoint", f"127.0.0.1:{port}", check=False)
            assert denied.returncode == 1 and "PolicyDenied" in denied.stderr
            rules.write_text("allow * * registry\n")
            run("policy", "reload", "--pid", str(proc.pid))
            wait_until(
                lambda: run("call", "registry", "list", "--param", 'prefix=""',
                            "--endpoint", f"127.0.0.1:{port}", check=False).returncode == 0,
                10, message="policy reload taking effect",
            )
        finally:
            stop(proc)
