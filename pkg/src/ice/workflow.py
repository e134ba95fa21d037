"""Declarative workflow runner: the console-scripted steering surface.

A workflow document is a JSON object {"steps": [...]} where each step is

    {"kind": "Invoke",    "object": O, "method": M, "params": {...}}
    {"kind": "WaitUntil", "object": O, "method": M, "params": {...},
                          "expect": E, "poll_ms": P, "deadline_ms": D}
    {"kind": "Assert",    "expect": E}                      # vs previous result
    {"kind": "Assert",    "object": O, "method": M, "params": {...}, "expect": E}
    {"kind": "Sync",      "source": "HOST:PORT", "dest": DIR}
    {"kind": "Sleep",     "duration_ms": N}

Steps run strictly in order and the run stops at the first failure; the
remaining steps are reported as Skipped. An expect value matches a map
result when every expected key matches recursively (subset match), and by
equality otherwise.

The runner also serves a built-in client-side object named "local" for
mirror assertions: file_exists {path}, list_dir {dir},
has_complete_measurement {dir}.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import client, datachannel
from .instrument import MEASUREMENT_SUFFIX, SIDECAR_SUFFIX
from .wire import E_INVALID_PARAMS, E_NOT_FOUND, IceError

log = logging.getLogger(__name__)

STEP_KINDS = ("Invoke", "WaitUntil", "Assert", "Sync", "Sleep")
LOCAL_OBJECT = "local"
DEFAULT_POLL_MS = 500

OK = "Ok"
FAILED = "Failed"
SKIPPED = "Skipped"


class WorkflowParseError(Exception):
    """Document rejected before any step ran."""


@dataclass
class StepOutcome:
    index: int
    kind: str
    status: str
    detail: dict = field(default_factory=dict)
    duration_ms: float = 0.0

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "kind": self.kind,
            "status": self.status,
            "detail": self.detail,
            "duration_ms": round(self.duration_ms, 3),
        }


@dataclass
class WorkflowReport:
    overall: str
    duration_ms: float
    steps: list[StepOutcome]

    @property
    def ok(self) -> bool:
        return self.overall == OK

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "duration_ms": round(self.duration_ms, 3),
            "steps": [s.to_dict() for s in self.steps],
        }


def expect_matches(expected, actual) -> bool:
    """Subset match for maps, elementwise for lists, equality otherwise."""
    if isinstance(expected, dict):
        if not isinstance(actual, dict):
            return False
        return all(key in actual and expect_matches(value, actual[key]) for key, value in expected.items())
    if isinstance(expected, list):
        if not isinstance(actual, list) or len(expected) != len(actual):
            return False
        return all(expect_matches(e, a) for e, a in zip(expected, actual))
    return expected == actual


def load_workflow(path) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8")
    return parse_workflow(text, source=str(path))


def parse_workflow(text: str, source: str = "<workflow>") -> list[dict]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WorkflowParseError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("steps"), list):
        raise WorkflowParseError(f'{source}: document must be an object with a "steps" list')
    steps = doc["steps"]
    for i, step in enumerate(steps):
        if not isinstance(step, dict):
            raise WorkflowParseError(f"{source}: step {i} is not an object")
        kind = step.get("kind")
        if kind not in STEP_KINDS:
            raise WorkflowParseError(f"{source}: step {i} has unknown kind {kind!r}")
        if kind in ("Invoke", "WaitUntil"):
            if not step.get("object") or not step.get("method"):
                raise WorkflowParseError(f"{source}: step {i} ({kind}) needs object and method")
        if kind == "WaitUntil":
            if "expect" not in step:
                raise WorkflowParseError(f"{source}: step {i} (WaitUntil) needs expect")
            if not isinstance(step.get("deadline_ms"), (int, float)) or step["deadline_ms"] <= 0:
                raise WorkflowParseError(f"{source}: step {i} (WaitUntil) needs deadline_ms > 0")
        if kind == "Assert" and "expect" not in step:
            raise WorkflowParseError(f"{source}: step {i} (Assert) needs expect")
        if kind == "Sync" and (not step.get("source") or not step.get("dest")):
            raise WorkflowParseError(f"{source}: step {i} (Sync) needs source and dest")
        if kind == "Sleep" and not isinstance(step.get("duration_ms"), (int, float)):
            raise WorkflowParseError(f"{source}: step {i} (Sleep) needs duration_ms")
    return steps


class WorkflowRunner:
    def __init__(self, registry: str | None = None, principal: str = "workflow",
                 timeout_ms: int = client.DEFAULT_TIMEOUT_MS):
        self.registry = registry
        self.principal = principal
        self.timeout_ms = timeout_ms
        self._proxies: dict[str, client.Proxy] = {}
        self._local = _local_table()

    def run(self, steps: list[dict]) -> WorkflowReport:
        outcomes: list[StepOutcome] = []
        previous_result = None
        failed = False
        run_started = time.monotonic()
        for index, step in enumerate(steps):
            kind = step["kind"]
            if failed:
                outcomes.append(StepOutcome(index, kind, SKIPPED))
                continue
            started = time.monotonic()
            try:
                result, detail = self._run_step(step, previous_result)
                status = OK
                previous_result = result
            except Exception as exc:
                status, detail = FAILED, {"error": str(exc)}
                failed = True
            outcomes.append(
                StepOutcome(index, kind, status, detail, (time.monotonic() - started) * 1000.0)
            )
        overall = FAILED if failed else OK
        return WorkflowReport(overall, (time.monotonic() - run_started) * 1000.0, outcomes)

    def _run_step(self, step: dict, previous_result):
        kind = step["kind"]
        if kind == "Invoke":
            result = self._call(step["object"], step["method"], step.get("params"))
            return result, {"result": result}
        if kind == "WaitUntil":
            return self._wait_until(step)
        if kind == "Assert":
            return self._assert(step, previous_result)
        if kind == "Sync":
            report = datachannel.sync_once(step["source"], step["dest"], principal=self.principal)
            if report.mismatches:
                raise RuntimeError(f"sync finished with mismatches: {report.mismatches}")
            return report.to_dict(), {"report": report.to_dict()}
        if kind == "Sleep":
            time.sleep(step["duration_ms"] / 1000.0)
            return previous_result, {"slept_ms": step["duration_ms"]}
        raise WorkflowParseError(f"unknown step kind {kind!r}")

    def _wait_until(self, step: dict):
        poll_s = step.get("poll_ms", DEFAULT_POLL_MS) / 1000.0
        deadline = time.monotonic() + step["deadline_ms"] / 1000.0
        attempts = 0
        while True:
            attempts += 1
            result = self._call(step["object"], step["method"], step.get("params"))
            if expect_matches(step["expect"], result):
                return result, {"result": result, "attempts": attempts}
            if time.monotonic() >= deadline:
                raise RuntimeError(
                    f"deadline after {attempts} polls; last result {json.dumps(result)[:200]}"
                )
            time.sleep(poll_s)

    def _assert(self, step: dict, previous_result):
        if step.get("object") and step.get("method"):
            actual = self._call(step["object"], step["method"], step.get("params"))
        else:
            actual = previous_result
        if not expect_matches(step["expect"], actual):
            raise RuntimeError(
                f"expected {json.dumps(step['expect'])}, got {json.dumps(actual)[:200]}"
            )
        return actual, {"result": actual}

    def _call(self, object_name: str, method: str, params: dict | None):
        if object_name == LOCAL_OBJECT:
            handler = self._local.get(method)
            if handler is None:
                raise IceError(E_NOT_FOUND, f"local object has no method {method!r}")
            return handler(params or {})
        proxy = self._proxies.get(object_name)
        if proxy is None:
            proxy = client.Proxy(
                object_name, registry=self.registry,
                principal=self.principal, timeout_ms=self.timeout_ms,
            )
            self._proxies[object_name] = proxy
        return proxy.invoke(method, params)


def _local_table() -> dict:
    def file_exists(params: dict):
        path = params.get("path")
        if not isinstance(path, str) or not path:
            raise IceError(E_INVALID_PARAMS, "path must be a non-empty string")
        return Path(path).is_file()

    def list_dir(params: dict):
        directory = params.get("dir")
        if not isinstance(directory, str) or not directory:
            raise IceError(E_INVALID_PARAMS, "dir must be a non-empty string")
        root = Path(directory)
        if not root.is_dir():
            return []
        return sorted(p.name for p in root.iterdir() if p.is_file())

    def has_complete_measurement(params: dict):
        directory = params.get("dir")
        if not isinstance(directory, str) or not directory:
            raise IceError(E_INVALID_PARAMS, "dir must be a non-empty string")
        root = Path(directory)
        if not root.is_dir():
            return False
        for pixel in root.rglob(f"*{MEASUREMENT_SUFFIX}"):
            sidecar = pixel.with_name(pixel.name[: -len(MEASUREMENT_SUFFIX)] + SIDECAR_SUFFIX)
            if sidecar.is_file():
                return True
        return False

    return {
        "file_exists": file_exists,
        "list_dir": list_dir,
        "has_complete_measurement": has_complete_measurement,
    }


def run_workflow(path, registry: str | None = None, principal: str = "workflow",
                 timeout_ms: int = client.DEFAULT_TIMEOUT_MS) -> WorkflowReport:
    """Load and execute a workflow file; parse errors raise before any step."""
    steps = load_workflow(path)
    return WorkflowRunner(registry, principal, timeout_ms).run(steps)
