"""Firewall-style access control, first-match with default deny.

Rule file grammar, one rule per line, `#` starts a comment:

    <allow|deny> <principal|*> <ipv4|cidr|*> <control|data|registry>

Rules are evaluated in file order against (principal, source address,
channel); the first match wins and an empty or exhausted list denies.
Rule lists are immutable once loaded; reload swaps the whole list.
"""

from __future__ import annotations

import ipaddress
import logging
import threading
from dataclasses import dataclass, field

log = logging.getLogger(__name__)

ALLOW = "allow"
DENY = "deny"
ACTIONS = frozenset({ALLOW, DENY})

CHANNEL_CONTROL = "control"
CHANNEL_DATA = "data"
CHANNEL_REGISTRY = "registry"
CHANNELS = frozenset({CHANNEL_CONTROL, CHANNEL_DATA, CHANNEL_REGISTRY})


class PolicyLoadError(Exception):
    """Rule file rejected; no partial policy is ever installed."""


@dataclass(frozen=True)
class PolicyRule:
    action: str
    principal_pattern: str
    source_pattern: str
    channel: str
    network: ipaddress.IPv4Network | None = field(default=None, compare=False, repr=False)

    def matches(self, principal: str, source: ipaddress.IPv4Address, channel: str) -> bool:
        if self.channel != channel:
            return False
        if self.principal_pattern != "*" and self.principal_pattern != principal:
            return False
        if self.source_pattern != "*" and source not in self.network:
            return False
        return True


@dataclass(frozen=True)
class AccessContext:
    principal: str
    source_address: str
    channel: str


def parse_rule(line: str) -> PolicyRule | None:
    """Parse one line; returns None for blanks/comments, raises ValueError."""
    text = line.split("#", 1)[0].strip()
    if not text:
        return None
    parts = text.split()
    if len(parts) != 4:
        raise ValueError(f"expected 4 fields (action principal source channel), got {len(parts)}")
    action, principal, source, channel = parts
    action = action.lower()
    channel = channel.lower()
    if action not in ACTIONS:
        raise ValueError(f"unknown action {action!r}")
    if channel not in CHANNELS:
        raise ValueError(f"unknown channel {channel!r}")
    if not principal:
        raise ValueError("empty principal pattern")
    network = None
    if source != "*":
        try:
            network = ipaddress.IPv4Network(source, strict=False)
        except ValueError as exc:
            raise ValueError(f"bad address/CIDR {source!r}: {exc}") from exc
    return PolicyRule(action, principal, source, channel, network)


def load_rules(path) -> list[PolicyRule]:
    """Load a rule file; any malformed line fails the whole load."""
    rules: list[PolicyRule] = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            try:
                rule = parse_rule(line)
            except ValueError as exc:
                raise PolicyLoadError(f"{path}:{lineno}: {exc}") from exc
            if rule is not None:
                rules.append(rule)
    return rules


def evaluate(rules: list[PolicyRule], ctx: AccessContext) -> str:
    """First matching rule decides; no match is a deny."""
    source = ipaddress.IPv4Address(ctx.source_address)
    if ctx.channel not in CHANNELS:
        raise ValueError(f"unknown channel {ctx.channel!r}")
    for rule in rules:
        if rule.matches(ctx.principal, source, ctx.channel):
            return rule.action
    return DENY


class PolicyEngine:
    """Holds the active rule list and supports atomic hot reload.

    Evaluation is pure over an immutable list; reload() re-reads the file
    and swaps the list in one assignment, so concurrent readers see either
    the old or the new policy, never a mix.
    """

    def __init__(self, rules: list[PolicyRule], path=None, open_policy: bool = False):
        self._rules = list(rules)
        self._path = path
        self._open = open_policy
        self._reload_lock = threading.Lock()

    @classmethod
    def allow_all(cls) -> "PolicyEngine":
        """Open policy used when a daemon is started without --policy."""
        return cls([], open_policy=True)

    @classmethod
    def from_file(cls, path) -> "PolicyEngine":
        return cls(load_rules(path), path=path)

    @property
    def rules(self) -> list[PolicyRule]:
        return list(self._rules)

    def evaluate(self, principal: str, source_address: str, channel: str) -> str:
        if self._open:
            return ALLOW
        return evaluate(self._rules, AccessContext(principal, source_address, channel))

    def permits_source(self, source_address: str, channel: str) -> bool:
        """Accept-time gate: could any principal be allowed from here?

        The principal is only known after the first frame, so a connection
        is admitted iff some principal (one named in the rules, or an
        unnamed one that only `*` rules can match) would evaluate to allow.
        """
        if self._open:
            return True
        candidates = {r.principal_pattern for r in self._rules if r.principal_pattern != "*"}
        candidates.add("\x00probe")
        return any(
            self.evaluate(principal, source_address, channel) == ALLOW
            for principal in candidates
        )

    def reload(self) -> None:
        """Re-read the rule file; on failure the old policy stays active."""
        if self._path is None:
            return
        with self._reload_lock:
            try:
                fresh = load_rules(self._path)
            except (OSError, PolicyLoadError) as exc:
                log.warning("policy reload failed, keeping previous rules: %s", exc)
                return
            self._rules = fresh
            log.info("policy reloaded from %s (%d rules)", self._path, len(fresh))
