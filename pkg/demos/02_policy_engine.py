#!/usr/bin/env python3
"""Show first-match policy evaluation over a small rule set.

Run: python demos/02_policy_engine.py
"""

from ice.policy import AccessContext, evaluate, parse_rule

RULES_TEXT = """\
deny  intruder *            control
allow *        127.0.0.0/8  control
allow ops      10.0.0.0/24  data
"""


def main() -> None:
    rules = [r for r in (parse_rule(line) for line in RULES_TEXT.splitlines()) if r]
    print("rules (first match wins, no match denies):")
    for i, rule in enumerate(rules):
        print(f"  {i}: {rule.action:5s} {rule.principal_pattern:9s} "
              f"{rule.source_pattern:13s} {rule.channel}")

    contexts = [
        ("ops", "127.0.0.1", "control"),
        ("intruder", "127.0.0.1", "control"),
        ("ops", "10.0.0.50", "data"),
        ("ops", "10.0.1.50", "data"),
        ("anyone", "127.0.0.1", "registry"),
    ]
    print("\nevaluations:")
    for principal, source, channel in contexts:
        decision = evaluate(rules, AccessContext(principal, source, channel))
        print(f"  ({principal:9s} {source:12s} {channel:9s}) -> {decision}")


if __name__ == "__main__":
    main()
