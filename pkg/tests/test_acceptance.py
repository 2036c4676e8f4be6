"""Acceptance suite: one PASS/FAIL line per criterion, each at its stated tolerance and time budget.

Run directly (``python3 tests/test_acceptance.py``) or through pytest; the lines are printed either way.
"""
import sys

import pytest

from hybridssm.verify import ALL_CHECKS

# criterion -> (checks that make it up, wall-clock budget in seconds or None)
CRITERIA = {
    "ssm oracle equivalence": (["ssm-oracle"], 60),
    "reset isolation": (["reset-isolation"], 30),
    "gradient suite": (["gradients", "write-forget-gradients"], 300),
    "multiplier symmetry": (["mup-symmetry"], None),
    "coordinate check": (["coordinate"], None),
    "noisy quadratic model": (["toy"], None),
    "schedules": (["schedules"], None),
    "tuner": (["tuner"], None),
    "stability lab": (["stability"], None),
    "harness determinism and training": (["loader", "resume", "training"], 900),
}


def evaluate(name: str) -> tuple[bool, str]:
    checks, budget = CRITERIA[name]
    results = [ALL_CHECKS[c]() for c in checks]
    seconds = sum(r.seconds for r in results)
    ok = all(r.passed for r in results) and (budget is None or seconds < budget)
    budget_note = f", budget {budget}s" if budget else ""
    detail = "; ".join(f"{r.name}: {r.detail}" + ("" if r.passed else " [failed]") for r in results)
    return ok, f"{'PASS' if ok else 'FAIL'} {name}: {detail} ({seconds:.1f}s{budget_note})"


@pytest.mark.parametrize("name", list(CRITERIA))
def test_criterion(name, capsys):
    ok, line = evaluate(name)
    with capsys.disabled():
        print("\n" + line, flush=True)
    assert ok, line


if __name__ == "__main__":
    failed = 0
    for n in CRITERIA:
        ok, line = evaluate(n)
        print(line, flush=True)
        failed += not ok
    sys.exit(1 if failed else 0)
