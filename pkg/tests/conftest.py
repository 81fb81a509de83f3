from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import tracksync.matching as matching_mod

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance tests append (criterion, passed, detail) here; printed at the end
ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    print(line)
    ACCEPTANCE_RESULTS.append((number, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"CRITERION {number}: {'PASS' if passed else 'FAIL'} - {detail}")


# every plan solved anywhere in the suite must satisfy the plan contract
SOLVED_PLANS: list[tuple[float, float]] = []
_original_fgw_solve = matching_mod.fgw_solve


def _checked_fgw_solve(*args, **kwargs):
    plan = _original_fgw_solve(*args, **kwargs)
    hist = np.asarray(plan.history)
    worst_rise = float(np.max(np.diff(hist))) if hist.size > 1 else 0.0
    SOLVED_PLANS.append((plan.marginal_violation(), worst_rise))
    assert plan.marginal_violation() <= 1e-6, f"marginal violation {plan.marginal_violation()}"
    assert worst_rise <= 1e-9, f"objective rose by {worst_rise}"
    return plan


@pytest.fixture(autouse=True)
def _check_every_plan(monkeypatch):
    monkeypatch.setattr(matching_mod, "fgw_solve", _checked_fgw_solve)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
