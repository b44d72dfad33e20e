"""Suite-wide timing: the whole run must stay under the 5-minute budget."""

import time

SUITE_BUDGET_SECONDS = 300
_started = time.perf_counter()


def pytest_sessionfinish(session, exitstatus):
    elapsed = time.perf_counter() - _started
    ok = elapsed < SUITE_BUDGET_SECONDS
    verdict = "PASS" if ok else "FAIL"
    print(f"\n[ACCEPTANCE 8] whole-suite runtime: {verdict} "
          f"({elapsed:.1f}s of {SUITE_BUDGET_SECONDS}s budget)")
    if not ok and exitstatus == 0:
        session.exitstatus = 1
