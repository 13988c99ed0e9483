"""Acceptance gate: every criterion at its stated size and tolerance.

One PASS/FAIL line per criterion is printed in the "acceptance criteria"
section of the pytest summary.
"""

import pytest

from attnsim import verify


@pytest.mark.parametrize("check", verify.CHECKS, ids=lambda f: f.__name__.removeprefix("check_"))
def test_criterion(check, acceptance_log):
    result = check()
    acceptance_log.append(result.line())
    assert result.passed, result.line()


def test_fault_injection_is_caught(acceptance_log):
    result = verify.check_topk(fault="tie-flip")
    acceptance_log.append(f"[{'PASS' if not result.passed else 'FAIL'}] fault injection (tie flip) "
                          f"caught by the top-k suite: {result.detail}")
    assert not result.passed
