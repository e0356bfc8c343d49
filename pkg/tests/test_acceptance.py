"""Acceptance criteria 1-14 at their stated sizes and tolerances; one printed line per criterion."""

import pytest

from mhnforget.acceptance import CRITERIA, KNOWN_RED, Settings, run_criterion

FULL = Settings(reduced=False)


def _marks(n):
    if n in KNOWN_RED:
        return [pytest.mark.xfail(strict=False, reason="ordinal BM criterion fails at the reference protocol; see ledger")]
    return []


@pytest.mark.parametrize("n", [pytest.param(n, marks=_marks(n), id=f"criterion_{n:02d}") for n in CRITERIA])
def test_criterion(n, capsys):
    res = run_criterion(n, FULL)
    with capsys.disabled():
        print("\n" + res.line())
    assert res.passed, res.detail
