"""Tests for the invariant suite behind the ``check`` command."""

import numpy as np
import pytest

from gradicon.harness.checks import (
    GRADIENT_LOSSES,
    CheckResult,
    all_passed,
    correlation_identity_errors,
    operator_algebra_errors,
    run_all,
    random_stage1,
    summary_table,
    translation_nullspace,
)
from gradicon.models import stage_atoms


@pytest.fixture(scope="module")
def quick_results():
    return run_all(quick=True)


class TestSuite:
    """The quick suite on a fresh checkout."""

    def test_gating_checks_pass(self, quick_results):
        failed = [r.name for r in quick_results if r.gating and not r.passed]
        assert not failed, failed

    def test_rows_cover_every_loss(self, quick_results):
        names = [r.name for r in quick_results]
        for kind in GRADIENT_LOSSES:
            assert f"gradient directional {kind} (seed 0)" in names
            assert f"gradient coordinate {kind} (seed 0)" in names
        assert any(n.startswith("algebra:") for n in names) and "periodic shift identity" in names

    def test_coordinate_rows_are_informational(self, quick_results):
        assert all(not r.gating for r in quick_results if "coordinate" in r.name)


class TestPieces:
    """Individual invariants."""

    def test_translation(self):
        g, i, c2 = translation_nullspace(c=(0.03, 0.04))
        assert g < 1e-9 and abs(i - c2) < 1e-9 and abs(c2 - 0.0025) < 1e-15

    def test_identity(self):
        assert correlation_identity_errors(trials=10) < 1e-9

    def test_algebra(self):
        assert max(operator_algebra_errors(seed=3).values()) <= 1e-12

    def test_random_stage1_deforms(self):
        model = random_stage1(0)
        assert all(np.any(atom.head.weight.data != 0) for atom in stage_atoms(model))


class TestReporting:
    """Pass/fail aggregation and the table."""

    def rows(self):
        return [
            CheckResult("a", 1e-6, 1e-4, True),
            CheckResult("b", 1e-2, 1e-4, False, gating=False),
        ]

    def test_info_rows_do_not_gate(self):
        assert all_passed(self.rows())
        assert not all_passed(self.rows() + [CheckResult("c", 1.0, 0.5, False)])

    def test_table(self):
        table = summary_table(self.rows()).splitlines()
        assert table[0].startswith("check") and "PASS" in table[1] and "fail (info)" in table[2]
        assert table[-1] == "1/1 gating checks passed"
