"""
Tests for the gradient verification suite
"""

import pytest

from app.errors import UsageError, VerificationError
from app.tools.verification import CHECKS, COMPOSED, run_checks, toy_network_config


class TestRunChecks:
    """Tests for running finite-difference checks"""

    @pytest.fixture(scope="class")
    def full_report(self):
        return run_checks(seed=0)

    def test_every_check_passes(self, full_report):
        assert [result.name for result in full_report.results] == list(CHECKS)
        failures = {result.name: result.max_error for result in full_report.failures}
        assert full_report.passed, failures

    def test_composed_model_tolerance(self, full_report):
        (model,) = [result for result in full_report.results if result.kind == COMPOSED]
        assert model.max_error < 1e-3
        assert "fusion_head.weight" in model.errors
        assert "global_head.weight" in model.errors

    def test_attention_tolerance(self, full_report):
        (gated,) = [result for result in full_report.results if result.name == "gated_attention"]
        assert gated.max_error < 1e-4

    def test_report_frame(self, full_report):
        frame = full_report.to_frame()
        assert len(frame) == len(CHECKS)
        assert frame["passed"].all()

    def test_selection_keeps_order(self):
        report = run_checks(["linear", "conv2d"])
        assert [result.name for result in report.results] == ["conv2d", "linear"]

    def test_unknown_check(self):
        with pytest.raises(UsageError, match="softplus"):
            run_checks(["softplus"])

    def test_strict_raises_on_failure(self):
        with pytest.raises(VerificationError, match="linear"):
            run_checks(["linear"], op_tolerance=0.0, strict=True)

    def test_toy_config(self):
        config = toy_network_config()
        assert config.num_classes == 2
        assert config.global_backbone.input_size == 32
        assert config.localizer.top_k == 2
