import json

import numpy as np
import pytest


def make_entry(name: str, delta: float, variance=None):
    from src.estimators import EffectEstimate, EstimatorKind
    from src.inference import BcaInterval, BootstrapResult
    from src.reporting import EstimatorReport

    base = name.partition(":")[0]
    estimate = EffectEstimate(
        delta=delta, arm_means=(0.0, delta), estimator_kind=EstimatorKind(base),
        covariance_structure_used=None, diagnostics=None, n_used=100, label=name,
    )
    boot = None
    if variance is not None:
        interval = BcaInterval(delta - 0.1, delta + 0.1, 0.95, 0.0, 0.0)
        boot = BootstrapResult(point=estimate, replicates=np.array([delta - 0.1, delta + 0.1]), excluded=0,
                               variance=variance, interval=interval, seed=1, B=2)
    return EstimatorReport(estimate, boot)


def make_metrics(boot_B: int = 0):
    from src.data_model import OutcomeKind
    from src.simulation import EstimatorMetrics, ScenarioMetrics

    rows = (
        EstimatorMetrics("unadjusted", 1000, 0.001, 0.0126, 0.0126, 1.0, 0.95,
                         0.003, 0.0005, 0.0005, 0.0, 0.007, coverage_replicates=1000),
        EstimatorMetrics("tmle", 998, -0.0004, 0.0058, 0.0058, 2.1724, None,
                         0.002, 0.0003, 0.0003, 0.05, None, failures={"NotConverged": 2}),
    )
    return ScenarioMetrics("continuous/zero/mcar", OutcomeKind.CONTINUOUS, 0.0, 1000, boot_B, 7, 0.95, rows)


class TestMetricsOutput:
    """Test simulation tables and frames."""

    def test_table_without_coverage(self) -> None:
        """Test the fixed-width table when no bootstrap was run."""
        from src.reporting import format_metrics_table

        lines = format_metrics_table(make_metrics()).splitlines()
        assert lines[0].startswith("Scenario continuous/zero/mcar (continuous), true delta = 0.0000")
        assert lines[1] == "Coverage not computed (B = 0)"
        assert lines[2].split() == ["Estimator", "Bias", "VAR", "MSE", "RMSE", "CP", "Failed"]
        assert lines[3].split() == ["unadjusted", "0.0010", "0.0126", "0.0126", "1.00", "0.95", "0"]
        assert lines[4].split() == ["tmle", "-0.0004", "0.0058", "0.0058", "2.17", "-", "2"]

    def test_table_notes_bootstrap_size(self) -> None:
        """Test that the table notes the resample count against the reference count."""
        from src.reporting import format_metrics_table

        text = format_metrics_table(make_metrics(boot_B=1000))
        assert "B = 1,000 resamples" in text
        assert "B = 10,000" in text

    def test_frame_and_csv(self, tmp_path) -> None:
        """Test one row per estimator and CSV rendering of missing values."""
        from src.reporting import frame_to_csv, metrics_to_frame

        frame = metrics_to_frame([make_metrics()])
        assert list(frame["estimator"]) == ["unadjusted", "tmle"]
        assert np.isnan(frame.loc[1, "coverage"])
        assert frame.loc[1, "failures"] == 2
        path = tmp_path / "metrics.csv"
        text = frame_to_csv(frame, path)
        assert path.read_text(encoding="utf-8") == text
        header, first, second = text.splitlines()
        assert header.split(",")[:4] == ["scenario", "outcome", "true_delta", "estimator"]
        assert ",0.0126," in first
        assert ",," in second


class TestAnalysisReport:
    """Test single-dataset analysis reports."""

    def test_variance_ratios(self) -> None:
        """Test ratios against the unadjusted bootstrap variance."""
        from src.reporting import variance_ratios

        entries = variance_ratios([make_entry("unadjusted", 0.5, 0.02), make_entry("mmrm", 0.45, 0.01),
                                   make_entry("tmle", 0.47)])
        assert [e.variance_ratio for e in entries] == [1.0, 2.0, None]

    def test_no_reference(self) -> None:
        """Test that ratios stay empty without an unadjusted bootstrap."""
        from src.reporting import variance_ratios

        entries = variance_ratios([make_entry("unadjusted", 0.5), make_entry("mmrm", 0.45, 0.01)])
        assert [e.variance_ratio for e in entries] == [None, None]

    def test_to_dict(self, continuous_trial) -> None:
        """Test the JSON layout of a report."""
        from src.reporting import REPORT_SCHEMA_VERSION, build_analysis_report

        report = build_analysis_report(
            "S1", continuous_trial, [make_entry("unadjusted", 0.5, 0.02), make_entry("mmrm_star", 0.4, 0.01)],
            seed=3, boot_B=2, level=0.95, failures={"tmle": "InsufficientRiskSet: too few"}, notes=["n1"],
        )
        payload = json.loads(report.to_json())
        assert payload["schema_version"] == REPORT_SCHEMA_VERSION
        assert payload["study_id"] == "S1"
        assert payload["data"]["n_subjects"] == 200
        assert payload["data"]["visit_labels"] == ["4", "8", "12"]
        assert payload["inference"] == {"boot_B": 2, "seed": 3, "level": 0.95}
        assert payload["variance_ratios"] == {"unadjusted": 1.0, "mmrm_star": 2.0}
        assert payload["failures"] == {"tmle": "InsufficientRiskSet: too few"}
        assert payload["notes"] == ["n1"]
        assert payload["estimates"][1]["bootstrap"]["interval"]["fallback_used"] == "none"
        assert "timings" not in payload and "glmm_structures" not in payload
        assert set(payload["metadata"]) == {"package", "numpy", "scipy", "pandas"}

    def test_glmm_structures(self, binary_trial) -> None:
        """Test per-structure GLMM results and the best-structure pick."""
        from src.reporting import build_analysis_report

        report = build_analysis_report(
            "S2", binary_trial,
            [make_entry("unadjusted", 0.1, 0.004), make_entry("glmm:independence", 0.1, 0.002),
             make_entry("glmm:ar1", 0.1, 0.0025)],
            seed=1, boot_B=2, level=0.95, failures={"glmm:unstructured": "NotConverged: stuck"},
        )
        structures = report.glmm_structures
        assert set(structures) == {"independence", "ar1", "unstructured"}
        assert structures["unstructured"]["converged"] is False
        assert report.glmm_best == "independence"
        assert report.to_dict()["glmm_best"] == "independence"

    def test_frame_and_table(self, continuous_trial) -> None:
        """Test the CSV frame and the text table of a report."""
        from src.reporting import build_analysis_report, format_analysis_table

        report = build_analysis_report(
            "S3", continuous_trial, [make_entry("unadjusted", 0.5, 0.02), make_entry("tmle", 0.45)],
            seed=3, boot_B=2, level=0.95, notes=["glmm skipped: not applicable to continuous outcomes"],
        )
        frame = report.to_frame()
        assert list(frame["estimator"]) == ["unadjusted", "tmle"]
        assert frame.loc[0, "variance_ratio"] == 1.0
        assert np.isnan(frame.loc[1, "se"])
        lines = format_analysis_table(report).splitlines()
        assert lines[0].startswith("Study S3: N=200, K=3, continuous outcome")
        assert lines[2].split()[:2] == ["unadjusted", "0.5000"]
        assert lines[3].split() == ["tmle", "0.4500", "-", "-", "-", "-"]
        assert lines[-1].startswith("note: glmm skipped")

    def test_non_finite_values_become_null(self) -> None:
        """Test that NaN never reaches JSON."""
        from src.reporting import to_json

        payload = json.loads(to_json({"a": float("nan"), "b": [np.float64(1.5), np.inf], "c": np.bool_(True)}))
        assert payload == {"a": None, "b": [1.5, None], "c": True}


class TestVarianceRatioFrame:
    """Test the cross-study comparison."""

    @staticmethod
    def report(study_id: str, ratios: dict, version: int = 1) -> dict:
        return {"schema_version": version, "study_id": study_id, "variance_ratios": ratios}

    def test_flags_and_order(self) -> None:
        """Test dominance flags and the stable sort by study ID."""
        from src.reporting import DOMINANT_FLAG, variance_ratio_frame

        frame = variance_ratio_frame([
            self.report("B", {"unadjusted": 1.0, "mmrm": 1.3, "tmle": 1.1}),
            self.report("A", {"unadjusted": 1.0, "mmrm": 0.9, "tmle": None}),
        ])
        assert list(frame["study_id"]) == ["A", "A", "A", "B", "B", "B"]
        assert list(frame["estimator"][:3]) == ["unadjusted", "mmrm", "tmle"]
        assert set(frame.loc[frame["study_id"] == "A", "flag"]) == {""}
        assert set(frame.loc[frame["study_id"] == "B", "flag"]) == {DOMINANT_FLAG}
        assert np.isnan(frame.loc[2, "variance_ratio"])

    def test_schema_mismatch(self) -> None:
        """Test that another schema version is refused."""
        from src.errors import SchemaMismatch
        from src.reporting import variance_ratio_frame

        with pytest.raises(SchemaMismatch):
            variance_ratio_frame([self.report("A", {"unadjusted": 1.0}, version=2)])
        with pytest.raises(SchemaMismatch):
            variance_ratio_frame([{"schema_version": 1, "study_id": "A"}])

    def test_load_report(self, tmp_path) -> None:
        """Test reading reports from disk."""
        from src.errors import SchemaMismatch
        from src.reporting import load_report

        good = tmp_path / "a.json"
        good.write_text(json.dumps(self.report("A", {"unadjusted": 1.0})), encoding="utf-8")
        assert load_report(good)["study_id"] == "A"
        bad = tmp_path / "b.json"
        bad.write_text("[1, 2", encoding="utf-8")
        with pytest.raises(SchemaMismatch):
            load_report(bad)
