"""report モジュールのテスト。"""

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from counterfactual_strata.models import (
    AnalysisConfig,
    BenchmarkSummary,
    ContrastResult,
    Diagnostics,
    EffectEstimate,
    EstimatorScore,
    Scenario,
    TruthReport,
    ValidationReport,
)
from counterfactual_strata.report import (
    contrast_to_dict,
    estimate_to_dict,
    format_benchmark_summary,
    format_results_table,
    format_truth_summary,
    format_validation_report,
    read_truth,
    truth_to_dict,
    write_analysis,
    write_benchmark,
    write_forest_csv,
    write_truth,
)


def _estimate(
    point: float, lo: float | None = None, hi: float | None = None
) -> EffectEstimate:
    ic = None if lo is None else np.array([0.1, -0.1])
    return EffectEstimate(
        estimand="psi",
        estimator="tmle",
        point=point,
        influence_curve=ic,
        se=None if lo is None else 0.05,
        ci_lo=lo,
        ci_hi=hi,
        n=120,
        m_clusters=60,
        diagnostics=Diagnostics(g_min=0.2, g_max=0.8, eic_mean={"psi": 1e-12}),
    )


def _contrast(estimator: str, with_ci: bool = True) -> ContrastResult:
    if with_ci:
        return ContrastResult(
            estimator=estimator,
            arm1=_estimate(0.3, 0.25, 0.35),
            arm0=_estimate(0.2, 0.15, 0.25),
            rr=_estimate(1.5, 1.1, 2.05),
            rd=_estimate(0.1, 0.02, 0.18),
        )
    return ContrastResult(
        estimator=estimator,
        arm1=_estimate(0.3),
        arm0=_estimate(0.2),
        rr=_estimate(1.5),
        rd=_estimate(0.1),
    )


def test_estimate_to_dict_omits_influence_curve() -> None:
    """JSON 向けの dict には影響曲線を含めない。"""
    data = estimate_to_dict(_estimate(0.3, 0.25, 0.35))
    assert "influence_curve" not in data
    assert data["point"] == 0.3
    assert data["m_clusters"] == 60
    assert data["diagnostics"]["g_min"] == 0.2
    json.dumps(data)


def test_contrast_to_dict() -> None:
    """対比は arm1, arm0, rr, rd, odds_ratio を持つ。"""
    data = contrast_to_dict(_contrast("ipw"))
    assert data["estimator"] == "ipw"
    assert data["rr"]["ci_hi"] == 2.05
    assert data["odds_ratio"] is None


def test_write_analysis(tmp_path: Path) -> None:
    """解析結果の JSON には設定・結果・失敗が入る。"""
    config = AnalysisConfig(
        data_path=Path("data/study.csv"),
        scenario=Scenario.S4,
        output_path=tmp_path / "out" / "result.json",
        command="counterfactual-strata analyze --data data/study.csv",
    )
    write_analysis(
        [_contrast("tmle")], {"ipw": "ipw: empty stratum"}, config, config.output_path
    )

    data = json.loads(config.output_path.read_text(encoding="utf-8"))
    assert data["scenario"] == "S4"
    assert data["data"] == "data/study.csv"
    assert data["command"].startswith("counterfactual-strata analyze")
    assert data["failures"] == {"ipw": "ipw: empty stratum"}
    assert data["l0_features"] == []
    assert data["super_learner"]["library"] == ["mean", "glm", "hinge_spline"]
    assert len(data["results"]) == 1


def test_format_results_table() -> None:
    """表には推定量ごとの RR と区間が並ぶ。"""
    table = format_results_table([_contrast("tmle"), _contrast("gcomp", False)])
    lines = table.splitlines()
    assert lines[0].startswith("推定量")
    assert "1.500 (1.100-2.050)" in lines[1]
    assert lines[2].startswith("gcomp")
    assert "(" not in lines[2]


def test_write_forest_csv(tmp_path: Path) -> None:
    """フォレストプロット CSV は label, rr, lo, hi。CI のない行は空。"""
    path = tmp_path / "forest.csv"
    write_forest_csv([_contrast("tmle"), _contrast("gcomp", False)], path)

    frame = pd.read_csv(path)
    assert list(frame.columns) == ["label", "rr", "lo", "hi"]
    assert frame.loc[0, "hi"] == pytest.approx(2.05)
    assert pd.isna(frame.loc[1, "lo"])


def test_truth_round_trip(tmp_path: Path) -> None:
    """truth の JSON から TruthReport を読み戻せる。"""
    reports = [
        TruthReport(Scenario.S4, 1, "exact", "counterfactual", 0.4, 0.3, 0.75, 0.4),
        TruthReport(Scenario.S4, 0, "exact", "counterfactual", 0.25, 0.2, 0.8, 0.25),
    ]
    path = tmp_path / "truth.json"
    write_truth({"truth": [truth_to_dict(r) for r in reports]}, path)

    assert read_truth(path) == reports


def test_read_truth_missing_key(tmp_path: Path) -> None:
    """truth リストがなければ KeyError。"""
    path = tmp_path / "truth.json"
    path.write_text("{}", encoding="utf-8")
    with pytest.raises(KeyError):
        read_truth(path)


def test_format_truth_summary() -> None:
    """S4 の真値には分子と分母を添える。"""
    report = TruthReport(
        scenario=Scenario.S4,
        a=1,
        method="monte_carlo",
        kind="counterfactual",
        psi=0.4,
        numerator=0.3,
        denominator=0.75,
        conditional=0.4,
        mc_se={"conditional": 0.001},
    )
    line = format_truth_summary(report)
    assert line.startswith("a=1 counterfactual (monte_carlo): ψ=0.400000")
    assert "分子 0.300000" in line
    assert "MC SE 0.001" in line


def test_write_benchmark(tmp_path: Path) -> None:
    """ベンチマーク結果の JSON とサマリー。"""
    truth = [
        TruthReport(Scenario.S1, 1, "exact", "counterfactual", 0.4),
        TruthReport(Scenario.S1, 0, "exact", "counterfactual", 0.2),
    ]
    score = EstimatorScore(
        estimator="tmle",
        n_clusters=200,
        replicates=50,
        truth_rr=2.0,
        mean_rr=2.05,
        bias=0.05,
        variance=0.04,
        mse=0.0425,
        mc_se_bias=0.028,
        coverage=0.94,
        failures=[3],
    )
    summary = BenchmarkSummary(Scenario.S1, 50, truth, [score], seed=7)
    path = tmp_path / "bench.json"
    write_benchmark(summary, path)

    data = json.loads(path.read_text(encoding="utf-8"))
    assert data["scenario"] == "S1"
    assert data["truth"][0]["scenario"] == "S1"
    assert data["scores"][0]["coverage"] == 0.94
    assert data["scores"][0]["failures"] == [3]

    text = format_benchmark_summary(summary)
    assert "tmle (M=200): bias +0.0500" in text
    assert "coverage 0.940" in text
    assert "失敗 1" in text


def test_format_validation_report() -> None:
    """違反のあるルールだけを先頭の行番号とともに並べる。"""
    report = ValidationReport(
        counts={"delta_a_consistency": 2, "cluster_missing": 0},
        first_rows={"delta_a_consistency": [3, 9], "cluster_missing": []},
    )
    text = format_validation_report(report)
    assert "delta_a_consistency: 2 件 (先頭の行: 3, 9)" in text
    assert "cluster_missing" not in text
