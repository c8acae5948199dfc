"""推定結果・真値・ベンチマークのフォーマットとファイル出力。"""

import dataclasses
import json
from pathlib import Path
from typing import Any

import pandas as pd

from counterfactual_strata.models import (
    AnalysisConfig,
    BenchmarkSummary,
    ContrastResult,
    EffectEstimate,
    Scenario,
    TruthReport,
    ValidationReport,
)


def estimate_to_dict(estimate: EffectEstimate) -> dict[str, Any]:
    """EffectEstimate を JSON 向けの dict に変換する (影響曲線は含めない)。

    Args:
        estimate: 推定結果。

    Returns:
        estimand, point, se, ci_lo, ci_hi, n, m_clusters, diagnostics, components
        を持つ dict。
    """
    return {
        "estimand": estimate.estimand,
        "estimator": estimate.estimator,
        "point": estimate.point,
        "se": estimate.se,
        "ci_lo": estimate.ci_lo,
        "ci_hi": estimate.ci_hi,
        "n": estimate.n,
        "m_clusters": estimate.m_clusters,
        "diagnostics": dataclasses.asdict(estimate.diagnostics),
        "components": {
            name: estimate_to_dict(component)
            for name, component in estimate.components.items()
        },
    }


def contrast_to_dict(result: ContrastResult) -> dict[str, Any]:
    """ContrastResult を dict に変換する。"""
    return {
        "estimator": result.estimator,
        "arm1": estimate_to_dict(result.arm1),
        "arm0": estimate_to_dict(result.arm0),
        "rr": estimate_to_dict(result.rr),
        "rd": estimate_to_dict(result.rd),
        "odds_ratio": None
        if result.odds_ratio is None
        else estimate_to_dict(result.odds_ratio),
    }


def _write_json(data: object, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(data, ensure_ascii=False, indent=2) + "\n",
        encoding="utf-8",
    )


def write_analysis(
    results: list[ContrastResult],
    failures: dict[str, str],
    config: AnalysisConfig,
    path: Path,
) -> None:
    """analyze の結果を JSON ファイルに出力する。

    Args:
        results: 推定量ごとの対比。
        failures: 失敗した推定量 → エラーメッセージ。
        config: 解析設定。
        path: 出力先ファイルパス。
    """
    data = {
        "command": config.command,
        "data": config.data_path.as_posix(),
        "scenario": str(config.scenario),
        "cluster_col": config.cluster_col,
        "l0_features": list(config.l0_features),
        "l1_features": list(config.l1_features),
        "g_bounds": list(config.g_bounds),
        "super_learner": dataclasses.asdict(config.sl_config),
        "results": [contrast_to_dict(result) for result in results],
        "failures": failures,
    }
    _write_json(data, path)


def _interval(estimate: EffectEstimate) -> str:
    if estimate.ci_lo is None or estimate.ci_hi is None:
        return f"{estimate.point:.3f}"
    return f"{estimate.point:.3f} ({estimate.ci_lo:.3f}-{estimate.ci_hi:.3f})"


def format_results_table(results: list[ContrastResult]) -> str:
    """推定量ごとに RR と各曝露水準の推定値を並べた表を作る。

    Args:
        results: 推定量ごとの対比。

    Returns:
        列を揃えたテキスト表。
    """
    header = ("推定量", "RR (95% CI)", "ψ1 (95% CI)", "ψ0 (95% CI)", "M")
    rows = [
        (
            result.estimator,
            _interval(result.rr),
            _interval(result.arm1),
            _interval(result.arm0),
            str(result.rr.m_clusters),
        )
        for result in results
    ]
    widths = [max(len(row[i]) for row in [header, *rows]) for i in range(len(header))]
    lines = [
        "  ".join(cell.ljust(width) for cell, width in zip(row, widths, strict=True))
        for row in [header, *rows]
    ]
    return "\n".join(line.rstrip() for line in lines)


def write_forest_csv(results: list[ContrastResult], path: Path) -> None:
    """フォレストプロット用の CSV (label, rr, lo, hi) を出力する。

    CI のない推定量 (G-computation) は lo, hi が空になる。
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        {
            "label": [result.estimator for result in results],
            "rr": [result.rr.point for result in results],
            "lo": [result.rr.ci_lo for result in results],
            "hi": [result.rr.ci_hi for result in results],
        }
    )
    frame.to_csv(path, index=False, lineterminator="\n")


def truth_to_dict(report: TruthReport) -> dict[str, Any]:
    """TruthReport を dict に変換する。"""
    data = dataclasses.asdict(report)
    data["scenario"] = str(report.scenario)
    return data


def write_truth(data: dict[str, Any], path: Path) -> None:
    """truth サブコマンドの結果を JSON ファイルに出力する。"""
    _write_json(data, path)


def read_truth(path: Path) -> list[TruthReport]:
    """truth サブコマンドの JSON から反事実の真値を読み込む。

    Args:
        path: truth サブコマンドが出力した JSON ファイルのパス。

    Returns:
        曝露水準ごとの TruthReport (kind="counterfactual")。

    Raises:
        OSError: ファイルの読み取りに失敗した場合。
        json.JSONDecodeError: JSON のパースに失敗した場合。
        KeyError: 必須フィールドが存在しない場合。
    """
    data = json.loads(path.read_text(encoding="utf-8"))
    reports: list[TruthReport] = []
    for item in data["truth"]:
        fields = dict(item)
        fields["scenario"] = Scenario(fields["scenario"])
        reports.append(TruthReport(**fields))
    return reports


def format_truth_summary(report: TruthReport) -> str:
    """TruthReport を 1 行にまとめる。"""
    line = f"a={report.a} {report.kind} ({report.method}): ψ={report.psi:.6f}"
    if report.numerator is not None and report.denominator is not None:
        line += f" [分子 {report.numerator:.6f}, 分母 {report.denominator:.6f}]"
    if report.mc_se:
        line += f" MC SE {max(report.mc_se.values()):.2g}"
    return line


def write_benchmark(summary: BenchmarkSummary, path: Path) -> None:
    """ベンチマーク結果を JSON ファイルに出力する。"""
    data = dataclasses.asdict(summary)
    data["scenario"] = str(summary.scenario)
    data["truth"] = [truth_to_dict(report) for report in summary.truth]
    _write_json(data, path)


def format_benchmark_summary(summary: BenchmarkSummary) -> str:
    """ベンチマーク結果を推定量ごとの行にまとめる。"""
    lines: list[str] = []
    for score in summary.scores:
        coverage = "-" if score.coverage is None else f"{score.coverage:.3f}"
        lines.append(
            f"{score.estimator} (M={score.n_clusters}): bias {score.bias:+.4f}"
            f" (MC SE {score.mc_se_bias:.4f}), MSE {score.mse:.4f},"
            f" coverage {coverage}, {score.replicates} 反復,"
            f" 失敗 {len(score.failures)}"
        )
    return "\n".join(lines)


def format_validation_report(report: ValidationReport) -> str:
    """違反のあったルールを 1 行ずつ並べる。"""
    lines = ["検証に失敗しました:"]
    for rule, count in report.counts.items():
        if count == 0:
            continue
        rows = ", ".join(str(row) for row in report.first_rows.get(rule, []))
        lines.append(f"  {rule}: {count} 件 (先頭の行: {rows})")
    return "\n".join(lines)
