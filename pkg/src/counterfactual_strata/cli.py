"""CLI エントリポイント。

simulate / truth / analyze / benchmark の 4 サブコマンドを提供する。
終了コード: 0 成功, 2 検証失敗, 3 推定失敗, 4 設定エラー。
"""

import argparse
import dataclasses
import logging
import sys
from collections.abc import Callable
from pathlib import Path
from typing import Any, cast, get_args

from counterfactual_strata.benchmark import run_benchmark
from counterfactual_strata.data import infer_schema, load_csv, validate, write_csv
from counterfactual_strata.errors import (
    DataFormatError,
    EstimationError,
    LearnerError,
    SpecError,
    ValidationFailedError,
)
from counterfactual_strata.estimators import estimate_rr
from counterfactual_strata.learners import LEARNER_NAMES
from counterfactual_strata.models import (
    ESTIMATOR_NAMES,
    AnalysisConfig,
    BenchmarkConfig,
    ContrastResult,
    EstimatorName,
    Loss,
    Misspecification,
    Scenario,
    ScenarioSpec,
    SuperLearnerConfig,
    TruthReport,
)
from counterfactual_strata.report import (
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
from counterfactual_strata.simulator import (
    gformula_exact,
    load_spec,
    sample_observed,
    true_psi,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ESTIMATION = 3
EXIT_CONFIG = 4

CommandHandler = Callable[[argparse.Namespace], int]


def _names(text: str) -> tuple[str, ...]:
    """カンマ区切りの名前リストを分解する。"""
    return tuple(item.strip() for item in text.split(",") if item.strip())


def _bounds(text: str) -> tuple[float, float]:
    """"lo,hi" 形式の打ち切り範囲を解釈する。"""
    parts = _names(text)
    try:
        lo, hi = (float(part) for part in parts)
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"expected lo,hi but got '{text}'") from err
    if not 0.0 < lo < hi < 1.0:
        raise argparse.ArgumentTypeError(f"bounds must satisfy 0 < lo < hi < 1: {text}")
    return lo, hi


def _levels(text: str) -> tuple[int, ...]:
    """曝露水準のリスト (例: "1,0") を解釈する。"""
    try:
        levels = tuple(int(part) for part in _names(text))
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"invalid exposure levels: '{text}'") from err
    if not levels or any(level not in (0, 1) for level in levels):
        raise argparse.ArgumentTypeError(f"exposure levels must be 0 or 1: '{text}'")
    return levels


def _sizes(text: str) -> tuple[int, ...]:
    """クラスタ数のスケジュール (例: "100,200") を解釈する。"""
    try:
        sizes = tuple(int(part) for part in _names(text))
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"invalid cluster counts: '{text}'") from err
    if any(size < 1 for size in sizes):
        raise argparse.ArgumentTypeError(f"cluster counts must be positive: '{text}'")
    return sizes


def _add_estimation_arguments(parser: argparse.ArgumentParser) -> None:
    """analyze と benchmark が共有する推定の引数を追加する。"""
    parser.add_argument(
        "--estimators",
        type=_names,
        default=ESTIMATOR_NAMES,
        help="推定量 cc,ipw,gcomp,tmle のカンマ区切り (デフォルト: 全て)",
    )
    parser.add_argument(
        "--sl-library",
        type=_names,
        default=SuperLearnerConfig().library,
        help=(
            "Super Learner のライブラリ。mean, glm, glm_interactions, hinge_spline, "
            "strata から選ぶ (デフォルト: mean,glm,hinge_spline)"
        ),
    )
    parser.add_argument(
        "--folds",
        type=int,
        default=10,
        help="Super Learner の fold 数 V (デフォルト: 10)",
    )
    parser.add_argument(
        "--loss",
        choices=get_args(Loss),
        default="nll",
        help="メタ学習器の損失 (デフォルト: nll)",
    )
    parser.add_argument(
        "--truncate",
        type=_bounds,
        default=(0.01, 0.99),
        metavar="LO,HI",
        help="g の打ち切り範囲 (デフォルト: 0.01,0.99)",
    )
    parser.add_argument(
        "--seed",
        type=int,
        default=0,
        help="乱数シード (デフォルト: 0)",
    )


def _build_parser() -> argparse.ArgumentParser:
    """CLI パーサーを構築する。"""
    parser = argparse.ArgumentParser(
        prog="counterfactual-strata",
        description=(
            "曝露・結果の欠測とクラスタを伴う研究のための TMLE / IPW /"
            " G-computation と NPSEM シミュレータ"
        ),
    )
    parser.add_argument(
        "-v",
        "--verbose",
        action="store_true",
        help="詳細ログを出力する",
    )

    subparsers = parser.add_subparsers(dest="command", required=True)

    # --- simulate ---
    simulate_parser = subparsers.add_parser(
        "simulate", help="NPSEM spec から観察データ CSV を生成する"
    )
    simulate_parser.add_argument("--spec", required=True, type=Path, help="spec JSON")
    simulate_parser.add_argument(
        "--seed", type=int, default=0, help="乱数シード (デフォルト: 0)"
    )
    simulate_parser.add_argument(
        "--out", required=True, type=Path, help="CSV 出力ファイル"
    )

    # --- truth ---
    truth_parser = subparsers.add_parser(
        "truth", help="反事実の真値と g-formula の値を計算する"
    )
    truth_parser.add_argument("--spec", required=True, type=Path, help="spec JSON")
    truth_parser.add_argument(
        "--levels",
        type=_levels,
        default=(1, 0),
        help="曝露水準のカンマ区切り (デフォルト: 1,0)",
    )
    truth_parser.add_argument(
        "--method",
        choices=("exact", "monte_carlo"),
        default="exact",
        help="計算方法 (デフォルト: exact)",
    )
    truth_parser.add_argument(
        "--draws",
        type=int,
        default=1_000_000,
        help="モンテカルロの行数 (デフォルト: 1000000)",
    )
    truth_parser.add_argument(
        "--seed", type=int, default=0, help="乱数シード (デフォルト: 0)"
    )
    truth_parser.add_argument(
        "--out", type=Path, default=None, help="JSON 出力ファイル"
    )

    # --- analyze ---
    analyze_parser = subparsers.add_parser(
        "analyze", help="CSV データに推定量を適用し RR を推定する"
    )
    analyze_parser.add_argument("--data", required=True, type=Path, help="データ CSV")
    analyze_parser.add_argument(
        "--scenario",
        required=True,
        type=Scenario,
        choices=list(Scenario),
        help="シナリオ S1-S4",
    )
    analyze_parser.add_argument(
        "--adjust-l0",
        type=_names,
        default=None,
        help=(
            "調整する L0 共変量 (デフォルト: l0.* 列すべて)。"
            "データにない列は設定エラー (終了コード 4) で、結果 JSON は書き出さない"
        ),
    )
    analyze_parser.add_argument(
        "--adjust-l1",
        type=_names,
        default=None,
        help=(
            "調整する L1 共変量 (デフォルト: l1.* 列すべて)。"
            "データにない列は設定エラー (終了コード 4) で、結果 JSON は書き出さない"
        ),
    )
    analyze_parser.add_argument(
        "--cluster-col",
        default="cluster_id",
        help="独立単位とする列 (デフォルト: cluster_id)",
    )
    analyze_parser.add_argument(
        "--out", required=True, type=Path, help="結果 JSON 出力ファイル"
    )
    analyze_parser.add_argument(
        "--forest",
        type=Path,
        default=None,
        help="フォレストプロット CSV (デフォルト: <out>.forest.csv)",
    )
    _add_estimation_arguments(analyze_parser)

    # --- benchmark ---
    benchmark_parser = subparsers.add_parser(
        "benchmark", help="シミュレーションで推定量の bias と被覆率を評価する"
    )
    benchmark_parser.add_argument("--spec", required=True, type=Path, help="spec JSON")
    benchmark_parser.add_argument(
        "--reps", type=int, default=100, help="反復数 R (デフォルト: 100)"
    )
    benchmark_parser.add_argument(
        "--sizes",
        type=_sizes,
        default=(),
        help="クラスタ数のスケジュール (デフォルト: spec の値)",
    )
    benchmark_parser.add_argument(
        "--misspecify",
        choices=get_args(Misspecification),
        default="none",
        help="--drop の共変量を除く回帰 (デフォルト: none)",
    )
    benchmark_parser.add_argument(
        "--drop",
        type=_names,
        default=(),
        help="誤特定で除く共変量 (デフォルト: 全共変量)",
    )
    benchmark_parser.add_argument(
        "--workers",
        type=int,
        default=None,
        help="並列反復数 (デフォルト: CPU コア数に応じた値)",
    )
    benchmark_parser.add_argument(
        "--truth",
        type=Path,
        default=None,
        metavar="TRUTH_JSON",
        help="truth サブコマンドの JSON を真値として使う",
    )
    benchmark_parser.add_argument(
        "--truth-draws",
        type=int,
        default=1_000_000,
        help="連続共変量の spec で真値に使うモンテカルロ行数",
    )
    benchmark_parser.add_argument(
        "--out", required=True, type=Path, help="集計 JSON 出力ファイル"
    )
    _add_estimation_arguments(benchmark_parser)

    return parser


def _estimators(names: tuple[str, ...]) -> tuple[EstimatorName, ...]:
    """推定量名を検査する。"""
    unknown = [name for name in names if name not in ESTIMATOR_NAMES]
    if unknown or not names:
        raise SpecError(f"unknown or empty estimator list: {', '.join(unknown)}")
    return cast(tuple[EstimatorName, ...], names)


def _build_sl_config(args: argparse.Namespace) -> SuperLearnerConfig:
    """CLI 引数から SuperLearnerConfig を構築する。"""
    unknown = [name for name in args.sl_library if name not in LEARNER_NAMES]
    if unknown:
        raise SpecError(f"unknown learners: {', '.join(unknown)}")
    try:
        return SuperLearnerConfig(
            folds=args.folds,
            loss=args.loss,
            library=tuple(args.sl_library),
            seed=args.seed,
        )
    except ValueError as err:
        raise SpecError(str(err)) from err


def _build_analysis_config(args: argparse.Namespace, command: str) -> AnalysisConfig:
    """CLI 引数から AnalysisConfig を構築する。"""
    out: Path = args.out
    return AnalysisConfig(
        data_path=args.data,
        scenario=args.scenario,
        output_path=out,
        l0_features=args.adjust_l0 or (),
        l1_features=args.adjust_l1 or (),
        estimators=_estimators(args.estimators),
        sl_config=_build_sl_config(args),
        g_bounds=args.truncate,
        cluster_col=args.cluster_col,
        seed=args.seed,
        forest_path=args.forest or out.with_suffix(".forest.csv"),
        command=command,
    )


def _build_benchmark_config(args: argparse.Namespace, command: str) -> BenchmarkConfig:
    """CLI 引数から BenchmarkConfig を構築する。"""
    if args.drop and args.misspecify == "none":
        raise SpecError("--drop requires --misspecify g, q or both")
    try:
        return BenchmarkConfig(
            spec_path=args.spec,
            output_path=args.out,
            replicates=args.reps,
            cluster_counts=args.sizes,
            estimators=_estimators(args.estimators),
            sl_config=_build_sl_config(args),
            g_bounds=args.truncate,
            misspecify=args.misspecify,
            drop_features=args.drop,
            seed=args.seed,
            max_workers=args.workers,
            truth_draws=args.truth_draws,
            command=command,
        )
    except ValueError as err:
        raise SpecError(str(err)) from err


def _run_simulate(args: argparse.Namespace) -> int:
    """simulate サブコマンドを実行する。"""
    spec = load_spec(args.spec)
    dataset = sample_observed(spec, args.seed)
    write_csv(dataset, args.out)
    report = validate(dataset)
    rates = ", ".join(
        f"{column}=0: {float((dataset.values(column) == 0).mean()):.3f}"
        for column in ("delta_a", "delta_y0", "delta_y1")
        if column in dataset.frame.columns
    )
    print(f"シミュレーション: N={dataset.n}, M={dataset.n_clusters} → {args.out}")
    print(f"欠測割合: {rates}")
    if not report.passed:
        print(format_validation_report(report))
        return EXIT_VALIDATION
    return EXIT_OK


def _run_truth(args: argparse.Namespace) -> int:
    """truth サブコマンドを実行する。"""
    spec = load_spec(args.spec)
    truth: list[TruthReport] = [
        true_psi(spec, a, args.method, args.draws, args.seed) for a in args.levels
    ]
    data: dict[str, Any] = {
        "scenario": str(spec.scenario),
        "method": args.method,
        "truth": [truth_to_dict(report) for report in truth],
    }
    for report in truth:
        print(format_truth_summary(report))
    by_level = {report.a: report.psi for report in truth}
    if 1 in by_level and 0 in by_level and by_level[0] != 0.0:
        data["rr"] = by_level[1] / by_level[0]
        print(f"RR = {data['rr']:.6f}")
    if args.method == "exact":
        gformula = [gformula_exact(spec, a) for a in args.levels]
        data["gformula"] = [truth_to_dict(report) for report in gformula]
        data["identification_gap"] = {
            str(report.a): report.psi - target.psi
            for report, target in zip(gformula, truth, strict=True)
        }
        for report in gformula:
            print(format_truth_summary(report))
    if args.out is not None:
        write_truth(data, args.out)
        print(f"真値を保存しました: {args.out}")
    return EXIT_OK


def _run_analyze(args: argparse.Namespace, command: str) -> int:
    """analyze サブコマンドを実行する。"""
    config = _build_analysis_config(args, command)
    schema = infer_schema(config.data_path, config.scenario)
    dataset = load_csv(config.data_path, config.scenario, schema, config.cluster_col)
    report = validate(dataset)
    if not report.passed:
        print(format_validation_report(report))
        raise ValidationFailedError(f"{config.data_path} failed validation")

    config = dataclasses.replace(
        config,
        l0_features=config.l0_features or tuple(f.name for f in schema.l0),
        l1_features=config.l1_features or tuple(f.name for f in schema.l1),
    )
    spec = ScenarioSpec(
        scenario=config.scenario,
        l0_features=config.l0_features,
        l1_features=config.l1_features,
        g_bounds=config.g_bounds,
    )
    results: list[ContrastResult] = []
    failures: dict[str, str] = {}
    for estimator in config.estimators:
        logger.info("%s を実行します", estimator)
        try:
            results.append(estimate_rr(dataset, spec, config.sl_config, estimator))
        except (EstimationError, LearnerError) as err:
            logger.exception("%s が失敗しました", estimator)
            failures[estimator] = str(err)

    write_analysis(results, failures, config, config.output_path)
    if config.forest_path is not None:
        write_forest_csv(results, config.forest_path)
    print(format_results_table(results))
    print(f"結果を保存しました: {config.output_path}")
    return EXIT_ESTIMATION if failures else EXIT_OK


def _run_benchmark(args: argparse.Namespace, command: str) -> int:
    """benchmark サブコマンドを実行する。"""
    config = _build_benchmark_config(args, command)
    spec = load_spec(config.spec_path)
    truth = read_truth(args.truth) if args.truth is not None else None
    summary = run_benchmark(spec, config, truth)
    write_benchmark(summary, config.output_path)
    print(format_benchmark_summary(summary))
    print(f"ベンチマーク結果を保存しました: {config.output_path}")
    failed = any(score.replicates == 0 for score in summary.scores)
    return EXIT_ESTIMATION if failed else EXIT_OK


def _dispatch(args: argparse.Namespace, command: str) -> int:
    """サブコマンドを実行し、例外を終了コードに変換する。"""
    commands: dict[str, CommandHandler] = {
        "simulate": _run_simulate,
        "truth": _run_truth,
        "analyze": lambda a: _run_analyze(a, command),
        "benchmark": lambda a: _run_benchmark(a, command),
    }
    command_handler = commands[args.command]
    try:
        return command_handler(args)
    except ValidationFailedError as err:
        logger.error("%s", err)
        return EXIT_VALIDATION
    except (EstimationError, LearnerError) as err:
        logger.error("推定に失敗しました: %s", err)
        return EXIT_ESTIMATION
    except (SpecError, DataFormatError, OSError, KeyError) as err:
        logger.error("設定エラー: %s", err)
        return EXIT_CONFIG


def main(argv: list[str] | None = None) -> None:
    """CLI のメインエントリポイント。

    Args:
        argv: コマンドライン引数。None の場合は sys.argv を使用。
    """
    parser = _build_parser()
    raw_args = argv if argv is not None else sys.argv[1:]
    args = parser.parse_args(raw_args)
    command = "counterfactual-strata " + " ".join(
        a.replace("\\", "/") for a in raw_args
    )

    log_level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(
        level=log_level,
        format="%(levelname)s: %(message)s",
    )

    code = _dispatch(args, command)
    if code != EXIT_OK:
        sys.exit(code)
