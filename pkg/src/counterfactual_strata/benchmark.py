"""シミュレーションによる推定量のベンチマーク。

反復ごとに sample_observed → estimate_rr を実行し、シミュレータの真値と比べて
bias, 分散, MSE, CI の被覆率を集計する。反復 r のシードは (seed, r) から導く。
"""

import dataclasses
import functools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from counterfactual_strata.errors import CounterfactualStrataError
from counterfactual_strata.estimators import estimate_rr
from counterfactual_strata.inference import wald_ci
from counterfactual_strata.models import (
    BenchmarkConfig,
    BenchmarkSummary,
    ContrastResult,
    EstimatorName,
    EstimatorScore,
    ScenarioSpec,
    TruthReport,
)
from counterfactual_strata.simulator import NpsemSpec, sample_observed, true_psi

logger = logging.getLogger(__name__)


def replicate_seed(seed: int, replicate: int) -> int:
    """(seed, 反復番号) から反復のシードを導く。"""
    return int(np.random.SeedSequence([seed, replicate]).generate_state(1)[0])


def compute_truth(spec: NpsemSpec, config: BenchmarkConfig) -> list[TruthReport]:
    """a=1, a=0 の反事実の真値。離散 spec は厳密、そうでなければモンテカルロ。"""
    if spec.discrete_exact:
        return [true_psi(spec, a, "exact") for a in (1, 0)]
    return [
        true_psi(spec, a, "monte_carlo", config.truth_draws, config.seed)
        for a in (1, 0)
    ]


def scenario_spec(spec: NpsemSpec, config: BenchmarkConfig) -> ScenarioSpec:
    """誤特定スイッチを反映した推定対象。

    drop_features が空で誤特定を指定した場合は、該当する回帰を切片のみにする。
    """
    schema = spec.schema
    l0 = tuple(f.name for f in schema.l0)
    l1 = tuple(f.name for f in schema.l1)
    dropped = config.drop_features or l0 + l1
    g_exclude = dropped if config.misspecify in ("g", "both") else ()
    q_exclude = dropped if config.misspecify in ("q", "both") else ()
    return ScenarioSpec(
        scenario=spec.scenario,
        l0_features=l0,
        l1_features=l1,
        g_bounds=config.g_bounds,
        g_exclude=g_exclude,
        q_exclude=q_exclude,
    )


@dataclass
class ReplicateResult:
    """1 反復の推定量ごとの結果。"""

    index: int
    results: dict[str, ContrastResult] = field(default_factory=lambda: {})
    failures: dict[str, str] = field(default_factory=lambda: {})


def run_replicate(
    spec: NpsemSpec,
    estimand: ScenarioSpec,
    config: BenchmarkConfig,
    index: int,
) -> ReplicateResult:
    """1 反復を実行する。推定量の失敗は記録して続行する。"""
    dataset = sample_observed(spec, replicate_seed(config.seed, index))
    outcome = ReplicateResult(index)
    for estimator in config.estimators:
        try:
            outcome.results[estimator] = estimate_rr(
                dataset, estimand, config.sl_config, estimator
            )
        except CounterfactualStrataError as err:
            logger.exception("反復 %d の %s が失敗しました", index, estimator)
            outcome.failures[estimator] = str(err)
    return outcome


def _rr_interval(result: ContrastResult) -> tuple[float, float] | None:
    if result.rr.ci_lo is None or result.rr.ci_hi is None:
        return None
    return result.rr.ci_lo, result.rr.ci_hi


def _iid_covered(result: ContrastResult, truth_rr: float) -> bool | None:
    """参加者を独立とみなした SE による log RR の区間が真値を含むか。"""
    ic = result.rr.influence_curve
    if ic is None or len(ic) < 2:
        return None
    se = float(np.std(ic, ddof=1) / math.sqrt(len(ic)))
    lo, hi = wald_ci(math.log(result.rr.point), se)
    return lo <= math.log(truth_rr) <= hi


def score_estimator(
    estimator: EstimatorName,
    n_clusters: int,
    replicates: list[ReplicateResult],
    truth: list[TruthReport],
) -> EstimatorScore:
    """推定量 1 つの結果を集計する。

    Args:
        estimator: 推定量名。
        n_clusters: クラスタ数。
        replicates: 反復結果 (反復番号順)。
        truth: a=1, a=0 の真値。

    Returns:
        EstimatorScore。成功した反復がない場合の統計量は NaN。
    """
    psi1, psi0 = truth[0].psi, truth[1].psi
    truth_rr = psi1 / psi0
    results = [r.results[estimator] for r in replicates if estimator in r.results]
    failures = [r.index for r in replicates if estimator in r.failures]
    if not results:
        nan = float("nan")
        return EstimatorScore(
            estimator=estimator,
            n_clusters=n_clusters,
            replicates=0,
            truth_rr=truth_rr,
            mean_rr=nan,
            bias=nan,
            variance=nan,
            mse=nan,
            mc_se_bias=nan,
            failures=failures,
        )

    rr = np.array([r.rr.point for r in results])
    errors = rr - truth_rr
    variance = float(np.var(rr, ddof=1)) if len(rr) > 1 else 0.0
    score = EstimatorScore(
        estimator=estimator,
        n_clusters=n_clusters,
        replicates=len(results),
        truth_rr=truth_rr,
        mean_rr=float(np.mean(rr)),
        bias=float(np.mean(errors)),
        variance=variance,
        mse=float(np.mean(errors**2)),
        mc_se_bias=math.sqrt(variance / len(rr)),
        arm_bias={
            "arm1": float(np.mean([r.arm1.point for r in results]) - psi1),
            "arm0": float(np.mean([r.arm0.point for r in results]) - psi0),
        },
        failures=failures,
    )
    intervals = [i for i in map(_rr_interval, results) if i is not None]
    if intervals:
        covered = [lo <= truth_rr <= hi for lo, hi in intervals]
        score.coverage = float(np.mean(covered))
        score.mean_ci_width = float(np.mean([hi - lo for lo, hi in intervals]))
        iid = [_iid_covered(r, truth_rr) for r in results]
        score.coverage_iid = float(np.mean([c for c in iid if c is not None]))
    eic = [
        abs(value)
        for r in results
        for arm in (r.arm1, r.arm0)
        for value in arm.diagnostics.eic_mean.values()
    ]
    if eic:
        score.max_abs_eic_mean = float(max(eic))
    return score


def run_benchmark(
    spec: NpsemSpec,
    config: BenchmarkConfig,
    truth: list[TruthReport] | None = None,
) -> BenchmarkSummary:
    """ベンチマークを実行する。

    クラスタ数のスケジュール (空なら spec の値) ごとに R 反復を
    ThreadPoolExecutor で並列に実行し、反復番号順に集計する。

    Args:
        spec: NPSEM spec。
        config: ベンチマーク設定。
        truth: a=1, a=0 の真値。None ならシミュレータから計算する。

    Returns:
        BenchmarkSummary。
    """
    if truth is None:
        truth = compute_truth(spec, config)
    estimand = scenario_spec(spec, config)
    summary = BenchmarkSummary(
        scenario=spec.scenario,
        replicates=config.replicates,
        truth=truth,
        misspecify=config.misspecify,
        drop_features=list(config.drop_features),
        seed=config.seed,
        command=config.command,
    )
    schedule = config.cluster_counts or (spec.clusters.n_clusters,)
    for n_clusters in schedule:
        sized = dataclasses.replace(
            spec, clusters=dataclasses.replace(spec.clusters, n_clusters=n_clusters)
        )
        logger.info("M=%d で %d 反復を実行します", n_clusters, config.replicates)
        with ThreadPoolExecutor(max_workers=config.max_workers) as executor:
            replicates = list(
                executor.map(
                    functools.partial(run_replicate, sized, estimand, config),
                    range(config.replicates),
                )
            )
        for estimator in config.estimators:
            summary.scores.append(
                score_estimator(estimator, n_clusters, replicates, truth)
            )
    return summary
