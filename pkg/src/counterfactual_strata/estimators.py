"""推定量: complete-case, IPW, 逐次 G-computation, 逐次回帰 TMLE。

シナリオごとの推定対象は反復条件付き期待値で、Q-factor は内側から順に当てはめる。
S4 は分子 P(Y1*=1, Y0*=0) と分母 1 - P(Y0*=1) を別々に推定し比をとる。

部分集団 (曝露水準 a):
    treated   Δ_A=1, A=a
    baseline  treated かつ Δ_Y0=1 (S4 以外は treated)
    at_risk   baseline かつ Y0=0 (S4 以外は treated)
    measured  at_risk かつ Δ_Y1=1
"""

import dataclasses
import logging
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, Protocol

import numpy as np
import numpy.typing as npt
from scipy.special import expit, logit

from counterfactual_strata.data import Dataset, design_matrix
from counterfactual_strata.errors import EstimationError, FluctuationError, SpecError
from counterfactual_strata.inference import (
    LinearEstimate,
    delta_method_difference,
    delta_method_log,
    delta_method_logit,
    delta_method_ratio,
    summarize_ic,
)
from counterfactual_strata.learners import (
    RegressionTask,
    clamp,
    fit_logistic_glm,
    irls,
    superlearner_fit,
)
from counterfactual_strata.models import (
    ContrastResult,
    Diagnostics,
    EffectEstimate,
    EstimatorName,
    FactorDiagnostics,
    FloatArray,
    Scenario,
    ScenarioSpec,
    SuperLearnerConfig,
)

logger = logging.getLogger(__name__)

FLUCTUATION_TOL = 1e-10

BoolArray = npt.NDArray[np.bool_]
Role = Literal["g", "Q", "both"]


class Regressor(Protocol):
    """予測だけを提供する当てはめ済みモデル。"""

    def predict(self, design: FloatArray) -> FloatArray: ...


@dataclass(frozen=True)
class Strata:
    """曝露水準 a の入れ子の部分集団。"""

    treated: BoolArray
    baseline: BoolArray
    at_risk: BoolArray
    measured: BoolArray


def strata(dataset: Dataset, a: int) -> Strata:
    """データセットから部分集団のマスクを作る。"""
    treated = dataset.equals("delta_a", 1) & dataset.equals("a", a)
    if not dataset.scenario.has_baseline_outcome:
        measured = treated & dataset.equals("delta_y1", 1)
        return Strata(treated, treated, treated, measured)
    baseline = treated & dataset.equals("delta_y0", 1)
    at_risk = baseline & dataset.equals("y0", 0)
    return Strata(treated, baseline, at_risk, at_risk & dataset.equals("delta_y1", 1))


@dataclass(frozen=True)
class GFactor:
    """g-factor 1 つ。raw は打ち切り前、values は打ち切り後 (定義域外は NaN)。"""

    name: str
    rows: BoolArray
    raw: FloatArray
    values: FloatArray
    constant: bool
    diagnostics: FactorDiagnostics


@dataclass(frozen=True)
class LevelPlan:
    """逐次回帰の 1 段。

    fit_rows で当てはめ、predict_rows で予測する。outcome が None の段は
    1 つ内側の段の予測値を結果とし、zero_rows の行は結果を 0 とする。
    """

    name: str
    fit_rows: BoolArray
    predict_rows: BoolArray
    features: tuple[str, ...]
    chain: tuple[str, ...]
    outcome: str | None = None
    zero_rows: BoolArray | None = None


@dataclass(frozen=True)
class QFactor:
    """当てはめ済みの Q-factor 1 段 (長さ N、範囲外は NaN)。"""

    component: str
    level: str
    fit_rows: BoolArray
    outcome: FloatArray
    prediction: FloatArray
    chain: tuple[str, ...]
    epsilon: float | None = None


@dataclass
class NuisanceEstimates:
    """g-factor と Q-factor の当てはめ結果。"""

    spec: ScenarioSpec
    g: dict[str, GFactor] = field(default_factory=lambda: {})
    q: dict[str, tuple[QFactor, ...]] = field(default_factory=lambda: {})

    def cumulative_g(self, chain: tuple[str, ...]) -> FloatArray:
        """chain の g-factor (打ち切り後) の積。"""
        n = len(next(iter(self.g.values())).values)
        product = np.ones(n)
        for name in chain:
            product = product * self.g[name].values
        return product

    def diagnostics(self) -> Diagnostics:
        """正値性の診断をまとめる。"""
        factors = {name: factor.diagnostics for name, factor in self.g.items()}
        fitted = [d for d in factors.values() if not d.constant]
        return Diagnostics(
            g_min=min((d.g_min for d in fitted), default=None),
            g_max=max((d.g_max for d in fitted), default=None),
            n_truncated=sum(d.n_truncated for d in fitted),
            factors=factors,
        )


@dataclass(frozen=True)
class _Context:
    dataset: Dataset
    spec: ScenarioSpec
    strata: Strata

    def g_features(self, include_l1: bool = False) -> tuple[str, ...]:
        names = self.spec.l0_features + (self.spec.l1_features if include_l1 else ())
        return tuple(f for f in names if f not in self.spec.g_exclude)

    def q_features(self, include_l1: bool = False) -> tuple[str, ...]:
        names = self.spec.l0_features + (self.spec.l1_features if include_l1 else ())
        return tuple(f for f in names if f not in self.spec.q_exclude)


def _context(dataset: Dataset, spec: ScenarioSpec) -> _Context:
    if dataset.scenario is not spec.scenario:
        raise SpecError(
            f"dataset is {dataset.scenario} but the estimand is {spec.scenario}"
        )
    declared = {feature.name for feature in dataset.schema.l0}
    unknown = [f for f in spec.l0_features if f not in declared]
    if spec.scenario.has_l1:
        declared_l1 = {feature.name for feature in dataset.schema.l1}
        unknown += [f for f in spec.l1_features if f not in declared_l1]
    elif spec.l1_features:
        raise SpecError(f"{spec.scenario} has no L1 covariates")
    if unknown:
        raise SpecError(f"unknown adjustment features: {', '.join(unknown)}")
    return _Context(dataset, spec, strata(dataset, spec.a))


def _fit(
    ctx: _Context,
    name: str,
    rows: BoolArray,
    outcome: FloatArray,
    features: tuple[str, ...],
    sl_config: SuperLearnerConfig,
    glm_only: bool,
) -> tuple[Regressor, FloatArray]:
    """rows 上で回帰を当てはめ、設計行列とともに返す。"""
    if not np.any(rows):
        raise EstimationError(f"empty fitting subpopulation for '{name}'")
    design = design_matrix(ctx.dataset, features)
    if np.isnan(design[rows]).any():
        raise EstimationError(
            f"missing adjustment values in fitting subpopulation for '{name}'"
        )
    task = RegressionTask.unweighted(
        design[rows], outcome[rows], ctx.dataset.cluster_ids[rows]
    )
    if glm_only:
        return fit_logistic_glm(task), design
    return superlearner_fit(task, sl_config), design


def _fit_g_factor(
    ctx: _Context,
    name: str,
    rows: BoolArray,
    features: tuple[str, ...],
    sl_config: SuperLearnerConfig,
    glm_only: bool,
    complement: bool = False,
    measurement: bool = True,
) -> GFactor:
    """g-factor を rows 上で当てはめ、rows 上の予測を打ち切る。"""
    observed = ctx.dataset.values(name)
    n = ctx.dataset.n
    raw = np.full(n, np.nan)
    values = np.full(n, np.nan)
    if measurement and np.any(rows) and np.all(observed[rows] == 1.0):
        raw[rows] = 1.0
        values[rows] = 1.0
        logger.debug("g-factor %s は定数 1 です", name)
        diagnostics = FactorDiagnostics(1.0, 1.0, 0, True)
        return GFactor(name, rows, raw, values, True, diagnostics)

    model, design = _fit(
        ctx, f"g:{name}", rows, observed, features, sl_config, glm_only
    )
    p = model.predict(design[rows])
    if complement:
        p = 1.0 - p
    lo, hi = ctx.spec.g_bounds
    truncated = int(np.sum((p < lo) | (p > hi)))
    raw[rows] = p
    values[rows] = np.clip(p, lo, hi)
    if truncated:
        logger.warning("g-factor %s: %d 件の予測値を打ち切りました", name, truncated)
    diagnostics = FactorDiagnostics(float(np.min(p)), float(np.max(p)), truncated)
    return GFactor(name, rows, raw, values, False, diagnostics)


def _fit_g(
    ctx: _Context, sl_config: SuperLearnerConfig, glm_only: bool
) -> dict[str, GFactor]:
    dataset = ctx.dataset
    every = np.ones(dataset.n, dtype=bool)
    l0 = ctx.g_features()
    factors = {
        "delta_a": _fit_g_factor(ctx, "delta_a", every, l0, sl_config, glm_only),
        "a": _fit_g_factor(
            ctx,
            "a",
            dataset.equals("delta_a", 1),
            l0,
            sl_config,
            glm_only,
            complement=ctx.spec.a == 0,
            measurement=False,
        ),
    }
    if dataset.scenario.has_baseline_outcome:
        factors["delta_y0"] = _fit_g_factor(
            ctx, "delta_y0", ctx.strata.treated, l0, sl_config, glm_only
        )
    factors["delta_y1"] = _fit_g_factor(
        ctx,
        "delta_y1",
        ctx.strata.at_risk,
        ctx.g_features(include_l1=dataset.scenario.has_l1),
        sl_config,
        glm_only,
    )
    return factors


def _plans(ctx: _Context) -> dict[str, tuple[LevelPlan, ...]]:
    """シナリオの成分ごとの逐次回帰 (内側から順)。"""
    s = ctx.strata
    scenario = ctx.dataset.scenario
    every = np.ones(ctx.dataset.n, dtype=bool)
    l0 = ctx.q_features()
    outer_chain: tuple[str, ...] = ("delta_a", "a")
    if scenario.has_baseline_outcome:
        outer_chain += ("delta_y0",)
    inner_chain = outer_chain + ("delta_y1",)
    if scenario in (Scenario.S1, Scenario.S2):
        return {
            "psi": (LevelPlan("outcome", s.measured, every, l0, inner_chain, "y1"),)
        }

    inner = LevelPlan(
        "inner", s.measured, s.at_risk, ctx.q_features(True), inner_chain, "y1"
    )
    zero_rows = ctx.dataset.equals("y0", 1) if scenario.has_baseline_outcome else None
    outer = LevelPlan("outer", s.baseline, every, l0, outer_chain, zero_rows=zero_rows)
    if scenario is Scenario.S3:
        return {"psi": (inner, outer)}
    prevalence = LevelPlan("outcome", s.baseline, every, l0, outer_chain, "y0")
    return {"numerator": (inner, outer), "prevalence": (prevalence,)}


def _fluctuate(
    prediction: FloatArray, outcome: FloatArray, weights: FloatArray, level: str
) -> float:
    """重み付き切片のみのロジスティック回帰 (オフセット logit Q) で ε を求める。

    Raises:
        FluctuationError: IRLS が収束しない場合。
    """
    scaled = weights / np.mean(weights)
    try:
        result = irls(
            np.ones((len(outcome), 1)),
            outcome,
            scaled,
            offset=logit(prediction),
            tol=FLUCTUATION_TOL,
        )
    except np.linalg.LinAlgError as err:
        raise FluctuationError(level) from err
    if not result.converged:
        raise FluctuationError(level)
    return float(result.coefficients[0])


def _run_component(
    ctx: _Context,
    component: str,
    plans: tuple[LevelPlan, ...],
    sl_config: SuperLearnerConfig,
    nuisances: NuisanceEstimates | None,
) -> tuple[QFactor, ...]:
    """逐次回帰を内側から実行する。nuisances があれば各段でターゲティングする。"""
    n = ctx.dataset.n
    previous = np.full(n, np.nan)
    levels: list[QFactor] = []
    for plan in plans:
        if plan.outcome is not None:
            outcome = ctx.dataset.values(plan.outcome)
        else:
            outcome = previous.copy()
        if plan.zero_rows is not None:
            outcome = np.where(plan.zero_rows, 0.0, outcome)
        label = f"{component}.{plan.name}"
        model, design = _fit(
            ctx,
            f"Q:{label}",
            plan.fit_rows,
            outcome,
            plan.features,
            sl_config,
            glm_only=False,
        )
        prediction = np.full(n, np.nan)
        prediction[plan.predict_rows] = model.predict(design[plan.predict_rows])
        epsilon = None
        if nuisances is not None:
            weights = 1.0 / nuisances.cumulative_g(plan.chain)[plan.fit_rows]
            epsilon = _fluctuate(
                prediction[plan.fit_rows], outcome[plan.fit_rows], weights, label
            )
            logger.debug("%s: ε = %.3g", label, epsilon)
            prediction[plan.predict_rows] = clamp(
                expit(logit(prediction[plan.predict_rows]) + epsilon)
            )
        levels.append(
            QFactor(
                component,
                plan.name,
                plan.fit_rows,
                outcome,
                prediction,
                plan.chain,
                epsilon,
            )
        )
        previous = prediction
    return tuple(levels)


def fit_nuisances(
    dataset: Dataset,
    spec: ScenarioSpec,
    sl_config: SuperLearnerConfig,
    role: Role = "both",
    glm_only: bool = False,
) -> NuisanceEstimates:
    """g-factor と (ターゲティング前の) Q-factor を当てはめる。

    g-factor はそれぞれの定義部分集団上の Super Learner (glm_only なら主効果
    ロジスティック回帰)。測定指標が部分集団で常に 1 なら定数 1 とする。
    Q-factor は内側から逐次に当てはめる。S4 分子の外側の段では
    Y0=1 の行の結果を 0 とする。

    Args:
        dataset: 観察データ。
        spec: 推定対象。
        sl_config: Super Learner 設定。
        role: "g", "Q" または "both"。
        glm_only: g-factor を主効果 GLM で当てはめるか。

    Returns:
        NuisanceEstimates。

    Raises:
        EstimationError: 当てはめる部分集団が空の場合 (どの factor かを含む)。
        SpecError: 調整共変量がデータにない場合。
    """
    ctx = _context(dataset, spec)
    nuisances = NuisanceEstimates(spec)
    if role in ("g", "both"):
        nuisances.g = _fit_g(ctx, sl_config, glm_only)
    if role in ("Q", "both"):
        for component, plans in _plans(ctx).items():
            nuisances.q[component] = _run_component(
                ctx, component, plans, sl_config, None
            )
    return nuisances


def _estimand(scenario: Scenario) -> str:
    return "conditional" if scenario.has_baseline_outcome else "psi"


def _summarized(
    dataset: Dataset,
    estimand: str,
    estimator: str,
    point: float,
    ic: FloatArray,
    diagnostics: Diagnostics | None = None,
    components: dict[str, EffectEstimate] | None = None,
) -> EffectEstimate:
    """影響曲線からクラスタ頑健 SE と CI を付けた EffectEstimate を作る。"""
    try:
        summary = summarize_ic(point, ic, dataset.cluster_ids)
    except ValueError as err:
        raise EstimationError(f"{estimator}: {err}") from err
    return EffectEstimate(
        estimand=estimand,
        estimator=estimator,
        point=point,
        influence_curve=ic,
        se=summary.se,
        ci_lo=summary.ci_lo,
        ci_hi=summary.ci_hi,
        n=dataset.n,
        m_clusters=summary.m_clusters,
        diagnostics=diagnostics or Diagnostics(),
        components=components or {},
    )


def _point_only(
    dataset: Dataset,
    estimand: str,
    estimator: str,
    point: float,
    diagnostics: Diagnostics | None = None,
    components: dict[str, EffectEstimate] | None = None,
) -> EffectEstimate:
    return EffectEstimate(
        estimand=estimand,
        estimator=estimator,
        point=point,
        influence_curve=None,
        se=None,
        ci_lo=None,
        ci_hi=None,
        n=dataset.n,
        m_clusters=dataset.n_clusters,
        diagnostics=diagnostics or Diagnostics(),
        components=components or {},
    )


def _ratio_estimate(
    dataset: Dataset,
    estimator: str,
    numerator: LinearEstimate,
    denominator: LinearEstimate,
    diagnostics: Diagnostics,
) -> EffectEstimate:
    """S4 の分子・分母から条件付き推定値 (デルタ法) を作る。"""
    if denominator.point == 0.0:
        raise EstimationError(f"{estimator}: estimated denominator is zero")
    conditional = delta_method_ratio(numerator, denominator)
    components = {
        "numerator": _summarized(
            dataset, "numerator", estimator, numerator.point, numerator.ic
        ),
        "denominator": _summarized(
            dataset, "denominator", estimator, denominator.point, denominator.ic
        ),
    }
    return _summarized(
        dataset,
        "conditional",
        estimator,
        conditional.point,
        conditional.ic,
        diagnostics,
        components,
    )


def complete_case(dataset: Dataset, spec: ScenarioSpec) -> EffectEstimate:
    """曝露と結果が測定された参加者に限った平均。

    影響曲線は I(E)(Y - ψ)/P(E) (E は完全ケースの集合)。

    Raises:
        EstimationError: 完全ケースが 1 件もない場合。
    """
    ctx = _context(dataset, spec)
    eligible = ctx.strata.measured
    count = int(np.sum(eligible))
    if count == 0:
        raise EstimationError(f"no complete cases for a={spec.a}")
    y1 = dataset.values("y1")
    point = float(np.mean(y1[eligible]))
    share = count / dataset.n
    ic = np.where(eligible, np.nan_to_num(y1) - point, 0.0) / share
    return _summarized(dataset, _estimand(dataset.scenario), "cc", point, ic)


def _horvitz_thompson(
    dataset: Dataset,
    nuisances: NuisanceEstimates,
    rows: BoolArray,
    chain: tuple[str, ...],
    column: str,
) -> LinearEstimate:
    """(1/N) Σ I(E) Y / G の推定値と、重みを既知とした影響曲線。"""
    if not np.any(rows):
        raise EstimationError(f"ipw: empty stratum for '{column}'")
    weights = np.zeros(dataset.n)
    weights[rows] = 1.0 / nuisances.cumulative_g(chain)[rows]
    summand = weights * np.nan_to_num(dataset.values(column))
    point = float(np.mean(summand))
    return LinearEstimate(point, summand - point)


def ipw(
    dataset: Dataset,
    spec: ScenarioSpec,
    glm_only: bool = True,
    sl_config: SuperLearnerConfig | None = None,
) -> EffectEstimate:
    """逆確率重み付け (Horvitz-Thompson) 推定量。

    重みは打ち切り後の g-factor の積の逆数。推論では重みを既知として扱う。

    Args:
        dataset: 観察データ。
        spec: 推定対象。
        glm_only: g-factor を主効果ロジスティック回帰で当てはめるか。
        sl_config: glm_only=False のときの Super Learner 設定。

    Returns:
        EffectEstimate。

    Raises:
        EstimationError: 対象の層が空の場合。
    """
    config = sl_config or SuperLearnerConfig()
    ctx = _context(dataset, spec)
    nuisances = fit_nuisances(dataset, spec, config, role="g", glm_only=glm_only)
    diagnostics = nuisances.diagnostics()
    inner = _plans(ctx)["numerator" if dataset.scenario is Scenario.S4 else "psi"][0]
    numerator = _horvitz_thompson(
        dataset, nuisances, inner.fit_rows, inner.chain, "y1"
    )
    if not dataset.scenario.has_baseline_outcome:
        estimate = numerator
        return _summarized(
            dataset, "psi", "ipw", estimate.point, estimate.ic, diagnostics
        )
    prevalence = _horvitz_thompson(
        dataset,
        nuisances,
        ctx.strata.baseline,
        ("delta_a", "a", "delta_y0"),
        "y0",
    )
    denominator = LinearEstimate(1.0 - prevalence.point, -prevalence.ic)
    return _ratio_estimate(dataset, "ipw", numerator, denominator, diagnostics)


def gcomp(
    dataset: Dataset, spec: ScenarioSpec, sl_config: SuperLearnerConfig
) -> EffectEstimate:
    """逐次 G-computation: 最外側の Q-factor の全参加者平均。

    影響曲線・SE・CI は報告しない。

    Raises:
        EstimationError: 当てはめる部分集団が空の場合。
    """
    nuisances = fit_nuisances(dataset, spec, sl_config, role="Q")

    def outer_mean(component: str) -> float:
        return float(np.mean(nuisances.q[component][-1].prediction))

    if not dataset.scenario.has_baseline_outcome:
        return _point_only(dataset, "psi", "gcomp", outer_mean("psi"))
    numerator = outer_mean("numerator")
    denominator = 1.0 - outer_mean("prevalence")
    if denominator == 0.0:
        raise EstimationError("gcomp: estimated denominator is zero")
    components = {
        "numerator": _point_only(dataset, "numerator", "gcomp", numerator),
        "denominator": _point_only(dataset, "denominator", "gcomp", denominator),
    }
    return _point_only(
        dataset, "conditional", "gcomp", numerator / denominator, None, components
    )


def _eic(
    nuisances: NuisanceEstimates, levels: tuple[QFactor, ...]
) -> LinearEstimate:
    """ターゲティング後の段から推定値と効率的影響曲線を組み立てる。

    D = Σ_k I_k/G_k (O_k - Q*_k) + Q*_outer - ψ。
    """
    outer = levels[-1].prediction
    point = float(np.mean(outer))
    eic = outer - point
    for level in levels:
        rows = level.fit_rows
        weights = 1.0 / nuisances.cumulative_g(level.chain)[rows]
        eic[rows] += weights * (level.outcome[rows] - level.prediction[rows])
    return LinearEstimate(point, eic)


def tmle(
    dataset: Dataset, spec: ScenarioSpec, sl_config: SuperLearnerConfig
) -> EffectEstimate:
    """逐次回帰 TMLE。

    各段で Q-factor を当てはめた直後に、重み 1/(g の累積積)・オフセット logit Q の
    切片のみロジスティック回帰でゆらぎを加え、その予測を 1 つ外側の段の結果とする。
    S4 は分子と有病割合を別々にターゲティングし、分母 = 1 - 有病割合として
    デルタ法で比をとる。

    Args:
        dataset: 観察データ。
        spec: 推定対象。
        sl_config: Super Learner 設定。

    Returns:
        EffectEstimate。diagnostics.eic_mean と epsilon に成分ごとの値を持つ。

    Raises:
        FluctuationError: ゆらぎの推定が収束しない場合。
        EstimationError: 当てはめる部分集団が空の場合。
    """
    ctx = _context(dataset, spec)
    nuisances = fit_nuisances(dataset, spec, sl_config, role="g")
    diagnostics = nuisances.diagnostics()
    estimates: dict[str, LinearEstimate] = {}
    for component, plans in _plans(ctx).items():
        levels = _run_component(ctx, component, plans, sl_config, nuisances)
        nuisances.q[component] = levels
        estimate = _eic(nuisances, levels)
        estimates[component] = estimate
        diagnostics.eic_mean[component] = float(np.mean(estimate.ic))
        for level in levels:
            if level.epsilon is not None:
                diagnostics.epsilon[f"{component}.{level.level}"] = level.epsilon
    logger.debug("EIC 平均: %s", diagnostics.eic_mean)

    if not dataset.scenario.has_baseline_outcome:
        psi = estimates["psi"]
        return _summarized(dataset, "psi", "tmle", psi.point, psi.ic, diagnostics)
    prevalence = estimates["prevalence"]
    denominator = LinearEstimate(1.0 - prevalence.point, -prevalence.ic)
    return _ratio_estimate(
        dataset, "tmle", estimates["numerator"], denominator, diagnostics
    )


Estimator = Callable[[Dataset, ScenarioSpec, SuperLearnerConfig], EffectEstimate]

ESTIMATORS: dict[str, Estimator] = {
    "cc": lambda dataset, spec, _config: complete_case(dataset, spec),
    "ipw": lambda dataset, spec, config: ipw(dataset, spec, True, config),
    "gcomp": gcomp,
    "tmle": tmle,
}


def _linear(estimate: EffectEstimate) -> LinearEstimate:
    if estimate.influence_curve is None:
        raise EstimationError(f"{estimate.estimator}: no influence curve")
    return LinearEstimate(estimate.point, estimate.influence_curve)


def _exponentiated(
    dataset: Dataset, estimand: str, estimator: str, log_scale: LinearEstimate
) -> EffectEstimate:
    """対数尺度で区間を作り指数変換する (se は対数尺度のまま)。"""
    try:
        summary = summarize_ic(log_scale.point, log_scale.ic, dataset.cluster_ids)
    except ValueError as err:
        raise EstimationError(f"{estimator}: {err}") from err
    return EffectEstimate(
        estimand=estimand,
        estimator=estimator,
        point=float(np.exp(log_scale.point)),
        influence_curve=log_scale.ic,
        se=summary.se,
        ci_lo=float(np.exp(summary.ci_lo)),
        ci_hi=float(np.exp(summary.ci_hi)),
        n=dataset.n,
        m_clusters=summary.m_clusters,
    )


def contrast(
    dataset: Dataset,
    estimator: str,
    arm1: EffectEstimate,
    arm0: EffectEstimate,
) -> ContrastResult:
    """曝露水準ごとの推定値から RR, RD, OR を作る。

    RR の影響曲線は log RR 尺度で IC1/ψ1 - IC0/ψ0。G-computation では点推定のみ。
    ψ1 = 0 なら log 尺度の CI が定義できないため、RR は点推定 0 のみで
    RD には CI を付け、OR は出さない。

    Raises:
        EstimationError: ψ0 = 0 の場合。
    """
    if arm0.point == 0.0:
        raise EstimationError(f"{estimator}: estimate for a=0 is zero")
    odds_defined = 0.0 < arm1.point < 1.0 and 0.0 < arm0.point < 1.0
    if arm1.influence_curve is None or arm0.influence_curve is None:
        odds = None
        if odds_defined:
            odds = (arm1.point / (1.0 - arm1.point)) / (arm0.point / (1.0 - arm0.point))
        return ContrastResult(
            estimator=estimator,
            arm1=arm1,
            arm0=arm0,
            rr=_point_only(dataset, "rr", estimator, arm1.point / arm0.point),
            rd=_point_only(dataset, "rd", estimator, arm1.point - arm0.point),
            odds_ratio=None
            if odds is None
            else _point_only(dataset, "or", estimator, odds),
        )

    first, second = _linear(arm1), _linear(arm0)
    difference = delta_method_difference(first, second)
    rd = _summarized(dataset, "rd", estimator, difference.point, difference.ic)
    if arm1.point <= 0.0:
        logger.warning("%s: ψ1 = 0 のため RR は点推定 0 のみを報告します", estimator)
        return ContrastResult(
            estimator=estimator,
            arm1=arm1,
            arm0=arm0,
            rr=_point_only(dataset, "rr", estimator, 0.0),
            rd=rd,
        )
    log_rr = delta_method_log(delta_method_ratio(first, second))
    odds_ratio = None
    if odds_defined:
        log_or = delta_method_difference(
            delta_method_logit(first), delta_method_logit(second)
        )
        odds_ratio = _exponentiated(dataset, "or", estimator, log_or)
    return ContrastResult(
        estimator=estimator,
        arm1=arm1,
        arm0=arm0,
        rr=_exponentiated(dataset, "rr", estimator, log_rr),
        rd=rd,
        odds_ratio=odds_ratio,
    )


def estimate_rr(
    dataset: Dataset,
    spec: ScenarioSpec,
    sl_config: SuperLearnerConfig,
    estimator: EstimatorName,
) -> ContrastResult:
    """推定量を a=1 と a=0 で実行し、相対リスクなどの対比を返す。

    2 つの曝露水準はスレッドで並列に推定する。

    Args:
        dataset: 観察データ。
        spec: 推定対象 (a は無視され 1, 0 の両方を推定する)。
        sl_config: Super Learner 設定。
        estimator: "cc", "ipw", "gcomp", "tmle" のいずれか。

    Returns:
        ContrastResult。

    Raises:
        ValueError: 未知の推定量名。
        EstimationError: 推定に失敗した場合、または ψ0 = 0 の場合。
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator: {estimator}")
    run = ESTIMATORS[estimator]
    arms = [dataclasses.replace(spec, a=level) for level in (1, 0)]
    with ThreadPoolExecutor(max_workers=2) as executor:
        arm1, arm0 = executor.map(lambda arm: run(dataset, arm, sl_config), arms)
    logger.info(
        "%s: ψ1=%.4f, ψ0=%.4f", estimator, arm1.point, arm0.point
    )
    return contrast(dataset, estimator, arm1, arm0)
