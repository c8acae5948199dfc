"""estimators モジュールのテスト。"""

import dataclasses
import logging
import math
from typing import Any

import numpy as np
import pandas as pd
import pytest

from counterfactual_strata.data import Dataset
from counterfactual_strata.errors import EstimationError, SpecError
from counterfactual_strata.estimators import (
    complete_case,
    contrast,
    estimate_rr,
    fit_nuisances,
    gcomp,
    ipw,
    strata,
    tmle,
)
from counterfactual_strata.models import Scenario, ScenarioSpec, SuperLearnerConfig
from counterfactual_strata.simulator import parse_spec, sample_observed, true_psi

GLM = SuperLearnerConfig(folds=2, library=("glm",))
SATURATED = SuperLearnerConfig(folds=2, library=("glm_interactions",))
STRATA = SuperLearnerConfig(folds=2, library=("strata",))


def _s1_estimand(a: int = 1, **kwargs: Any) -> ScenarioSpec:
    return ScenarioSpec(Scenario.S1, a=a, l0_features=("l0.x",), **kwargs)


def _s4_estimand(a: int = 1, site: bool = True) -> ScenarioSpec:
    l0 = ("l0.x", "l0.site") if site else ("l0.x",)
    return ScenarioSpec(Scenario.S4, a=a, l0_features=l0, l1_features=("l1.z",))


def _without_site(document: dict[str, Any]) -> dict[str, Any]:
    """l0.site を除いた S4 spec (L0, L1 とも二値 1 つ)。"""
    document["l0"] = [node for node in document["l0"] if node["name"] != "l0.site"]
    del document["equations"]["a"]["coefficients"]["l0.site=south"]
    return document


@pytest.fixture
def s1_data(s1_spec: dict[str, Any]) -> Dataset:
    """S1 の 400 人のデータ。"""
    s1_spec["clusters"]["n_clusters"] = 400
    return sample_observed(parse_spec(s1_spec), 21)


@pytest.fixture
def s4_data(s4_spec: dict[str, Any]) -> Dataset:
    """S4 の 400 世帯のデータ。"""
    s4_spec["clusters"]["n_clusters"] = 400
    return sample_observed(parse_spec(s4_spec), 8)


def test_strata(tiny_s4_dataset: Dataset) -> None:
    """曝露水準ごとの入れ子の部分集団。"""
    s = strata(tiny_s4_dataset, 1)
    assert s.treated.tolist() == [True, False, True, True, False, False, True, False]
    assert s.baseline.tolist() == [True, False, False, True, False, False, True, False]
    assert s.at_risk.tolist() == [True, False, False, False, False, False, True, False]
    assert s.measured.tolist() == [True, False, False, False, False, False, True, False]


def test_complete_case(s1_data: Dataset) -> None:
    """完全ケース推定値は曝露群の結果の平均。"""
    estimate = complete_case(s1_data, _s1_estimand())
    treated = s1_data.equals("a", 1)
    assert estimate.point == pytest.approx(np.mean(s1_data.values("y1")[treated]))
    assert estimate.estimator == "cc"
    assert estimate.ci_lo is not None and estimate.ci_hi is not None
    assert estimate.ci_lo < estimate.point < estimate.ci_hi
    assert np.mean(estimate.influence_curve) == pytest.approx(0.0, abs=1e-12)


def test_saturated_estimators_agree_s1(s1_data: Dataset) -> None:
    """二値の L0 1 つでは IPW, G-computation, TMLE が一致する。"""
    for a in (1, 0):
        spec = _s1_estimand(a)
        g = gcomp(s1_data, spec, GLM).point
        assert ipw(s1_data, spec).point == pytest.approx(g, abs=1e-6)
        assert tmle(s1_data, spec, GLM).point == pytest.approx(g, abs=1e-6)


def test_saturated_tmle_equals_gcomp_s4(s4_spec: dict[str, Any]) -> None:
    """Q が飽和モデルなら S4 の TMLE は G-computation に一致し ε は 0。"""
    s4_spec = _without_site(s4_spec)
    s4_spec["clusters"]["n_clusters"] = 800
    dataset = sample_observed(parse_spec(s4_spec), 2)
    spec = _s4_estimand(site=False)

    targeted = tmle(dataset, spec, SATURATED)
    plain = gcomp(dataset, spec, SATURATED)
    assert targeted.point == pytest.approx(plain.point, abs=1e-6)
    for name in ("numerator", "denominator"):
        assert targeted.components[name].point == pytest.approx(
            plain.components[name].point, abs=1e-6
        )
    assert all(abs(e) < 1e-6 for e in targeted.diagnostics.epsilon.values())


def test_tmle_solves_eic(s4_data: Dataset) -> None:
    """ターゲティング後は成分ごとの EIC の平均がほぼ 0。"""
    estimate = tmle(s4_data, _s4_estimand(), GLM)
    diagnostics = estimate.diagnostics

    assert set(diagnostics.eic_mean) == {"numerator", "prevalence"}
    assert all(abs(v) < 1e-8 for v in diagnostics.eic_mean.values())
    assert set(diagnostics.epsilon) == {
        "numerator.inner",
        "numerator.outer",
        "prevalence.outcome",
    }
    assert estimate.estimand == "conditional"
    numerator = estimate.components["numerator"].point
    denominator = estimate.components["denominator"].point
    assert estimate.point == pytest.approx(numerator / denominator)
    assert estimate.m_clusters == s4_data.n_clusters


def test_tmle_close_to_truth(s4_spec: dict[str, Any]) -> None:
    """正しく特定された GLM では TMLE は真値の近くにある。"""
    s4_spec["clusters"]["n_clusters"] = 1500
    spec = parse_spec(s4_spec)
    dataset = sample_observed(spec, 13)
    estimate = tmle(dataset, _s4_estimand(), GLM)
    truth = true_psi(spec, 1)

    assert estimate.se is not None
    assert abs(estimate.point - truth.psi) < max(4.0 * estimate.se, 0.02)


def _plain_frame(dataset: Dataset, columns: tuple[str, ...]) -> pd.DataFrame:
    """数値列は float (NA は NaN)、l0.site は文字列にした検算用の表。"""
    frame = pd.DataFrame({column: dataset.values(column) for column in columns})
    if "l0.site" in dataset.frame.columns:
        frame["l0.site"] = dataset.frame["l0.site"].astype(str).to_numpy()
    return frame


def _s4_stratified_psi(frame: pd.DataFrame, a: int) -> float:
    """層別平均を入れ子に積み上げた S4 の推定値。"""
    keys = ["l0.x", "l0.site"]
    baseline = frame[
        (frame["delta_a"] == 1) & (frame["a"] == a) & (frame["delta_y0"] == 1)
    ]
    at_risk = baseline[baseline["y0"] == 0]
    measured = at_risk[at_risk["delta_y1"] == 1]

    inner = measured.groupby([*keys, "l1.z"])["y1"].mean()
    pseudo = pd.Series(0.0, index=baseline.index)
    pseudo.loc[at_risk.index] = inner.reindex(
        pd.MultiIndex.from_frame(at_risk[[*keys, "l1.z"]])
    ).to_numpy()
    outer = pseudo.groupby([baseline[key] for key in keys]).mean()
    prevalence = baseline.groupby(keys)["y0"].mean()

    everyone = pd.MultiIndex.from_frame(frame[keys])
    numerator = float(outer.reindex(everyone).mean())
    return numerator / (1.0 - float(prevalence.reindex(everyone).mean()))


def test_stratum_means_reproduce_groupby_s1(s1_data: Dataset) -> None:
    """層平均の Q では G-computation と TMLE が groupby の計算に一致し ε は 0。"""
    frame = _plain_frame(s1_data, ("l0.x", "a", "y1"))
    for a in (1, 0):
        exposed = frame[frame["a"] == a]
        q = exposed.groupby("l0.x")["y1"].mean()
        expected = float(frame["l0.x"].map(q).mean())

        spec = _s1_estimand(a)
        targeted = tmle(s1_data, spec, STRATA)
        assert gcomp(s1_data, spec, STRATA).point == pytest.approx(expected, abs=1e-8)
        assert targeted.point == pytest.approx(expected, abs=1e-8)
        assert all(abs(e) < 1e-6 for e in targeted.diagnostics.epsilon.values())


def test_stratum_means_reproduce_groupby_s4(s4_spec: dict[str, Any]) -> None:
    """l0.site を含む S4 でも、層平均の Q なら逐次回帰が groupby の計算に一致する。"""
    s4_spec["clusters"]["n_clusters"] = 2000
    dataset = sample_observed(parse_spec(s4_spec), 4)
    frame = _plain_frame(
        dataset,
        ("l0.x", "delta_a", "a", "delta_y0", "y0", "l1.z", "delta_y1", "y1"),
    )
    for a in (1, 0):
        expected = _s4_stratified_psi(frame, a)
        spec = _s4_estimand(a)
        targeted = tmle(dataset, spec, STRATA)
        assert gcomp(dataset, spec, STRATA).point == pytest.approx(expected, abs=1e-8)
        assert targeted.point == pytest.approx(expected, abs=1e-8)
        assert set(targeted.diagnostics.epsilon) == {
            "numerator.inner",
            "numerator.outer",
            "prevalence.outcome",
        }
        assert all(abs(e) < 1e-6 for e in targeted.diagnostics.epsilon.values())


def test_large_sample_close_to_truth(s1_spec: dict[str, Any]) -> None:
    """N=20000 では G-computation と IPW が真値から 0.02 以内。"""
    s1_spec["clusters"]["n_clusters"] = 20_000
    spec = parse_spec(s1_spec)
    dataset = sample_observed(spec, 3)
    for a in (1, 0):
        truth = true_psi(spec, a).psi
        estimand = _s1_estimand(a)
        assert abs(gcomp(dataset, estimand, GLM).point - truth) < 0.02
        assert abs(ipw(dataset, estimand).point - truth) < 0.02


def test_ipw_s4_ratio(s4_data: Dataset) -> None:
    """S4 の IPW は分子と分母 (1 - 有病割合) の比。"""
    estimate = ipw(s4_data, _s4_estimand())
    numerator = estimate.components["numerator"]
    denominator = estimate.components["denominator"]
    assert estimate.point == pytest.approx(numerator.point / denominator.point)
    assert 0.0 < denominator.point < 1.0
    assert estimate.diagnostics.g_min is not None


def test_gcomp_has_no_interval(s4_data: Dataset) -> None:
    """G-computation は点推定のみ。"""
    estimate = gcomp(s4_data, _s4_estimand(), GLM)
    assert estimate.influence_curve is None
    assert estimate.se is None and estimate.ci_lo is None


def test_q_exclude_gives_crude_mean(s1_data: Dataset) -> None:
    """Q から全共変量を除くと G-computation は曝露群の粗平均になる。"""
    spec = _s1_estimand(q_exclude=("l0.x",))
    estimate = gcomp(s1_data, spec, GLM)
    crude = complete_case(s1_data, spec)
    assert estimate.point == pytest.approx(crude.point, abs=1e-8)


def test_fit_nuisances_constant_indicators(s1_data: Dataset) -> None:
    """S1 の測定指標は常に 1 なので定数の g-factor になる。"""
    nuisances = fit_nuisances(s1_data, _s1_estimand(), GLM, role="g")
    assert nuisances.g["delta_a"].constant
    assert nuisances.g["delta_y1"].constant
    assert not nuisances.g["a"].constant
    assert nuisances.diagnostics().factors["delta_a"].constant


def test_truncation_is_counted(
    s1_data: Dataset, caplog: pytest.LogCaptureFixture
) -> None:
    """打ち切り範囲の外の g は数えられ、警告される。"""
    spec = _s1_estimand(g_bounds=(0.45, 0.55))
    with caplog.at_level(logging.WARNING):
        estimate = ipw(s1_data, spec)
    assert estimate.diagnostics.n_truncated > 0
    assert "打ち切りました" in caplog.text


def test_truncation_count_shrinks_as_bounds_widen(s1_data: Dataset) -> None:
    """打ち切り範囲を広げるほど打ち切られる g は減る。"""
    bounds = ((0.45, 0.55), (0.4, 0.6), (0.3, 0.7), (0.01, 0.99))
    counts = [
        ipw(s1_data, _s1_estimand(g_bounds=b)).diagnostics.n_truncated for b in bounds
    ]
    assert counts == sorted(counts, reverse=True)
    assert counts[0] > counts[-1]


def test_contrast_rr_interval(s4_data: Dataset) -> None:
    """RR の区間は log 尺度の Wald 区間を指数変換したもの。"""
    result = estimate_rr(s4_data, _s4_estimand(), GLM, "tmle")
    rr = result.rr

    assert rr.point == pytest.approx(result.arm1.point / result.arm0.point)
    assert rr.se is not None and rr.ci_lo is not None and rr.ci_hi is not None
    assert math.log(rr.ci_hi) == pytest.approx(math.log(rr.point) + 1.959964 * rr.se)
    assert result.rd.point == pytest.approx(result.arm1.point - result.arm0.point)
    assert result.odds_ratio is not None


def test_contrast_gcomp_point_only(s1_data: Dataset) -> None:
    """G-computation の RR は点推定のみ。"""
    result = estimate_rr(s1_data, _s1_estimand(), GLM, "gcomp")
    assert result.rr.ci_lo is None
    assert result.rr.point == pytest.approx(result.arm1.point / result.arm0.point)


def test_contrast_zero_reference(s1_data: Dataset) -> None:
    """ψ0 = 0 では RR を定義できない。"""
    arm1 = complete_case(s1_data, _s1_estimand(1))
    arm0 = dataclasses.replace(arm1, point=0.0)
    with pytest.raises(EstimationError, match="a=0 is zero"):
        contrast(s1_data, "cc", arm1, arm0)


def test_contrast_zero_treated_arm(s1_data: Dataset) -> None:
    """ψ1 = 0 では RR は点推定 0 のみ、RD には区間が付く。"""
    arm0 = complete_case(s1_data, _s1_estimand(0))
    arm1 = dataclasses.replace(complete_case(s1_data, _s1_estimand(1)), point=0.0)
    result = contrast(s1_data, "cc", arm1, arm0)

    assert result.rr.point == 0.0
    assert result.rr.se is None and result.rr.ci_lo is None
    assert result.odds_ratio is None
    rd = result.rd
    assert rd.point == pytest.approx(-arm0.point)
    assert rd.ci_lo is not None and rd.ci_hi is not None
    assert rd.ci_lo < rd.point < rd.ci_hi


def test_estimate_rr_unknown_estimator(s1_data: Dataset) -> None:
    """未知の推定量名は ValueError。"""
    with pytest.raises(ValueError, match="unknown estimator"):
        estimate_rr(s1_data, _s1_estimand(), GLM, "aipw")  # type: ignore[arg-type]


def test_empty_subpopulation(s1_data: Dataset) -> None:
    """a=0 の人がいなければ、どの回帰が空かを含む EstimationError。"""
    frame = s1_data.frame.copy()
    frame["a"] = frame["a"].where(frame["a"].isna(), 1)
    dataset = Dataset(s1_data.schema, s1_data.scenario, frame)

    with pytest.raises(EstimationError, match="no complete cases"):
        complete_case(dataset, _s1_estimand(0))
    with pytest.raises(EstimationError, match="empty fitting subpopulation for 'Q:"):
        gcomp(dataset, _s1_estimand(0), GLM)


def test_missing_adjustment_values(s1_data: Dataset) -> None:
    """当てはめる部分集団の調整共変量に NA があれば EstimationError。"""
    frame = s1_data.frame.copy()
    frame.loc[0, "l0.x"] = pd.NA
    dataset = Dataset(s1_data.schema, s1_data.scenario, frame)

    with pytest.raises(EstimationError, match="missing adjustment values"):
        tmle(dataset, _s1_estimand(), GLM)


def test_unknown_feature(s1_data: Dataset) -> None:
    """データにない調整共変量は SpecError。"""
    spec = ScenarioSpec(Scenario.S1, l0_features=("l0.nope",))
    with pytest.raises(SpecError, match="l0.nope"):
        tmle(s1_data, spec, GLM)


def test_scenario_mismatch(s1_data: Dataset) -> None:
    """データと推定対象のシナリオが違えば SpecError。"""
    with pytest.raises(SpecError, match="estimand is S2"):
        complete_case(s1_data, ScenarioSpec(Scenario.S2, l0_features=("l0.x",)))
