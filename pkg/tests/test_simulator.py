"""simulator モジュールのテスト。"""

from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import pytest
from scipy.special import expit

from counterfactual_strata.data import validate
from counterfactual_strata.errors import SpecError
from counterfactual_strata.models import Scenario
from counterfactual_strata.simulator import (
    COMMUNITY_FEATURE,
    InterventionSpec,
    draw_exogenous,
    gformula_exact,
    joint_table,
    load_spec,
    parse_spec,
    sample_counterfactual,
    sample_observed,
    true_psi,
)


def _s1_truth(a: int) -> float:
    """S1 フィクスチャの E[Y1(a)] を手計算する。"""
    return 0.5 * float(expit(-1.0 + 0.6 * a)) + 0.5 * float(expit(-0.3 + 0.6 * a))


def test_parse_spec(s4_spec: dict[str, Any]) -> None:
    """S4 の spec を読み込める。"""
    spec = parse_spec(s4_spec)
    assert spec.scenario is Scenario.S4
    assert spec.discrete_exact
    assert [f.name for f in spec.schema.l0] == ["l0.x", "l0.site"]
    assert spec.schema.feature("l0.site").levels == ("north", "south")
    assert spec.equations["a"].parents == ("l0.x", "l0.site")


def test_parse_spec_unknown_scenario(s1_spec: dict[str, Any]) -> None:
    """未知のシナリオは SpecError。"""
    s1_spec["scenario"] = "S9"
    with pytest.raises(SpecError, match="unknown scenario"):
        parse_spec(s1_spec)


def test_parse_spec_missing_equation(s4_spec: dict[str, Any]) -> None:
    """シナリオのノードに方程式がなければ SpecError。"""
    del s4_spec["equations"]["delta_y0"]
    with pytest.raises(SpecError, match="missing equations"):
        parse_spec(s4_spec)


def test_parse_spec_rejects_unused_node(s1_spec: dict[str, Any]) -> None:
    """S1 に delta_a の方程式は書けない。"""
    s1_spec["equations"]["delta_a"] = {"intercept": 1.0}
    with pytest.raises(SpecError, match="not used"):
        parse_spec(s1_spec)


def test_parse_spec_parent_order(s4_spec: dict[str, Any]) -> None:
    """親は子より前のノードでなければならない。"""
    s4_spec["equations"]["a"]["coefficients"]["y0"] = 0.5
    with pytest.raises(SpecError, match="does not precede"):
        parse_spec(s4_spec)


def test_parse_spec_categorical_term(s4_spec: dict[str, Any]) -> None:
    """カテゴリ親の係数は宣言された水準を指定する。"""
    s4_spec["equations"]["a"]["coefficients"] = {"l0.site=east": 0.3}
    with pytest.raises(SpecError, match="must name a level"):
        parse_spec(s4_spec)


def test_parse_spec_l1_not_allowed(s1_spec: dict[str, Any]) -> None:
    """L1 を持たないシナリオで L1 を宣言すると SpecError。"""
    s1_spec["l1"] = [{"name": "l1.z", "type": "binary"}]
    with pytest.raises(SpecError, match="no L1"):
        parse_spec(s1_spec)


def test_parse_spec_probs_sum(s4_spec: dict[str, Any]) -> None:
    """カテゴリ確率の合計が 1 でなければ SpecError。"""
    s4_spec["l0"][1]["probs"] = [0.6, 0.6]
    with pytest.raises(SpecError, match="sum to 1"):
        parse_spec(s4_spec)


def test_load_spec_invalid_json(tmp_path: Path) -> None:
    """JSON として読めないファイルは SpecError。"""
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(SpecError, match="invalid JSON"):
        load_spec(path)


def test_load_spec(s4_spec_path: Path) -> None:
    """ファイルから spec を読み込める。"""
    assert load_spec(s4_spec_path).clusters.sizes == (1, 2, 3)


def test_sample_observed_reproducible(s4_spec: dict[str, Any]) -> None:
    """同じ (spec, seed) からは同じデータセット、異なる seed では異なる。"""
    spec = parse_spec(s4_spec)
    first = sample_observed(spec, 11)
    second = sample_observed(spec, 11)
    other = sample_observed(spec, 12)

    pd.testing.assert_frame_equal(first.frame, second.frame)
    assert not first.frame.equals(other.frame)
    assert first.n_clusters == 300


def test_sample_observed_structure(s4_spec: dict[str, Any]) -> None:
    """観察データは構造検証を通り、リスク集団外は追跡されない。"""
    dataset = sample_observed(parse_spec(s4_spec), 3)
    assert validate(dataset).passed

    at_risk = dataset.equals("delta_y0", 1) & dataset.equals("y0", 0)
    assert np.all(dataset.values("delta_y1")[~at_risk] == 0.0)
    assert np.all(np.isnan(dataset.values("l1.z")[~at_risk]))
    assert np.all(np.isnan(dataset.values("a")[dataset.equals("delta_a", 0)]))
    assert 0.0 < np.mean(dataset.values("delta_a") == 0.0) < 0.5


def test_sample_observed_s1(s1_spec: dict[str, Any]) -> None:
    """S1 では曝露・結果が常に観測される。"""
    dataset = sample_observed(parse_spec(s1_spec), 0)
    assert dataset.n == 400
    assert np.all(dataset.values("delta_a") == 1.0)
    assert np.all(dataset.values("delta_y1") == 1.0)
    assert not np.any(np.isnan(dataset.values("y1")))


def test_communities(s1_spec: dict[str, Any]) -> None:
    """コミュニティ数を指定すると世帯単位のカテゴリ共変量が加わる。"""
    s1_spec["clusters"] = {"n_clusters": 50, "size": 2, "n_communities": 3}
    spec = parse_spec(s1_spec)
    dataset = sample_observed(spec, 5)

    assert spec.schema.l0[0].name == COMMUNITY_FEATURE
    per_cluster = dataset.frame.groupby("cluster_id", observed=True)[
        COMMUNITY_FEATURE
    ].nunique()
    assert (per_cluster == 1).all()


def test_draw_exogenous_prefix_stable(s4_spec: dict[str, Any]) -> None:
    """クラスタ数を増やしても先頭クラスタのノイズは変わらない。"""
    spec = parse_spec(s4_spec)
    small = draw_exogenous(spec, 7, n_clusters=10)
    large = draw_exogenous(spec, 7, n_clusters=20)
    np.testing.assert_array_equal(small.uniform, large.uniform[: small.n])
    np.testing.assert_array_equal(small.cluster_ids, large.cluster_ids[: small.n])


def test_sample_counterfactual_shares_noise(s1_spec: dict[str, Any]) -> None:
    """反事実世界は観察世界と同じノイズを使い、曝露が一致する行は結果も一致する。"""
    spec = parse_spec(s1_spec)
    observed = sample_observed(spec, 9)
    intervention = InterventionSpec.for_scenario(spec.scenario, 1)
    treated = sample_counterfactual(spec, intervention, seed=9)

    assert len(treated) == observed.n
    assert np.all(treated["a"] == 1.0)
    rows = observed.equals("a", 1)
    np.testing.assert_array_equal(
        treated["y1"].to_numpy()[rows], observed.values("y1")[rows]
    )


def test_sample_counterfactual_dynamic_rule(s4_spec: dict[str, Any]) -> None:
    """S4 の介入では Y0*=0 の人だけが追跡される。"""
    spec = parse_spec(s4_spec)
    frame = sample_counterfactual(
        spec, InterventionSpec.for_scenario(spec.scenario, 0), n_draws=500, seed=1
    )
    assert len(frame) == 500
    np.testing.assert_array_equal(frame["delta_y1"], 1.0 - frame["y0"])
    assert np.all(frame["delta_y0"] == 1.0)


def test_intervention_check() -> None:
    """シナリオに合わない delta_y1 規則は SpecError。"""
    with pytest.raises(SpecError):
        InterventionSpec(a=1, delta_y1_rule="static").check(Scenario.S4)
    with pytest.raises(SpecError):
        InterventionSpec(a=2, delta_y1_rule="none").check(Scenario.S1)
    InterventionSpec(a=1, delta_y1_rule="dynamic").check(Scenario.S4)


def test_true_psi_exact_s1(s1_spec: dict[str, Any]) -> None:
    """S1 の厳密な真値は手計算と一致する。"""
    spec = parse_spec(s1_spec)
    for a in (1, 0):
        report = true_psi(spec, a)
        assert report.kind == "counterfactual"
        assert report.psi == pytest.approx(_s1_truth(a), abs=1e-12)


def test_gformula_matches_truth_without_latent(s4_spec: dict[str, Any]) -> None:
    """潜在変数がなければ (識別条件が成立し) g-formula は真値と一致する。"""
    spec = parse_spec(s4_spec)
    for a in (1, 0):
        truth = true_psi(spec, a)
        gformula = gformula_exact(spec, a)
        assert gformula.kind == "gformula"
        assert gformula.numerator == pytest.approx(truth.numerator, abs=1e-10)
        assert gformula.denominator == pytest.approx(truth.denominator, abs=1e-10)
        assert gformula.psi == pytest.approx(truth.psi, abs=1e-10)
        assert truth.psi == pytest.approx(truth.numerator / truth.denominator)


def test_gformula_matches_truth_s3(s3_spec: dict[str, Any]) -> None:
    """S3 でも L1 を介した欠測なら g-formula と真値は一致する。"""
    spec = parse_spec(s3_spec)
    expected = true_psi(spec, 1).psi
    assert gformula_exact(spec, 1).psi == pytest.approx(expected, abs=1e-10)


def test_gformula_matches_truth_s2(s1_spec: dict[str, Any]) -> None:
    """曝露だけが L0 に依存して欠測する S2 でも g-formula と真値は一致する。"""
    s1_spec["scenario"] = "S2"
    s1_spec["equations"]["delta_a"] = {
        "intercept": 1.0,
        "coefficients": {"l0.x": -0.7},
    }
    spec = parse_spec(s1_spec)
    for a in (1, 0):
        truth = true_psi(spec, a)
        assert gformula_exact(spec, a).psi == pytest.approx(truth.psi, abs=1e-10)


def test_identification_gap_with_latent(s3_spec: dict[str, Any]) -> None:
    """世帯潜在変数が追跡と結果の両方に効くと g-formula は真値からずれる。"""
    s3_spec["equations"]["delta_y1"]["loading"] = 1.5
    s3_spec["equations"]["y1"]["loading"] = 1.5
    spec = parse_spec(s3_spec)
    assert spec.has_latent
    gap = gformula_exact(spec, 1).psi - true_psi(spec, 1).psi
    assert abs(gap) > 0.01


def test_joint_table_weights_sum_to_one(s4_spec: dict[str, Any]) -> None:
    """同時確率表の重みの合計は 1。"""
    s4_spec["equations"]["y1"]["loading"] = 0.8
    table = joint_table(parse_spec(s4_spec))
    assert table["_w"].sum() == pytest.approx(1.0, abs=1e-10)


def test_joint_table_rejects_gaussian(s1_spec: dict[str, Any]) -> None:
    """連続共変量を含む spec は厳密列挙できない。"""
    s1_spec["l0"].append({"name": "l0.age", "type": "gaussian", "mean": 0.0})
    spec = parse_spec(s1_spec)
    assert not spec.discrete_exact
    with pytest.raises(SpecError):
        joint_table(spec)


def test_true_psi_monte_carlo_close_to_exact(s4_spec: dict[str, Any]) -> None:
    """モンテカルロの真値は厳密値から MC SE の数倍以内。"""
    spec = parse_spec(s4_spec)
    exact = true_psi(spec, 1)
    report = true_psi(spec, 1, "monte_carlo", n_draws=200_000, seed=4)

    assert report.method == "monte_carlo"
    assert set(report.mc_se) == {"numerator", "denominator", "conditional"}
    assert abs(report.psi - exact.psi) < 5.0 * report.mc_se["conditional"]


def test_gaussian_covariate_simulation(s1_spec: dict[str, Any]) -> None:
    """連続共変量の spec もモンテカルロで真値を計算できる。"""
    s1_spec["l0"].append(
        {"name": "l0.age", "type": "gaussian", "mean": 1.0, "sd": 2.0}
    )
    s1_spec["equations"]["y1"]["coefficients"]["l0.age"] = 0.1
    spec = parse_spec(s1_spec)
    dataset = sample_observed(spec, 0)
    report = true_psi(spec, 0, "monte_carlo", n_draws=10_000)

    assert np.std(dataset.values("l0.age")) > 1.0
    assert 0.0 < report.psi < 1.0
    assert report.mc_se["psi"] < 0.01
