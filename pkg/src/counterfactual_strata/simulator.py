"""NPSEM シミュレータ: 観察データ・反事実データの生成と真値の計算。

シナリオごとのノード順序は固定で、L0, delta_a, a, delta_y0, y0, L1, delta_y1, y1。
同じ (spec, seed) からは観察世界と反事実世界が同じ外生ノイズで生成される。
"""

import json
import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import numpy as np
import numpy.typing as npt
import pandas as pd
from scipy.special import expit

from counterfactual_strata.data import CLUSTER_COLUMN, Dataset, build_dataset
from counterfactual_strata.errors import SpecError
from counterfactual_strata.models import (
    Feature,
    FloatArray,
    Scenario,
    Schema,
    TruthReport,
)

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
QUADRATURE_POINTS = 9
COMMUNITY_FEATURE = "l0.community"

NodeKind = Literal["binary", "categorical", "gaussian"]
DeltaY1Rule = Literal["none", "static", "dynamic"]

_SCENARIO_NODES: dict[Scenario, tuple[str, ...]] = {
    Scenario.S1: ("a", "y1"),
    Scenario.S2: ("delta_a", "a", "y1"),
    Scenario.S3: ("delta_a", "a", "delta_y1", "y1"),
    Scenario.S4: ("delta_a", "a", "delta_y0", "y0", "delta_y1", "y1"),
}
_PRE_L1 = ("delta_a", "a", "delta_y0", "y0")
_POST_L1 = ("delta_y1", "y1")


def _probability(eta: FloatArray) -> FloatArray:
    return np.clip(expit(eta), PROB_FLOOR, 1.0 - PROB_FLOOR)


def _term_values(term: str, state: Mapping[str, npt.NDArray[Any]]) -> FloatArray:
    """係数キー ("name" または "name=level") の値列。"""
    name, _, level = term.partition("=")
    values = state[name]
    if level:
        return (values == level).astype(float)
    return values.astype(float)


@dataclass(frozen=True)
class NodeEquation:
    """1 ノードの構造方程式。

    binary / gaussian は intercept + Σ coef·term + loading·U の線形予測子を持ち、
    binary はロジスティック、gaussian は正規ノイズ (sd) を加える。
    categorical は親を持たず levels / probs で周辺分布を与える。
    """

    name: str
    kind: NodeKind = "binary"
    intercept: float = 0.0
    coefficients: dict[str, float] = field(default_factory=lambda: {})
    loading: float = 0.0
    levels: tuple[str, ...] = ()
    probs: tuple[float, ...] = ()
    sd: float = 1.0

    @property
    def parents(self) -> tuple[str, ...]:
        """係数キーに現れる親ノード。"""
        return tuple(dict.fromkeys(t.partition("=")[0] for t in self.coefficients))

    def linear_predictor(
        self, state: Mapping[str, npt.NDArray[Any]], latent: FloatArray
    ) -> FloatArray:
        """線形予測子 (ロジット尺度または平均)。"""
        eta = np.full(len(latent), self.intercept, dtype=float)
        for term, coef in self.coefficients.items():
            eta = eta + coef * _term_values(term, state)
        return eta + self.loading * latent


@dataclass(frozen=True)
class ClusterSpec:
    """クラスタ (世帯) 構造。"""

    n_clusters: int
    sizes: tuple[int, ...] = (1,)
    size_probs: tuple[float, ...] = (1.0,)
    n_communities: int = 0


@dataclass(frozen=True)
class NpsemSpec:
    """シナリオの NPSEM 全体。"""

    scenario: Scenario
    l0: tuple[NodeEquation, ...]
    l1: tuple[NodeEquation, ...]
    equations: dict[str, NodeEquation]
    clusters: ClusterSpec

    @property
    def covariates(self) -> tuple[NodeEquation, ...]:
        """L0 と L1 の共変量方程式。"""
        return self.l0 + self.l1

    @property
    def discrete_exact(self) -> bool:
        """全共変量が離散で厳密列挙できるか。"""
        return all(node.kind != "gaussian" for node in self.covariates)

    @property
    def schema(self) -> Schema:
        """生成されるデータセットのスキーマ。"""

        def declare(node: NodeEquation) -> Feature:
            if node.kind == "categorical":
                return Feature(node.name, "categorical", node.levels)
            return Feature(node.name)

        l0 = tuple(declare(node) for node in self.l0)
        if self.clusters.n_communities:
            l0 = (_community_feature(self.clusters.n_communities),) + l0
        return Schema(l0=l0, l1=tuple(declare(node) for node in self.l1))

    @property
    def node_order(self) -> tuple[str, ...]:
        """外生ノイズの列に対応するノード順序 (コミュニティを除く)。"""
        return (
            tuple(node.name for node in self.l0)
            + _PRE_L1
            + tuple(node.name for node in self.l1)
            + _POST_L1
        )

    @property
    def has_latent(self) -> bool:
        """クラスタ潜在変数の負荷を持つノードがあるか。"""
        nodes = list(self.covariates) + list(self.equations.values())
        return any(node.loading != 0.0 for node in nodes)


def _community_feature(n_communities: int) -> Feature:
    levels = tuple(f"c{k + 1}" for k in range(n_communities))
    return Feature(COMMUNITY_FEATURE, "categorical", levels)


@dataclass(frozen=True)
class InterventionSpec:
    """介入: delta_a := 1, a := level, delta_y0 := 1 (S4), delta_y1 の規則。

    delta_y1_rule は "static" (S3: 1 に設定)、"dynamic" (S4: Y0*=0 なら 1、
    そうでなければ 0)、"none" (S1/S2: 介入対象外)。
    """

    a: int
    delta_y1_rule: DeltaY1Rule

    @classmethod
    def for_scenario(cls, scenario: Scenario, a: int) -> "InterventionSpec":
        """シナリオ標準の介入を作る。"""
        rules: dict[Scenario, DeltaY1Rule] = {
            Scenario.S1: "none",
            Scenario.S2: "none",
            Scenario.S3: "static",
            Scenario.S4: "dynamic",
        }
        return cls(a=a, delta_y1_rule=rules[scenario])

    def check(self, scenario: Scenario) -> None:
        """シナリオと整合するか検査する。

        Raises:
            SpecError: 介入がシナリオのノードと合わない場合。
        """
        if self.a not in (0, 1):
            raise SpecError(f"exposure level must be 0 or 1: {self.a}")
        expected = InterventionSpec.for_scenario(scenario, self.a).delta_y1_rule
        if self.delta_y1_rule != expected:
            raise SpecError(
                f"delta_y1 rule '{self.delta_y1_rule}' does not match {scenario}"
            )


# -- spec の読み込み ---------------------------------------------------------


def _number(value: object, where: str, allow_infinite: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, int | float):
        raise SpecError(f"{where}: expected a number, got {value!r}")
    number = float(value)
    if math.isnan(number) or (not allow_infinite and math.isinf(number)):
        raise SpecError(f"{where}: non-finite value {value!r}")
    return number


def _parse_node(raw: Mapping[str, Any], name: str, kind: NodeKind) -> NodeEquation:
    where = f"node '{name}'"
    if kind == "categorical":
        levels = tuple(str(level) for level in raw.get("levels", ()))
        probs = tuple(_number(p, where) for p in raw.get("probs", ()))
        if not levels or len(levels) != len(probs):
            raise SpecError(f"{where}: levels and probs must be non-empty and aligned")
        if any(p < 0.0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise SpecError(f"{where}: probs must be non-negative and sum to 1")
        if len(set(levels)) != len(levels):
            raise SpecError(f"{where}: duplicate levels")
        return NodeEquation(name, kind, levels=levels, probs=probs)

    coefficients = {
        str(term): _number(coef, f"{where} coefficient '{term}'")
        for term, coef in dict(raw.get("coefficients", {})).items()
    }
    sd = _number(raw.get("sd", 1.0), where)
    if sd <= 0.0:
        raise SpecError(f"{where}: sd must be positive")
    intercept_key = "mean" if kind == "gaussian" else "intercept"
    return NodeEquation(
        name,
        kind,
        intercept=_number(
            raw.get(intercept_key, 0.0), where, allow_infinite=kind == "binary"
        ),
        coefficients=coefficients,
        loading=_number(raw.get("loading", 0.0), f"{where} loading"),
        sd=sd,
    )


def _parse_covariate(raw: Mapping[str, Any], prefix: str) -> NodeEquation:
    name = str(raw.get("name", ""))
    if not name.startswith(prefix):
        raise SpecError(f"covariate '{name}' must start with '{prefix}'")
    kind = raw.get("type", "binary")
    if kind not in ("binary", "categorical", "gaussian"):
        raise SpecError(f"covariate '{name}': unknown type '{kind}'")
    if prefix == "l1." and kind == "categorical":
        raise SpecError(f"covariate '{name}': L1 covariates must be binary or gaussian")
    return _parse_node(raw, name, kind)


def _parse_clusters(raw: Mapping[str, Any]) -> ClusterSpec:
    n_clusters = raw.get("n_clusters")
    if not isinstance(n_clusters, int) or n_clusters < 1:
        raise SpecError("clusters.n_clusters must be a positive integer")
    if "sizes" in raw:
        sizes = tuple(int(s) for s in raw["sizes"])
        probs = tuple(_number(p, "clusters.probs") for p in raw.get("probs", ()))
    else:
        sizes = (int(raw.get("size", 1)),)
        probs = (1.0,)
    if not sizes or len(sizes) != len(probs) or any(s < 1 for s in sizes):
        raise SpecError("clusters: sizes must be positive and aligned with probs")
    if any(p < 0.0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
        raise SpecError("clusters: probs must be non-negative and sum to 1")
    n_communities = int(raw.get("n_communities", 0))
    if n_communities < 0:
        raise SpecError("clusters.n_communities must be non-negative")
    return ClusterSpec(n_clusters, sizes, probs, n_communities)


def _check_parents(spec: NpsemSpec) -> None:
    """親が順序で先行し、カテゴリ親は水準付きで参照されることを検査する。"""
    categorical = {
        node.name: node.levels for node in spec.l0 if node.kind == "categorical"
    }
    if spec.clusters.n_communities:
        categorical[COMMUNITY_FEATURE] = _community_feature(
            spec.clusters.n_communities
        ).levels
    preceding: set[str] = {COMMUNITY_FEATURE} if spec.clusters.n_communities else set()
    present = set(_SCENARIO_NODES[spec.scenario]) | {n.name for n in spec.covariates}
    present |= preceding
    nodes = {node.name: node for node in spec.covariates}
    nodes.update(spec.equations)
    for name in spec.node_order:
        node = nodes.get(name)
        if node is not None:
            for term in node.coefficients:
                parent, _, level = term.partition("=")
                if parent not in preceding or parent not in present:
                    raise SpecError(
                        f"node '{name}': parent '{parent}' does not precede it"
                    )
                if parent in categorical and level not in categorical[parent]:
                    raise SpecError(
                        f"node '{name}': term '{term}' must name a level of '{parent}'"
                    )
                if parent not in categorical and level:
                    raise SpecError(f"node '{name}': '{parent}' is not categorical")
        preceding.add(name)


def parse_spec(document: Mapping[str, Any]) -> NpsemSpec:
    """JSON 文書 (dict) を NpsemSpec に変換する。

    Raises:
        SpecError: 文書が不正な場合。
    """
    try:
        scenario = Scenario(str(document.get("scenario")))
    except ValueError as err:
        raise SpecError(f"unknown scenario: {document.get('scenario')!r}") from err
    l0 = tuple(_parse_covariate(raw, "l0.") for raw in document.get("l0", ()))
    l1 = tuple(_parse_covariate(raw, "l1.") for raw in document.get("l1", ()))
    if l1 and not scenario.has_l1:
        raise SpecError(f"{scenario} has no L1 covariates")
    names = [node.name for node in l0 + l1]
    if len(set(names)) != len(names):
        raise SpecError("duplicate covariate names")

    raw_equations = dict(document.get("equations", {}))
    required = _SCENARIO_NODES[scenario]
    unknown = set(raw_equations) - set(required)
    if unknown:
        raise SpecError(f"equations not used by {scenario}: {sorted(unknown)}")
    missing = [name for name in required if name not in raw_equations]
    if missing:
        raise SpecError(f"missing equations for {scenario}: {missing}")
    equations = {
        name: _parse_node(raw_equations[name], name, "binary") for name in required
    }
    clusters = _parse_clusters(dict(document.get("clusters", {"n_clusters": 0})))
    if clusters.n_communities and COMMUNITY_FEATURE in names:
        raise SpecError(f"'{COMMUNITY_FEATURE}' is reserved for community indicators")

    spec = NpsemSpec(scenario, l0, l1, equations, clusters)
    _check_parents(spec)
    return spec


def load_spec(path: Path) -> NpsemSpec:
    """NPSEM spec の JSON ファイルを読み込む。

    Args:
        path: JSON ファイルのパス。

    Returns:
        検査済みの NpsemSpec。

    Raises:
        OSError: ファイルを読めない場合。
        SpecError: JSON として読めない、または内容が不正な場合。
    """
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise SpecError(f"{path}: invalid JSON ({err})") from err
    if not isinstance(document, dict):
        raise SpecError(f"{path}: top level must be an object")
    return parse_spec(document)


# -- 外生ノイズと構造方程式の評価 --------------------------------------------


@dataclass(frozen=True)
class Exogenous:
    """参加者ごとの外生ノイズ。列は NpsemSpec.node_order に対応する。"""

    uniform: FloatArray
    normal: FloatArray
    latent: FloatArray
    community: npt.NDArray[np.int_]
    cluster_ids: npt.NDArray[np.str_]

    @property
    def n(self) -> int:
        """参加者数。"""
        return len(self.latent)


def _draw_cluster(
    spec: NpsemSpec, seed: int, index: int
) -> tuple[FloatArray, FloatArray, float, int]:
    """クラスタ index のノイズを (seed, index) 専用の乱数列から引く。"""
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    clusters = spec.clusters
    size = clusters.sizes[int(rng.choice(len(clusters.sizes), p=clusters.size_probs))]
    latent = float(rng.standard_normal())
    community = int(rng.integers(max(clusters.n_communities, 1)))
    width = len(spec.node_order)
    uniform = rng.random((size, width))
    return uniform, rng.standard_normal((size, width)), latent, community


def draw_exogenous(
    spec: NpsemSpec, seed: int, n_clusters: int | None = None, n_rows: int | None = None
) -> Exogenous:
    """クラスタ単位のカウンタベース乱数で外生ノイズを生成する。

    n_rows を指定した場合は行数に達するまでクラスタを引き、先頭 n_rows 行を返す。
    """
    uniforms: list[FloatArray] = []
    normals: list[FloatArray] = []
    latents: list[FloatArray] = []
    communities: list[npt.NDArray[np.int_]] = []
    ids: list[npt.NDArray[np.str_]] = []
    total = 0
    index = 0
    limit = spec.clusters.n_clusters if n_clusters is None else n_clusters
    while (n_rows is None and index < limit) or (n_rows is not None and total < n_rows):
        uniform, normal, latent, community = _draw_cluster(spec, seed, index)
        size = uniform.shape[0]
        uniforms.append(uniform)
        normals.append(normal)
        latents.append(np.full(size, latent))
        communities.append(np.full(size, community))
        ids.append(np.full(size, f"h{index + 1}"))
        total += size
        index += 1
    rows = slice(None) if n_rows is None else slice(0, n_rows)
    return Exogenous(
        uniform=np.vstack(uniforms)[rows],
        normal=np.vstack(normals)[rows],
        latent=np.concatenate(latents)[rows],
        community=np.concatenate(communities)[rows],
        cluster_ids=np.concatenate(ids)[rows],
    )


def _evaluate_covariate(
    node: NodeEquation,
    state: Mapping[str, npt.NDArray[Any]],
    exo: Exogenous,
    column: int,
) -> npt.NDArray[Any]:
    if node.kind == "categorical":
        cumulative = np.cumsum(node.probs)
        index = np.searchsorted(cumulative, exo.uniform[:, column], side="right")
        index = np.minimum(index, len(node.levels) - 1)
        return np.asarray(node.levels, dtype=object)[index]
    eta = node.linear_predictor(state, exo.latent)
    if node.kind == "gaussian":
        return eta + node.sd * exo.normal[:, column]
    return (exo.uniform[:, column] < _probability(eta)).astype(float)


def evaluate(
    spec: NpsemSpec, exo: Exogenous, intervention: InterventionSpec | None = None
) -> dict[str, npt.NDArray[Any]]:
    """構造方程式を順序どおりに評価し、全ノードの (潜在) 値を返す。

    intervention が None なら観察世界。観察世界の S4 では delta_y0=0 または
    y0=1 の参加者の delta_y1 を 0 に固定する。
    """
    columns = {name: k for k, name in enumerate(spec.node_order)}
    state: dict[str, npt.NDArray[Any]] = {}
    if spec.clusters.n_communities:
        levels = _community_feature(spec.clusters.n_communities).levels
        state[COMMUNITY_FEATURE] = np.asarray(levels, dtype=object)[exo.community]
    for node in spec.l0:
        state[node.name] = _evaluate_covariate(node, state, exo, columns[node.name])

    def bernoulli(name: str) -> FloatArray:
        eta = spec.equations[name].linear_predictor(state, exo.latent)
        return (exo.uniform[:, columns[name]] < _probability(eta)).astype(float)

    ones = np.ones(exo.n)
    scenario = spec.scenario
    if intervention is not None:
        intervention.check(scenario)
    if scenario is Scenario.S1 or intervention is not None:
        state["delta_a"] = ones
    else:
        state["delta_a"] = bernoulli("delta_a")
    state["a"] = ones * intervention.a if intervention is not None else bernoulli("a")
    if scenario.has_baseline_outcome:
        state["delta_y0"] = ones if intervention is not None else bernoulli("delta_y0")
        state["y0"] = bernoulli("y0")
    for node in spec.l1:
        state[node.name] = _evaluate_covariate(node, state, exo, columns[node.name])
    if scenario in (Scenario.S1, Scenario.S2):
        state["delta_y1"] = ones
    elif intervention is None:
        state["delta_y1"] = bernoulli("delta_y1")
        if scenario.has_baseline_outcome:
            at_risk = (state["delta_y0"] == 1.0) & (state["y0"] == 0.0)
            state["delta_y1"] = np.where(at_risk, state["delta_y1"], 0.0)
    elif intervention.delta_y1_rule == "dynamic":
        state["delta_y1"] = 1.0 - state["y0"]
    else:
        state["delta_y1"] = ones
    state["y1"] = bernoulli("y1")
    return state


def _observed_frame(
    spec: NpsemSpec, state: Mapping[str, npt.NDArray[Any]], exo: Exogenous
) -> pd.DataFrame:
    """潜在値に測定指標のマスクをかけて観察データの列を作る。"""

    def masked(
        values: npt.NDArray[Any], observed: npt.NDArray[np.bool_]
    ) -> FloatArray:
        return np.where(observed, values.astype(float), np.nan)

    frame = pd.DataFrame(index=pd.RangeIndex(exo.n))
    for feature in spec.schema.l0:
        frame[feature.name] = state[feature.name]
    frame["delta_a"] = state["delta_a"]
    frame["a"] = masked(state["a"], state["delta_a"] == 1.0)
    if spec.scenario.has_baseline_outcome:
        frame["delta_y0"] = state["delta_y0"]
        frame["y0"] = masked(state["y0"], state["delta_y0"] == 1.0)
        at_risk = (state["delta_y0"] == 1.0) & (state["y0"] == 0.0)
    else:
        at_risk = np.ones(exo.n, dtype=bool)
    for node in spec.l1:
        frame[node.name] = masked(state[node.name], at_risk)
    frame["delta_y1"] = state["delta_y1"]
    frame["y1"] = masked(state["y1"], state["delta_y1"] == 1.0)
    frame[CLUSTER_COLUMN] = exo.cluster_ids
    return frame


def sample_observed(spec: NpsemSpec, seed: int) -> Dataset:
    """観察データを生成する。

    Args:
        spec: NPSEM spec。
        seed: 乱数シード。同じ (spec, seed) からは同一のデータセットを返す。

    Returns:
        spec.clusters.n_clusters 個のクラスタからなる Dataset。
    """
    exo = draw_exogenous(spec, seed)
    state = evaluate(spec, exo)
    frame = _observed_frame(spec, state, exo)
    dataset = build_dataset(frame, spec.schema, spec.scenario)
    logger.debug("%d 行, %d クラスタを生成しました", dataset.n, dataset.n_clusters)
    return dataset


def sample_counterfactual(
    spec: NpsemSpec,
    intervention: InterventionSpec,
    n_draws: int | None = None,
    seed: int = 0,
) -> pd.DataFrame:
    """介入下の反事実世界を生成する。

    観察世界と同じ外生ノイズを使うため、同じ seed の sample_observed と行ごとに
    対応する (先頭 n_draws 行)。

    Args:
        spec: NPSEM spec。
        intervention: 介入。
        n_draws: 行数。None なら spec のクラスタ数ぶん。
        seed: 乱数シード。

    Returns:
        介入ノードと結果ノード (delta_a, a, [delta_y0, y0], delta_y1, y1) と
        cluster_id の DataFrame。

    Raises:
        SpecError: 介入がシナリオと合わない場合。
    """
    intervention.check(spec.scenario)
    exo = draw_exogenous(spec, seed, n_rows=n_draws)
    state = evaluate(spec, exo, intervention)
    nodes = ["delta_a", "a"]
    if spec.scenario.has_baseline_outcome:
        nodes += ["delta_y0", "y0"]
    frame = pd.DataFrame({name: state[name] for name in nodes + ["delta_y1", "y1"]})
    frame[CLUSTER_COLUMN] = exo.cluster_ids
    return frame


# -- 厳密列挙 -----------------------------------------------------------------


_WEIGHT = "_w"
_LATENT = "_u"
_ROOT = "_root"


def _latent_table(spec: NpsemSpec) -> pd.DataFrame:
    """クラスタ潜在変数の求積点 (負荷がなければ U=0 の 1 点)。"""
    if not spec.has_latent:
        return pd.DataFrame({_LATENT: [0.0], _WEIGHT: [1.0], _ROOT: [0]})
    nodes, weights = np.polynomial.hermite.hermgauss(QUADRATURE_POINTS)
    return pd.DataFrame(
        {
            _LATENT: np.sqrt(2.0) * nodes,
            _WEIGHT: weights / np.sqrt(np.pi),
            _ROOT: 0,
        }
    )


def _expand_levels(
    table: pd.DataFrame, name: str, levels: tuple[str, ...], probs: tuple[float, ...]
) -> pd.DataFrame:
    parts: list[pd.DataFrame] = []
    for level, prob in zip(levels, probs, strict=True):
        part = table.copy()
        part[name] = level
        part[_WEIGHT] = part[_WEIGHT] * prob
        parts.append(part)
    return pd.concat(parts, ignore_index=True)


def _expand_binary(table: pd.DataFrame, name: str, p: FloatArray) -> pd.DataFrame:
    zero = table.copy()
    zero[name] = 0.0
    zero[_WEIGHT] = zero[_WEIGHT] * (1.0 - p)
    one = table.copy()
    one[name] = 1.0
    one[_WEIGHT] = one[_WEIGHT] * p
    expanded = pd.concat([zero, one], ignore_index=True)
    return expanded[expanded[_WEIGHT] > 0.0].reset_index(drop=True)


def _state(table: pd.DataFrame) -> dict[str, npt.NDArray[Any]]:
    return {str(column): table[column].to_numpy() for column in table.columns}


def joint_table(
    spec: NpsemSpec, intervention: InterventionSpec | None = None
) -> pd.DataFrame:
    """潜在変数・共変量・二値ノードの全組み合わせと同時確率の表を作る。

    Raises:
        SpecError: 連続共変量を含む spec の場合。
    """
    if not spec.discrete_exact:
        raise SpecError("exact enumeration requires discrete covariates")
    if intervention is not None:
        intervention.check(spec.scenario)
    table = _latent_table(spec)
    if spec.clusters.n_communities:
        community = _community_feature(spec.clusters.n_communities)
        share = 1.0 / spec.clusters.n_communities
        table = _expand_levels(
            table, community.name, community.levels, (share,) * len(community.levels)
        )

    def binary(
        node: NodeEquation, allowed: npt.NDArray[np.bool_] | None = None
    ) -> pd.DataFrame:
        state = _state(table)
        p = _probability(node.linear_predictor(state, table[_LATENT].to_numpy()))
        if allowed is not None:
            p = np.where(allowed, p, 0.0)
        return _expand_binary(table, node.name, p)

    def fixed(name: str, values: FloatArray | float) -> pd.DataFrame:
        table[name] = values
        return table

    for node in spec.l0:
        if node.kind == "categorical":
            table = _expand_levels(table, node.name, node.levels, node.probs)
        else:
            table = binary(node)

    scenario = spec.scenario
    equations = spec.equations
    if scenario is Scenario.S1 or intervention is not None:
        table = fixed("delta_a", 1.0)
    else:
        table = binary(equations["delta_a"])
    if intervention is not None:
        table = fixed("a", float(intervention.a))
    else:
        table = binary(equations["a"])
    if scenario.has_baseline_outcome:
        if intervention is not None:
            table = fixed("delta_y0", 1.0)
        else:
            table = binary(equations["delta_y0"])
        table = binary(equations["y0"])
    for node in spec.l1:
        table = binary(node)
    if scenario in (Scenario.S1, Scenario.S2):
        table = fixed("delta_y1", 1.0)
    elif intervention is None:
        allowed = None
        if scenario.has_baseline_outcome:
            allowed = ((table["delta_y0"] == 1.0) & (table["y0"] == 0.0)).to_numpy()
        table = binary(equations["delta_y1"], allowed)
    elif intervention.delta_y1_rule == "dynamic":
        table = fixed("delta_y1", 1.0 - table["y0"].to_numpy())
    else:
        table = fixed("delta_y1", 1.0)
    table = binary(equations["y1"])
    return table.reset_index(drop=True)


def _conditional_mean(
    table: pd.DataFrame, rows: pd.Series, keys: list[str], outcome: FloatArray
) -> pd.DataFrame:
    """rows の中で keys ごとの outcome の重み付き平均を返す (列 "q")。"""
    sub = table.loc[rows, keys].copy()
    weight = table.loc[rows, _WEIGHT].to_numpy()
    sub["_num"] = weight * outcome[rows.to_numpy()]
    sub["_den"] = weight
    grouped = sub.groupby(keys, observed=True)[["_num", "_den"]].sum()
    grouped["q"] = grouped["_num"] / grouped["_den"]
    return grouped[["q"]].reset_index()


def _predict(table: pd.DataFrame, means: pd.DataFrame, keys: list[str]) -> FloatArray:
    """keys で結合して各行に条件付き平均を割り当てる (該当なしは 0)。"""
    merged = table[keys].merge(means, on=keys, how="left")
    return merged["q"].fillna(0.0).to_numpy()


def _average(table: pd.DataFrame, values: FloatArray) -> float:
    weight = table[_WEIGHT].to_numpy()
    return float(np.sum(weight * values) / np.sum(weight))


def _gformula_levels(spec: NpsemSpec, table: pd.DataFrame, a: int) -> dict[str, float]:
    """観察分布の表から反復条件付き期待値を厳密に評価する。"""
    l0 = [_ROOT] + [f.name for f in spec.schema.l0]
    l1 = [f.name for f in spec.schema.l1]
    treated = (table["delta_a"] == 1.0) & (table["a"] == float(a))
    y1 = table["y1"].to_numpy()
    scenario = spec.scenario
    if scenario in (Scenario.S1, Scenario.S2):
        q = _predict(table, _conditional_mean(table, treated, l0, y1), l0)
        return {"psi": _average(table, q)}
    if scenario is Scenario.S3:
        measured = treated & (table["delta_y1"] == 1.0)
        means = _conditional_mean(table, measured, l0 + l1, y1)
        inner = _predict(table, means, l0 + l1)
        outer = _predict(table, _conditional_mean(table, treated, l0, inner), l0)
        return {"psi": _average(table, outer)}

    baseline = treated & (table["delta_y0"] == 1.0)
    at_risk = baseline & (table["y0"] == 0.0)
    measured = at_risk & (table["delta_y1"] == 1.0)
    y0 = table["y0"].to_numpy()
    inner = _predict(table, _conditional_mean(table, measured, l0 + l1, y1), l0 + l1)
    numerator_outcome = np.where(y0 == 0.0, inner, 0.0)
    numerator = _predict(
        table, _conditional_mean(table, baseline, l0, numerator_outcome), l0
    )
    prevalence = _predict(table, _conditional_mean(table, baseline, l0, y0), l0)
    num = _average(table, numerator)
    den = 1.0 - _average(table, prevalence)
    return {"numerator": num, "denominator": den, "conditional": num / den}


def _report(
    spec: NpsemSpec,
    a: int,
    method: Literal["exact", "monte_carlo"],
    kind: Literal["counterfactual", "gformula"],
    values: Mapping[str, float],
    mc_se: dict[str, float] | None = None,
) -> TruthReport:
    if spec.scenario.has_baseline_outcome:
        return TruthReport(
            scenario=spec.scenario,
            a=a,
            method=method,
            kind=kind,
            psi=values["conditional"],
            numerator=values["numerator"],
            denominator=values["denominator"],
            conditional=values["conditional"],
            mc_se=mc_se or {},
        )
    return TruthReport(spec.scenario, a, method, kind, values["psi"], mc_se=mc_se or {})


def gformula_exact(spec: NpsemSpec, a: int) -> TruthReport:
    """真の観察分布の下で、シナリオの統計的推定対象を厳密に評価する。

    Args:
        spec: 離散 NPSEM spec。
        a: 曝露水準。

    Returns:
        kind="gformula" の TruthReport。

    Raises:
        SpecError: 連続共変量を含む場合。
    """
    table = joint_table(spec)
    return _report(spec, a, "exact", "gformula", _gformula_levels(spec, table, a))


def _counterfactual_values(
    frame: pd.DataFrame, weight: FloatArray, scenario: Scenario
) -> dict[str, float]:
    total = np.sum(weight)
    y1 = frame["y1"].to_numpy()
    if not scenario.has_baseline_outcome:
        return {"psi": float(np.sum(weight * y1) / total)}
    at_risk = frame["y0"].to_numpy() == 0.0
    numerator = float(np.sum(weight * y1 * at_risk) / total)
    denominator = float(np.sum(weight * at_risk) / total)
    return {
        "numerator": numerator,
        "denominator": denominator,
        "conditional": numerator / denominator,
    }


def true_psi(
    spec: NpsemSpec,
    a: int,
    method: Literal["exact", "monte_carlo"] = "exact",
    n_draws: int = 1_000_000,
    seed: int = 0,
) -> TruthReport:
    """介入下の真の因果パラメータを計算する。

    exact は潜在変数を Gauss-Hermite 求積で離散化した全列挙、monte_carlo は
    sample_counterfactual による n_draws 行の標本平均 (SE は二項分布の式)。

    Args:
        spec: NPSEM spec。
        a: 曝露水準。
        method: "exact" または "monte_carlo"。
        n_draws: モンテカルロの行数。
        seed: モンテカルロの乱数シード。

    Returns:
        kind="counterfactual" の TruthReport。

    Raises:
        SpecError: exact で連続共変量を含む場合。
    """
    intervention = InterventionSpec.for_scenario(spec.scenario, a)
    if method == "exact":
        table = joint_table(spec, intervention)
        values = _counterfactual_values(
            table, table[_WEIGHT].to_numpy(), spec.scenario
        )
        return _report(spec, a, "exact", "counterfactual", values)

    frame = sample_counterfactual(spec, intervention, n_draws, seed)
    values = _counterfactual_values(frame, np.ones(len(frame)), spec.scenario)
    n = len(frame)

    def binomial_se(p: float, size: int) -> float:
        return math.sqrt(p * (1.0 - p) / size) if size > 0 else float("nan")

    if spec.scenario.has_baseline_outcome:
        at_risk = int(np.sum(frame["y0"].to_numpy() == 0.0))
        mc_se = {
            "numerator": binomial_se(values["numerator"], n),
            "denominator": binomial_se(values["denominator"], n),
            "conditional": binomial_se(values["conditional"], at_risk),
        }
    else:
        mc_se = {"psi": binomial_se(values["psi"], n)}
    return _report(spec, a, "monte_carlo", "counterfactual", values, mc_se)
