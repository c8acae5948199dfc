"""シナリオ・設定・推定結果のデータクラス。"""

from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import Literal

import numpy as np
import numpy.typing as npt

FloatArray = npt.NDArray[np.float64]
FeatureKind = Literal["numeric", "categorical"]
Loss = Literal["nll", "squared_error"]
EstimatorName = Literal["cc", "ipw", "gcomp", "tmle"]
Misspecification = Literal["none", "g", "q", "both"]

ESTIMATOR_NAMES: tuple[EstimatorName, ...] = ("cc", "ipw", "gcomp", "tmle")


class Scenario(StrEnum):
    """観察データ構造のシナリオ。

    S1: 完全観測の点曝露、S2: 曝露欠測、S3: 曝露と追跡結果の欠測 (L1 あり)、
    S4: 曝露・ベースライン結果・追跡結果の欠測 (Counterfactual Strata)。
    """

    S1 = "S1"
    S2 = "S2"
    S3 = "S3"
    S4 = "S4"

    @property
    def has_baseline_outcome(self) -> bool:
        """delta_y0 / y0 列を持つか。"""
        return self is Scenario.S4

    @property
    def has_l1(self) -> bool:
        """時間依存共変量 L1 を持つか。"""
        return self in (Scenario.S3, Scenario.S4)


@dataclass(frozen=True)
class Feature:
    """共変量 1 つの宣言。"""

    name: str
    kind: FeatureKind = "numeric"
    levels: tuple[str, ...] = ()


@dataclass(frozen=True)
class Schema:
    """データセットの共変量スキーマ (L0 と L1)。"""

    l0: tuple[Feature, ...]
    l1: tuple[Feature, ...] = ()

    @property
    def features(self) -> tuple[Feature, ...]:
        """L0, L1 の順に並べた全共変量。"""
        return self.l0 + self.l1

    def feature(self, name: str) -> Feature:
        """名前から共変量宣言を引く。

        Raises:
            KeyError: 宣言されていない名前の場合。
        """
        for item in self.features:
            if item.name == name:
                return item
        raise KeyError(name)


@dataclass(frozen=True)
class ObservedRecord:
    """参加者 1 人分の観測レコード。None は NA、ABSENT 列も None。"""

    l0: dict[str, float | str | None]
    delta_a: int | None
    a: int | None
    delta_y0: int | None
    y0: int | None
    l1: dict[str, float | str | None] | None
    delta_y1: int | None
    y1: int | None
    cluster_id: str


@dataclass
class ValidationReport:
    """構造検証の結果。"""

    counts: dict[str, int] = field(default_factory=lambda: {})
    first_rows: dict[str, list[int]] = field(default_factory=lambda: {})

    @property
    def passed(self) -> bool:
        """全ルールの違反数がゼロなら True。"""
        return all(count == 0 for count in self.counts.values())


@dataclass(frozen=True)
class SuperLearnerConfig:
    """Super Learner の設定。"""

    folds: int = 10
    loss: Loss = "nll"
    library: tuple[str, ...] = ("mean", "glm", "hinge_spline")
    seed: int = 0
    max_terms: int = 10

    def __post_init__(self) -> None:
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if not self.library:
            raise ValueError("library must not be empty")


@dataclass(frozen=True)
class ScenarioSpec:
    """推定対象の指定。

    g_exclude / q_exclude は g-factor / Q-factor の調整集合から除く共変量
    (ベンチマークの誤特定スイッチ用)。
    """

    scenario: Scenario
    a: int = 1
    l0_features: tuple[str, ...] = ()
    l1_features: tuple[str, ...] = ()
    g_bounds: tuple[float, float] = (0.01, 0.99)
    g_exclude: tuple[str, ...] = ()
    q_exclude: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        lo, hi = self.g_bounds
        if not 0.0 < lo < hi < 1.0:
            raise ValueError(
                f"truncation bounds must satisfy 0 < lo < hi < 1: {lo}, {hi}"
            )
        if self.a not in (0, 1):
            raise ValueError(f"exposure level must be 0 or 1: {self.a}")


@dataclass
class FactorDiagnostics:
    """g-factor 1 つの正値性診断。"""

    g_min: float
    g_max: float
    n_truncated: int
    constant: bool = False


@dataclass
class Diagnostics:
    """推定量の診断情報。"""

    g_min: float | None = None
    g_max: float | None = None
    n_truncated: int = 0
    eic_mean: dict[str, float] = field(default_factory=lambda: {})
    epsilon: dict[str, float] = field(default_factory=lambda: {})
    factors: dict[str, FactorDiagnostics] = field(default_factory=lambda: {})


@dataclass
class EffectEstimate:
    """推定値・影響曲線・クラスタ頑健 SE・Wald 信頼区間。

    G-computation では influence_curve / se / ci_lo / ci_hi は None。
    """

    estimand: str
    estimator: str
    point: float
    influence_curve: FloatArray | None
    se: float | None
    ci_lo: float | None
    ci_hi: float | None
    n: int
    m_clusters: int
    diagnostics: Diagnostics = field(default_factory=Diagnostics)
    components: dict[str, "EffectEstimate"] = field(default_factory=lambda: {})


@dataclass
class ContrastResult:
    """曝露水準 a=1, a=0 の推定値と、それらの比・差。

    rr.se は log RR 尺度、odds_ratio.se は log OR 尺度の標準誤差。
    """

    estimator: str
    arm1: EffectEstimate
    arm0: EffectEstimate
    rr: EffectEstimate
    rd: EffectEstimate
    odds_ratio: EffectEstimate | None = None


@dataclass
class TruthReport:
    """シミュレータから得た真値 (反事実) または厳密 g-formula 値。"""

    scenario: Scenario
    a: int
    method: Literal["exact", "monte_carlo"]
    kind: Literal["counterfactual", "gformula"]
    psi: float
    numerator: float | None = None
    denominator: float | None = None
    conditional: float | None = None
    mc_se: dict[str, float] = field(default_factory=lambda: {})


@dataclass
class AnalysisConfig:
    """analyze サブコマンドの設定。"""

    data_path: Path
    scenario: Scenario
    output_path: Path
    l0_features: tuple[str, ...] = ()
    l1_features: tuple[str, ...] = ()
    estimators: tuple[EstimatorName, ...] = ESTIMATOR_NAMES
    sl_config: SuperLearnerConfig = field(default_factory=SuperLearnerConfig)
    g_bounds: tuple[float, float] = (0.01, 0.99)
    cluster_col: str = "cluster_id"
    seed: int = 0
    forest_path: Path | None = None
    command: str = ""


@dataclass
class BenchmarkConfig:
    """benchmark サブコマンドの設定。"""

    spec_path: Path
    output_path: Path
    replicates: int = 100
    cluster_counts: tuple[int, ...] = ()
    estimators: tuple[EstimatorName, ...] = ESTIMATOR_NAMES
    sl_config: SuperLearnerConfig = field(default_factory=SuperLearnerConfig)
    g_bounds: tuple[float, float] = (0.01, 0.99)
    misspecify: Misspecification = "none"
    drop_features: tuple[str, ...] = ()
    seed: int = 0
    max_workers: int | None = None
    truth_draws: int = 1_000_000
    command: str = ""

    def __post_init__(self) -> None:
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")


@dataclass
class EstimatorScore:
    """ベンチマークでの推定量 1 つ・クラスタ数 1 つの集計。

    bias / variance / mse は RR 尺度、coverage は RR の CI が真値を含む割合。
    coverage_iid はクラスタを無視した (参加者を独立とみなした) SE での割合。
    """

    estimator: str
    n_clusters: int
    replicates: int
    truth_rr: float
    mean_rr: float
    bias: float
    variance: float
    mse: float
    mc_se_bias: float
    coverage: float | None = None
    coverage_iid: float | None = None
    mean_ci_width: float | None = None
    arm_bias: dict[str, float] = field(default_factory=lambda: {})
    max_abs_eic_mean: float | None = None
    failures: list[int] = field(default_factory=lambda: [])


@dataclass
class BenchmarkSummary:
    """ベンチマーク全体の結果。"""

    scenario: Scenario
    replicates: int
    truth: list[TruthReport]
    scores: list[EstimatorScore] = field(default_factory=lambda: [])
    misspecify: Misspecification = "none"
    drop_features: list[str] = field(default_factory=lambda: [])
    seed: int = 0
    command: str = ""
