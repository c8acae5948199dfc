"""影響曲線に基づく推論: クラスタ集約・標準誤差・デルタ法・Wald 区間。"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
from scipy.stats import norm

from counterfactual_strata.models import FloatArray

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClusterIc:
    """クラスタ単位の影響曲線 X_m = (M/N) Σ_{j∈m} D_mj。"""

    values: FloatArray
    clusters: npt.NDArray[np.str_]

    @property
    def m(self) -> int:
        """クラスタ数 M。"""
        return len(self.values)


@dataclass(frozen=True)
class LinearEstimate:
    """点推定値と参加者ごとの影響曲線の組。"""

    point: float
    ic: FloatArray


def aggregate_clusters(ic: FloatArray, cluster_ids: npt.NDArray[np.str_]) -> ClusterIc:
    """参加者の影響曲線をクラスタごとに集約する。

    Args:
        ic: 参加者ごとの影響曲線 (長さ N)。
        cluster_ids: 参加者ごとのクラスタ ID (長さ N)。

    Returns:
        ClusterIc。クラスタは ID の整列順。

    Raises:
        ValueError: 長さが合わない、ID が欠けている、または値が非有限の場合。
    """
    if len(ic) != len(cluster_ids):
        raise ValueError("cluster map must cover every participant")
    if len(ic) == 0:
        raise ValueError("influence curve is empty")
    if not np.all(np.isfinite(ic)):
        raise ValueError("influence curve has non-finite values")
    ids = np.asarray(cluster_ids).astype(str)
    if np.any((ids == "") | (ids == "NA")):
        raise ValueError("participant without a cluster id")
    clusters, inverse = np.unique(ids, return_inverse=True)
    sums = np.bincount(inverse, weights=ic, minlength=len(clusters))
    return ClusterIc(values=sums * len(clusters) / len(ic), clusters=clusters)


def ic_se(cluster_ic: ClusterIc) -> float:
    """クラスタ IC から標準誤差 sd(X_m)/√M を計算する (標本分散は M-1 で割る)。

    Raises:
        ValueError: M < 2 の場合。
    """
    if cluster_ic.m < 2:
        raise ValueError(f"at least 2 clusters are required, got {cluster_ic.m}")
    return float(np.std(cluster_ic.values, ddof=1) / math.sqrt(cluster_ic.m))


def wald_ci(point: float, se: float, level: float = 0.95) -> tuple[float, float]:
    """Wald 型信頼区間 point ± z·se。

    Raises:
        ValueError: level が (0, 1) の外、または se が負の場合。
    """
    if not 0.0 < level < 1.0:
        raise ValueError(f"confidence level must lie in (0, 1): {level}")
    if se < 0.0:
        raise ValueError(f"standard error must be non-negative: {se}")
    z = float(norm.ppf((1.0 + level) / 2.0))
    return point - z * se, point + z * se


def delta_method_ratio(num: LinearEstimate, den: LinearEstimate) -> LinearEstimate:
    """比 num/den の影響曲線: IC_num/den - (num/den²)·IC_den。

    Raises:
        ValueError: 分母が 0 の場合。
    """
    if den.point == 0.0:
        raise ValueError("ratio with a zero denominator")
    ic = num.ic / den.point - (num.point / den.point**2) * den.ic
    return LinearEstimate(num.point / den.point, ic)


def delta_method_log(est: LinearEstimate) -> LinearEstimate:
    """log(est) の影響曲線: IC/est。

    Raises:
        ValueError: 推定値が正でない場合。
    """
    if est.point <= 0.0:
        raise ValueError(f"log of a non-positive estimate: {est.point}")
    return LinearEstimate(math.log(est.point), est.ic / est.point)


def delta_method_difference(
    first: LinearEstimate, second: LinearEstimate
) -> LinearEstimate:
    """差 first - second の影響曲線。"""
    return LinearEstimate(first.point - second.point, first.ic - second.ic)


def delta_method_logit(est: LinearEstimate) -> LinearEstimate:
    """logit(est) の影響曲線: IC / (est(1-est))。

    Raises:
        ValueError: 推定値が (0, 1) の外の場合。
    """
    if not 0.0 < est.point < 1.0:
        raise ValueError(f"logit of an estimate outside (0, 1): {est.point}")
    scale = est.point * (1.0 - est.point)
    return LinearEstimate(math.log(est.point / (1.0 - est.point)), est.ic / scale)


@dataclass(frozen=True)
class IcSummary:
    """影響曲線から得た SE と区間。"""

    se: float
    ci_lo: float
    ci_hi: float
    m_clusters: int


def summarize_ic(
    point: float,
    ic: FloatArray,
    cluster_ids: npt.NDArray[np.str_],
    level: float = 0.95,
) -> IcSummary:
    """クラスタ頑健 SE と Wald 区間をまとめて計算する。"""
    cluster_ic = aggregate_clusters(ic, cluster_ids)
    se = ic_se(cluster_ic)
    lo, hi = wald_ci(point, se, level)
    return IcSummary(se=se, ci_lo=lo, ci_hi=hi, m_clusters=cluster_ic.m)
