"""二値回帰の学習器と Super Learner。

学習器はいずれも確率 (0, 1) を返すロジスティック型で、結果変数は
[0, 1] の連続値 (逐次回帰の内側予測値) も受け付ける。
"""

import functools
import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import numpy.typing as npt
from scipy.optimize import nnls
from scipy.special import expit, logit

from counterfactual_strata.errors import LearnerError
from counterfactual_strata.models import FloatArray, Loss, SuperLearnerConfig

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
SEPARATION_RIDGE = 1e-4
COEF_LIMIT = 50.0
SCORE_TOL = 1e-8
MAX_IRLS_ITER = 100
META_TOL = 1e-10
MAX_META_ITER = 100_000
_DECILES = np.linspace(0.1, 0.9, 9)

LEARNER_NAMES = ("mean", "glm", "glm_interactions", "hinge_spline", "strata")


def clamp(p: FloatArray) -> FloatArray:
    """確率を [1e-12, 1 - 1e-12] に収める。"""
    return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)


@dataclass(frozen=True)
class RegressionTask:
    """回帰タスク: 設計行列・結果・重み・クラスタ。"""

    design: FloatArray
    outcome: FloatArray
    weights: FloatArray
    cluster_ids: npt.NDArray[np.str_]

    def __post_init__(self) -> None:
        n = len(self.outcome)
        if self.design.shape[0] != n or len(self.weights) != n:
            raise LearnerError("design, outcome and weights must have equal length")
        if len(self.cluster_ids) != n:
            raise LearnerError("cluster map must cover every row")
        if not np.all(np.isfinite(self.outcome)) or np.any(
            (self.outcome < 0.0) | (self.outcome > 1.0)
        ):
            raise LearnerError("outcomes must lie in [0, 1]")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0.0):
            raise LearnerError("weights must be finite and non-negative")
        if not np.any(self.weights > 0.0):
            raise LearnerError("weights are all zero")

    @classmethod
    def unweighted(
        cls,
        design: FloatArray,
        outcome: FloatArray,
        cluster_ids: npt.NDArray[np.str_],
    ) -> "RegressionTask":
        """重み 1 のタスクを作る。"""
        return cls(design, outcome, np.ones(len(outcome)), cluster_ids)

    @property
    def n(self) -> int:
        """行数。"""
        return len(self.outcome)

    def subset(self, rows: npt.NDArray[np.bool_]) -> "RegressionTask":
        """行を絞り込んだタスクを返す。"""
        return RegressionTask(
            self.design[rows],
            self.outcome[rows],
            self.weights[rows],
            self.cluster_ids[rows],
        )


@dataclass(frozen=True)
class HingeTerm:
    """ヒンジ基底 max(x_j - t, 0) (direction=+1) または max(t - x_j, 0) (-1)。"""

    feature: int
    knot: float
    direction: int

    def evaluate(self, design: FloatArray) -> FloatArray:
        """設計行列から基底列を計算する。"""
        x = design[:, self.feature]
        return np.maximum(self.direction * (x - self.knot), 0.0)


@dataclass(frozen=True)
class Expansion:
    """生の共変量から基底行列 (切片を含む) を作る規則。"""

    main_terms: bool = True
    interactions: bool = False
    hinges: tuple[HingeTerm, ...] = ()

    def build(self, design: FloatArray) -> FloatArray:
        """基底行列を作る。先頭列は切片。"""
        columns = [np.ones((design.shape[0], 1))]
        if self.main_terms:
            columns.append(design)
        if self.interactions:
            pairs = list(combinations(range(design.shape[1]), 2))
            if pairs:
                columns.append(
                    np.column_stack([design[:, i] * design[:, j] for i, j in pairs])
                )
        if self.hinges:
            columns.append(np.column_stack([h.evaluate(design) for h in self.hinges]))
        return np.hstack(columns)


@dataclass(frozen=True)
class FittedModel:
    """当てはめ済みの学習器。"""

    learner: str
    coefficients: FloatArray
    expansion: Expansion = field(default_factory=Expansion)

    def predict(self, design: FloatArray) -> FloatArray:
        """確率を予測する (クランプ済み)。"""
        eta = self.expansion.build(design) @ self.coefficients
        return clamp(expit(eta))


@dataclass(frozen=True)
class IrlsResult:
    """IRLS の結果。"""

    coefficients: FloatArray
    converged: bool
    iterations: int


def irls(
    basis: FloatArray,
    outcome: FloatArray,
    weights: FloatArray,
    offset: FloatArray | None = None,
    ridge: float = 0.0,
    tol: float = SCORE_TOL,
    max_iter: int = MAX_IRLS_ITER,
    start: FloatArray | None = None,
) -> IrlsResult:
    """重み付きロジスティック尤度を IRLS (Newton 法) で最大化する。

    ridge は切片 (先頭列) 以外の係数に L2 罰則をかける。max |score| < tol で収束。

    Args:
        basis: 基底行列 (先頭列が切片)。
        outcome: [0, 1] の結果。
        weights: 観測重み。
        offset: ロジット尺度のオフセット。
        ridge: L2 罰則の強さ。
        tol: スコアの収束閾値。
        max_iter: 最大反復回数。
        start: 初期係数。

    Returns:
        IrlsResult。係数が非有限になった場合は converged=False。

    Raises:
        numpy.linalg.LinAlgError: ヘッセ行列が特異な場合。
    """
    n_coef = basis.shape[1]
    beta = np.zeros(n_coef) if start is None else start.astype(float).copy()
    eta_offset = np.zeros(len(outcome)) if offset is None else offset
    penalty = np.full(n_coef, ridge)
    penalty[0] = 0.0
    for iteration in range(max_iter + 1):
        mu = expit(basis @ beta + eta_offset)
        score = basis.T @ (weights * (outcome - mu)) - penalty * beta
        if not np.all(np.isfinite(score)):
            return IrlsResult(beta, False, iteration)
        if np.max(np.abs(score), initial=0.0) < tol:
            return IrlsResult(beta, True, iteration)
        if iteration == max_iter:
            break
        curvature = weights * mu * (1.0 - mu)
        hessian = basis.T @ (basis * curvature[:, None]) + np.diag(penalty)
        beta = beta + np.linalg.solve(hessian, score)
        if not np.all(np.isfinite(beta)):
            return IrlsResult(beta, False, iteration)
    return IrlsResult(beta, False, max_iter)


def _weighted_mean(task: RegressionTask) -> float:
    return float(np.average(task.outcome, weights=task.weights))


def _constant_outcome(task: RegressionTask) -> float | None:
    """重み正の行で結果が一定ならその値を返す。"""
    observed = task.outcome[task.weights > 0.0]
    if np.all(observed == observed[0]):
        return float(observed[0])
    return None


def fit_mean(task: RegressionTask) -> FittedModel:
    """重み付き平均を定数予測する。

    Args:
        task: 回帰タスク。

    Returns:
        予測が常に重み付き平均 (クランプ済み) の FittedModel。
    """
    value = float(clamp(np.array(_weighted_mean(task))))
    return FittedModel("mean", np.array([float(logit(value))]), Expansion(False))


def _check_finite(task: RegressionTask) -> None:
    if not np.all(np.isfinite(task.design)):
        raise LearnerError("non-finite feature values")


def _fit_expansion(
    learner: str,
    task: RegressionTask,
    expansion: Expansion,
    ridge: float,
    start: FloatArray | None = None,
) -> FittedModel:
    """基底展開を固定してロジスティック GLM を当てはめる。

    分離・特異で失敗した場合は ridge=1e-4 で当てはめ直す。
    """
    basis = expansion.build(task.design)
    result: IrlsResult | None = None
    try:
        result = irls(basis, task.outcome, task.weights, ridge=ridge, start=start)
    except np.linalg.LinAlgError:
        result = None
    failed = (
        result is None
        or not result.converged
        or np.max(np.abs(result.coefficients)) > COEF_LIMIT
    )
    if failed and ridge < SEPARATION_RIDGE:
        logger.warning(
            "%s: 分離または特異のため ridge=%g で再推定", learner, SEPARATION_RIDGE
        )
        try:
            result = irls(basis, task.outcome, task.weights, ridge=SEPARATION_RIDGE)
        except np.linalg.LinAlgError as err:
            raise LearnerError(f"{learner}: singular design") from err
        failed = not result.converged
    if failed or result is None:
        raise LearnerError(f"{learner}: IRLS did not converge")
    return FittedModel(learner, result.coefficients, expansion)


def fit_logistic_glm(
    task: RegressionTask, ridge: float = 0.0, interactions: bool = False
) -> FittedModel:
    """主効果 (と必要なら 2 次交互作用) のロジスティック回帰を IRLS で当てはめる。

    結果が一定の場合は切片のみのモデル (クランプ済み定数) を返す。

    Args:
        task: 回帰タスク。
        ridge: L2 罰則 (切片以外)。
        interactions: 2 次交互作用項を加えるか。

    Returns:
        FittedModel。

    Raises:
        LearnerError: 特徴量が非有限、または罰則付きでも収束しない場合。
    """
    _check_finite(task)
    learner = "glm_interactions" if interactions else "glm"
    expansion = Expansion(main_terms=True, interactions=interactions)
    constant = _constant_outcome(task)
    if constant is not None:
        return _intercept_only(learner, constant, expansion, task.design.shape[1])
    return _fit_expansion(learner, task, expansion, ridge)


def _intercept_only(
    learner: str, value: float, expansion: Expansion, n_features: int
) -> FittedModel:
    """特徴量の係数を 0 とした定数モデル。"""
    n_coef = expansion.build(np.zeros((1, n_features))).shape[1]
    coefficients = np.zeros(n_coef)
    coefficients[0] = float(logit(clamp(np.array(value))))
    return FittedModel(learner, coefficients, expansion)


def _mean_nll(pred: FloatArray, outcome: FloatArray, weights: FloatArray) -> float:
    """重み付き平均負対数尤度。"""
    p = clamp(pred)
    terms = outcome * np.log(p) + (1.0 - outcome) * np.log1p(-p)
    return float(-np.sum(weights * terms) / np.sum(weights))


def risk(
    pred: FloatArray, outcome: FloatArray, weights: FloatArray, loss: Loss
) -> float:
    """予測の重み付き平均損失。"""
    if loss == "nll":
        return _mean_nll(pred, outcome, weights)
    return float(np.sum(weights * (outcome - pred) ** 2) / np.sum(weights))


def _hinge_candidates(task: RegressionTask) -> list[HingeTerm]:
    """十分位点をノットとするヒンジ候補。"""
    active = task.weights > 0.0
    candidates: list[HingeTerm] = []
    for j in range(task.design.shape[1]):
        x = task.design[active, j]
        for knot in np.unique(np.quantile(x, _DECILES)):
            for direction in (1, -1):
                term = HingeTerm(j, float(knot), direction)
                column = term.evaluate(task.design)[active]
                if np.ptp(column) > 0.0:
                    candidates.append(term)
    return candidates


def fit_hinge_spline(task: RegressionTask, max_terms: int = 10) -> FittedModel:
    """ヒンジ基底の前向き段階選択 (枝刈りなし)。

    各段で全候補を主効果 GLM に追加して当てはめ、標本内損失を最も下げる
    ヒンジを採用する。改善がなくなるか max_terms に達したら終了する。

    Args:
        task: 回帰タスク (20 行以上)。
        max_terms: 追加するヒンジの最大数。

    Returns:
        FittedModel。

    Raises:
        LearnerError: 行数が 20 未満の場合。
    """
    if task.n < 20:
        raise LearnerError(f"hinge_spline needs at least 20 rows, got {task.n}")
    _check_finite(task)
    base = Expansion(main_terms=True)
    constant = _constant_outcome(task)
    if constant is not None:
        return _intercept_only("hinge_spline", constant, base, task.design.shape[1])

    model = _fit_expansion("hinge_spline", task, base, ridge=0.0)
    current = _mean_nll(model.predict(task.design), task.outcome, task.weights)
    remaining = _hinge_candidates(task)
    for _ in range(max_terms):
        best: tuple[float, FittedModel, HingeTerm] | None = None
        start = np.append(model.coefficients, 0.0)
        for term in remaining:
            expansion = Expansion(
                main_terms=True, hinges=model.expansion.hinges + (term,)
            )
            try:
                candidate = _fit_expansion(
                    "hinge_spline", task, expansion, ridge=0.0, start=start
                )
            except LearnerError:
                continue
            loss = _mean_nll(candidate.predict(task.design), task.outcome, task.weights)
            if best is None or loss < best[0]:
                best = (loss, candidate, term)
        if best is None or best[0] >= current - SCORE_TOL:
            break
        current, model = best[0], best[1]
        remaining.remove(best[2])
    logger.debug("hinge_spline: %d 項を選択", len(model.expansion.hinges))
    return model


def _stratum_index(design: FloatArray) -> tuple[FloatArray, npt.NDArray[np.int_]]:
    """設計行列の相異なる行 (層) と、各行の層番号。"""
    if design.shape[1] == 0:
        return np.empty((1, 0)), np.zeros(design.shape[0], dtype=int)
    keys, inverse = np.unique(design, axis=0, return_inverse=True)
    return keys, inverse.reshape(-1)


@dataclass(frozen=True)
class StrataModel:
    """共変量の層ごとの重み付き平均 (非パラメトリック最尤推定)。

    学習時に現れなかった層には全体の重み付き平均を返す。
    """

    learner: str
    keys: FloatArray
    means: FloatArray
    fallback: float

    def predict(self, design: FloatArray) -> FloatArray:
        """層平均を予測する (クランプ済み)。"""
        if design.shape[1] == 0:
            return clamp(np.full(design.shape[0], self.means[0]))
        _, inverse = _stratum_index(np.vstack([self.keys, design]))
        lookup = np.full(int(inverse.max()) + 1, self.fallback)
        lookup[inverse[: len(self.keys)]] = self.means
        return clamp(lookup[inverse[len(self.keys) :]])


def fit_strata(task: RegressionTask) -> StrataModel:
    """設計行列の相異なる行ごとに結果の重み付き平均をとる。

    共変量がすべて離散なら飽和モデルになる。
    """
    _check_finite(task)
    keys, inverse = _stratum_index(task.design)
    totals = np.bincount(inverse, weights=task.weights, minlength=len(keys))
    sums = np.bincount(
        inverse, weights=task.weights * task.outcome, minlength=len(keys)
    )
    fallback = _weighted_mean(task)
    means = np.full(len(keys), fallback)
    np.divide(sums, totals, out=means, where=totals > 0.0)
    logger.debug("strata: %d 層", len(keys))
    return StrataModel("strata", keys, means, fallback)


Model = FittedModel | StrataModel


def assign_folds(
    cluster_ids: npt.NDArray[np.str_], folds: int, seed: int
) -> npt.NDArray[np.int_]:
    """クラスタ単位で V 分割の fold を割り当てる。

    クラスタ (ID の整列順) を seed でシャッフルし、fold に順番に配る。

    Args:
        cluster_ids: 行ごとのクラスタ ID。
        folds: fold 数 V。
        seed: 乱数シード。

    Returns:
        行ごとの fold 番号 (0..V-1)。

    Raises:
        ValueError: V がクラスタ数を超える場合。
    """
    unique, inverse = np.unique(cluster_ids, return_inverse=True)
    if folds > len(unique):
        raise ValueError(f"V={folds} exceeds the number of clusters ({len(unique)})")
    order = np.random.default_rng(seed).permutation(len(unique))
    cluster_fold = np.empty(len(unique), dtype=int)
    cluster_fold[order] = np.arange(len(unique)) % folds
    return cluster_fold[inverse]


@dataclass(frozen=True)
class EnsembleModel:
    """Super Learner の当てはめ結果。"""

    learners: tuple[str, ...]
    models: tuple[Model, ...]
    weights: FloatArray
    cv_risk: dict[str, float]
    ensemble_cv_risk: float

    def predict(self, design: FloatArray) -> FloatArray:
        """凸結合した予測 (クランプ済み)。"""
        pred = np.zeros(design.shape[0])
        for weight, model in zip(self.weights, self.models, strict=True):
            if weight > 0.0:
                pred += weight * model.predict(design)
        return clamp(pred)


Learner = Callable[[RegressionTask], Model]


def build_library(config: SuperLearnerConfig) -> dict[str, Learner]:
    """設定の文字列 ID から学習器を組み立てる。

    Raises:
        ValueError: 未知の学習器 ID。
    """
    registry: dict[str, Learner] = {
        "mean": fit_mean,
        "glm": fit_logistic_glm,
        "glm_interactions": functools.partial(fit_logistic_glm, interactions=True),
        "hinge_spline": functools.partial(fit_hinge_spline, max_terms=config.max_terms),
        "strata": fit_strata,
    }
    unknown = [name for name in config.library if name not in registry]
    if unknown:
        raise ValueError(f"unknown learners: {', '.join(unknown)}")
    return {name: registry[name] for name in config.library}


def project_to_simplex(v: FloatArray) -> FloatArray:
    """ユークリッド射影で確率単体 {α ≥ 0, Σα = 1} に写す。"""
    u = np.sort(v)[::-1]
    cumulative = np.cumsum(u) - 1.0
    ranks = np.arange(1, len(v) + 1)
    rho = np.flatnonzero(u - cumulative / ranks > 0.0)[-1]
    theta = cumulative[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def _vertex(index: int, size: int) -> FloatArray:
    alpha = np.zeros(size)
    alpha[index] = 1.0
    return alpha


def _nll_weights(z: FloatArray, outcome: FloatArray, weights: FloatArray) -> FloatArray:
    """単体上で CV 負対数尤度を射影勾配法で最小化する。

    最良の頂点から出発し、Armijo のバックトラックで損失を単調に下げる。
    Frank-Wolfe 双対ギャップが 1e-10 未満で停止。
    """
    total = np.sum(weights)

    def objective(alpha: FloatArray) -> float:
        return _mean_nll(z @ alpha, outcome, weights)

    def gradient(alpha: FloatArray) -> FloatArray:
        p = clamp(z @ alpha)
        dp = -(outcome / p - (1.0 - outcome) / (1.0 - p))
        return z.T @ (weights * dp) / total

    vertex_risk = [objective(_vertex(k, z.shape[1])) for k in range(z.shape[1])]
    alpha = _vertex(int(np.argmin(vertex_risk)), z.shape[1])
    value = objective(alpha)
    step = 1.0
    for _ in range(MAX_META_ITER):
        grad = gradient(alpha)
        if float(grad @ alpha - np.min(grad)) < META_TOL:
            break
        while step > 1e-20:
            candidate = project_to_simplex(alpha - step * grad)
            move = candidate - alpha
            candidate_value = objective(candidate)
            if candidate_value <= value + grad @ move + (move @ move) / (2.0 * step):
                break
            step /= 2.0
        else:
            break
        if candidate_value >= value:
            break
        alpha, value = candidate, candidate_value
        step *= 2.0
    return alpha


def _squared_error_weights(
    z: FloatArray, outcome: FloatArray, weights: FloatArray
) -> FloatArray:
    """非負最小二乗の解を正規化する。頂点の方が良ければ頂点を採る。"""
    root = np.sqrt(weights)
    alpha, _ = nnls(z * root[:, None], outcome * root)
    vertex_risk = [
        risk(z[:, k], outcome, weights, "squared_error") for k in range(z.shape[1])
    ]
    best_vertex = _vertex(int(np.argmin(vertex_risk)), z.shape[1])
    if np.sum(alpha) <= 0.0:
        return best_vertex
    alpha = alpha / np.sum(alpha)
    if risk(z @ alpha, outcome, weights, "squared_error") > min(vertex_risk):
        return best_vertex
    return alpha


def solve_weights(
    z: FloatArray, outcome: FloatArray, weights: FloatArray, loss: Loss
) -> FloatArray:
    """CV 予測行列 Z に対するメタ学習器の単体制約付き重み。"""
    if z.shape[1] == 1:
        return np.ones(1)
    if loss == "nll":
        alpha = _nll_weights(z, outcome, weights)
    else:
        alpha = _squared_error_weights(z, outcome, weights)
    alpha = np.maximum(alpha, 0.0)
    return alpha / np.sum(alpha)


def superlearner_fit(task: RegressionTask, config: SuperLearnerConfig) -> EnsembleModel:
    """クラスタを尊重した V 分割 CV による Super Learner。

    各 fold で学習器を fold 外で学習し fold 内を予測して CV 予測行列 Z を作り、
    単体上で損失を最小化する重み α を求め、全データで学習し直す。
    いずれかの fold か全データで失敗した学習器は、CV 予測列が揃わないため
    警告のうえ除外し、残りで重みを解き直す。

    Args:
        task: 回帰タスク。
        config: Super Learner 設定。

    Returns:
        EnsembleModel。

    Raises:
        LearnerError: 全ての学習器が失敗した場合、またはクラスタが 2 未満で
            複数学習器の CV ができない場合。
    """
    library = build_library(config)
    names = list(library)
    n_clusters = len(np.unique(task.cluster_ids))
    folds_v = min(config.folds, n_clusters)
    if folds_v < 2 and len(names) > 1:
        raise LearnerError("cross-validation needs at least 2 clusters")
    if folds_v < config.folds:
        logger.warning(
            "クラスタ数 %d に合わせて V を %d に下げました", n_clusters, folds_v
        )

    z = np.full((task.n, len(names)), np.nan)
    failed: set[str] = set()
    if folds_v >= 2:
        fold_of = assign_folds(task.cluster_ids, folds_v, config.seed)
        for fold in range(folds_v):
            train = fold_of != fold
            for k, name in enumerate(names):
                if name in failed:
                    continue
                try:
                    model = library[name](task.subset(train))
                except LearnerError:
                    logger.warning(
                        "学習器 %s が fold %d で失敗したため除外します", name, fold
                    )
                    failed.add(name)
                    continue
                z[~train, k] = model.predict(task.design[~train])

    fitted: dict[str, Model] = {}
    for name in names:
        if name in failed:
            continue
        try:
            fitted[name] = library[name](task)
        except LearnerError:
            logger.warning("学習器 %s が全データで失敗したため除外します", name)
            failed.add(name)

    kept = [k for k, name in enumerate(names) if name not in failed]
    if not kept:
        raise LearnerError("every learner in the library failed")
    kept_names = tuple(names[k] for k in kept)
    if folds_v < 2:
        weights = np.ones(1)
        cv_risk: dict[str, float] = {}
        ensemble_risk = float("nan")
    else:
        zk = z[:, kept]
        weights = solve_weights(zk, task.outcome, task.weights, config.loss)
        cv_risk = {
            names[k]: risk(z[:, k], task.outcome, task.weights, config.loss)
            for k in kept
        }
        ensemble_risk = risk(zk @ weights, task.outcome, task.weights, config.loss)
    logger.debug(
        "Super Learner 重み: %s",
        ", ".join(f"{n}={w:.3f}" for n, w in zip(kept_names, weights, strict=True)),
    )
    return EnsembleModel(
        learners=kept_names,
        models=tuple(fitted[name] for name in kept_names),
        weights=weights,
        cv_risk=cv_risk,
        ensemble_cv_risk=ensemble_risk,
    )
