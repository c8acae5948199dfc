"""観察データモデル: CSV 入出力と構造検証。

欠測は CSV 上では文字列 "NA"、内部では pandas の nullable dtype (pd.NA) で表す。
カテゴリ共変量は学習器の境界 (design_matrix) で初めて one-hot 展開する。
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import numpy.typing as npt
import pandas as pd

from counterfactual_strata.errors import DataFormatError
from counterfactual_strata.models import (
    Feature,
    FloatArray,
    ObservedRecord,
    Scenario,
    Schema,
    ValidationReport,
)

logger = logging.getLogger(__name__)

NA = "NA"
CLUSTER_COLUMN = "cluster_id"
_FIRST_ROWS_LIMIT = 5

BoolArray = npt.NDArray[np.bool_]


def outcome_columns(scenario: Scenario) -> list[str]:
    """シナリオが持つ曝露・指標・結果列を並び順どおりに返す (L1 は含まない)。"""
    columns = ["delta_a", "a"]
    if scenario.has_baseline_outcome:
        columns += ["delta_y0", "y0"]
    return columns + ["delta_y1", "y1"]


def column_order(schema: Schema, scenario: Scenario) -> list[str]:
    """CSV の列順: L0, delta_a, a, [delta_y0, y0], [L1], delta_y1, y1, cluster_id。"""
    head = outcome_columns(scenario)
    split = 4 if scenario.has_baseline_outcome else 2
    l1 = [f.name for f in schema.l1] if scenario.has_l1 else []
    return (
        [f.name for f in schema.l0]
        + head[:split]
        + l1
        + head[split:]
        + [CLUSTER_COLUMN]
    )


@dataclass(frozen=True)
class Dataset:
    """不変の観察データセット。

    frame は列順 column_order() の DataFrame。cluster_id 列が独立単位を表す。
    構築後に frame を書き換えてはならない。
    """

    schema: Schema
    scenario: Scenario
    frame: pd.DataFrame

    @property
    def n(self) -> int:
        """参加者数 N。"""
        return len(self.frame)

    @cached_property
    def cluster_ids(self) -> npt.NDArray[np.str_]:
        """参加者ごとのクラスタ ID。"""
        return self.frame[CLUSTER_COLUMN].astype(str).to_numpy()

    @cached_property
    def cluster_index(self) -> dict[str, list[int]]:
        """クラスタ ID → レコード位置のリスト。"""
        index: dict[str, list[int]] = {}
        for row, cluster in enumerate(self.cluster_ids):
            index.setdefault(str(cluster), []).append(row)
        return index

    @property
    def n_clusters(self) -> int:
        """クラスタ数 M。"""
        return len(self.cluster_index)

    def values(self, column: str) -> FloatArray:
        """列を float 配列で返す (NA は NaN)。"""
        return self.frame[column].to_numpy(dtype=float, na_value=np.nan)

    def equals(self, column: str, value: int) -> BoolArray:
        """列が value に等しい行の真偽配列 (NA は False)。"""
        return self.values(column) == value

    @property
    def records(self) -> list[ObservedRecord]:
        """ObservedRecord のリストとして全レコードを返す。"""
        return [self._record(row) for row in range(self.n)]

    def _record(self, row: int) -> ObservedRecord:
        item = self.frame.iloc[row]

        def cell(column: str) -> int | None:
            value = item[column]
            return None if pd.isna(value) else int(value)

        def covariates(features: tuple[Feature, ...]) -> dict[str, float | str | None]:
            out: dict[str, float | str | None] = {}
            for feature in features:
                value = item[feature.name]
                if pd.isna(value):
                    out[feature.name] = None
                elif feature.kind == "categorical":
                    out[feature.name] = str(value)
                else:
                    out[feature.name] = float(value)
            return out

        baseline = self.scenario.has_baseline_outcome
        return ObservedRecord(
            l0=covariates(self.schema.l0),
            delta_a=cell("delta_a"),
            a=cell("a"),
            delta_y0=cell("delta_y0") if baseline else None,
            y0=cell("y0") if baseline else None,
            l1=covariates(self.schema.l1) if self.scenario.has_l1 else None,
            delta_y1=cell("delta_y1"),
            y1=cell("y1"),
            cluster_id=str(item[CLUSTER_COLUMN]),
        )


def build_dataset(frame: pd.DataFrame, schema: Schema, scenario: Scenario) -> Dataset:
    """型付け済みの列から Dataset を構築する。

    二値列は Int64、数値共変量は Float64、カテゴリ共変量は宣言水準の
    CategoricalDtype に揃える。

    Args:
        frame: column_order() の列を含む DataFrame。
        schema: 共変量スキーマ。
        scenario: シナリオ。

    Returns:
        構築済み Dataset。
    """
    typed = pd.DataFrame(index=pd.RangeIndex(len(frame)))
    for column in column_order(schema, scenario):
        if column == CLUSTER_COLUMN:
            typed[column] = frame[column].astype(str).to_numpy()
            continue
        try:
            feature = schema.feature(column)
        except KeyError:
            typed[column] = pd.Series(frame[column].to_numpy()).astype("Int64")
            continue
        if feature.kind == "categorical":
            dtype = pd.CategoricalDtype(list(feature.levels))
            typed[column] = pd.Series(frame[column].to_numpy(), dtype="object").astype(
                dtype
            )
        else:
            typed[column] = pd.Series(frame[column].to_numpy()).astype("Float64")
    return Dataset(schema=schema, scenario=scenario, frame=typed)


def _parse_binary(raw: pd.Series, column: str) -> pd.Series:
    """"0"/"1"/"NA" の列を Int64 に変換する。"""
    present = raw != NA
    parsed = pd.to_numeric(raw.where(present), errors="coerce")
    bad = present & ~parsed.isin([0, 1])
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataFormatError(f"unparseable binary cell '{raw.iloc[row]}'", row, column)
    return parsed.astype("Int64")


def _parse_numeric(raw: pd.Series, column: str) -> pd.Series:
    """数値共変量の列を Float64 に変換する。"""
    present = raw != NA
    parsed = pd.to_numeric(raw.where(present), errors="coerce")
    bad = present & parsed.isna()
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataFormatError(
            f"unparseable numeric cell '{raw.iloc[row]}'", row, column
        )
    return parsed.astype("Float64")


def _parse_categorical(raw: pd.Series, feature: Feature) -> pd.Series:
    """カテゴリ共変量の列を宣言水準で検査する。"""
    present = raw != NA
    bad = present & ~raw.isin(feature.levels)
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataFormatError(
            f"unknown categorical level '{raw.iloc[row]}'", row, feature.name
        )
    return raw.where(present)


def load_csv(
    path: Path,
    scenario: Scenario,
    schema: Schema,
    cluster_col: str = CLUSTER_COLUMN,
) -> Dataset:
    """CSV を読み込み Dataset を返す。

    S1 では delta_a 列、S1/S2 では delta_y1 列を省略でき、その場合は定数 1 とみなす。

    Args:
        path: CSV ファイルのパス (UTF-8, ヘッダ行あり)。
        scenario: シナリオ。
        schema: 共変量スキーマ。
        cluster_col: 独立単位として使う列名。

    Returns:
        ファイル順のレコードを持つ Dataset。

    Raises:
        OSError: ファイルを読めない場合。
        DataFormatError: 列欠落・パース不能セル・未知のカテゴリ水準。
    """
    raw = pd.read_csv(
        path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8"
    )
    optional: set[str] = set()
    if scenario is Scenario.S1:
        optional.add("delta_a")
    if scenario in (Scenario.S1, Scenario.S2):
        optional.add("delta_y1")

    parsed: dict[str, pd.Series] = {}
    for column in column_order(schema, scenario):
        source = cluster_col if column == CLUSTER_COLUMN else column
        if source not in raw.columns:
            if column in optional:
                parsed[column] = pd.Series(np.ones(len(raw), dtype=int)).astype("Int64")
                continue
            raise DataFormatError("missing column", column=source)
        values = raw[source]
        if column == CLUSTER_COLUMN:
            parsed[column] = values
            continue
        try:
            feature = schema.feature(column)
        except KeyError:
            parsed[column] = _parse_binary(values, column)
            continue
        if feature.kind == "categorical":
            parsed[column] = _parse_categorical(values, feature)
        else:
            parsed[column] = _parse_numeric(values, column)

    dataset = build_dataset(pd.DataFrame(parsed), schema, scenario)
    logger.info(
        "%d レコード, %d クラスタを読み込みました: %s",
        dataset.n,
        dataset.n_clusters,
        path,
    )
    return dataset


def write_csv(dataset: Dataset, path: Path) -> None:
    """Dataset を CSV に書き出す (欠測は "NA")。

    Args:
        dataset: 出力するデータセット。
        path: 出力先ファイルパス。
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset.frame.to_csv(path, index=False, na_rep=NA, lineterminator="\n")


def infer_schema(path: Path, scenario: Scenario) -> Schema:
    """CSV ヘッダと値からスキーマを推定する。

    "l0." / "l1." で始まる列を共変量とみなし、NA 以外の全値が数値として
    読めれば numeric、そうでなければ出現水準を整列した categorical とする。

    Args:
        path: CSV ファイルのパス。
        scenario: シナリオ (L1 を持たないシナリオでは l1.* 列を無視する)。

    Returns:
        推定したスキーマ。
    """
    raw = pd.read_csv(
        path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8"
    )

    def declare(column: str) -> Feature:
        values = raw[column][raw[column] != NA]
        numeric = pd.to_numeric(values, errors="coerce")
        if numeric.notna().all():
            return Feature(column)
        return Feature(column, "categorical", tuple(sorted(values.unique())))

    l0 = tuple(declare(c) for c in raw.columns if c.startswith("l0."))
    l1 = tuple(declare(c) for c in raw.columns if c.startswith("l1."))
    return Schema(l0=l0, l1=l1 if scenario.has_l1 else ())


def design_matrix(dataset: Dataset, features: tuple[str, ...]) -> FloatArray:
    """共変量を学習器向けの数値行列 (N × p) に展開する。

    カテゴリ共変量は先頭水準を参照とした one-hot 列に展開し、NA は NaN になる。

    Args:
        dataset: データセット。
        features: 展開する共変量名。

    Returns:
        切片を含まない設計行列。
    """
    columns: list[FloatArray] = []
    for name in features:
        feature = dataset.schema.feature(name)
        if feature.kind != "categorical":
            columns.append(dataset.values(name))
            continue
        series = dataset.frame[name]
        missing = series.isna().to_numpy()
        for level in feature.levels[1:]:
            column = (series == level).to_numpy(dtype=float, na_value=0.0)
            column[missing] = np.nan
            columns.append(column)
    if not columns:
        return np.empty((dataset.n, 0))
    return np.column_stack(columns)


def _count(report: ValidationReport, rule: str, mask: BoolArray) -> None:
    """違反マスクをレポートに記録する。"""
    rows = np.flatnonzero(mask)
    report.counts[rule] = len(rows)
    report.first_rows[rule] = [int(r) for r in rows[:_FIRST_ROWS_LIMIT]]


def _measurement_rule(dataset: Dataset, indicator: str, value: str) -> BoolArray:
    """delta=0 なのに値がある、または delta=1 なのに値が NA の行。"""
    delta = dataset.values(indicator)
    missing = np.isnan(dataset.values(value))
    return ((delta == 0) & ~missing) | ((delta == 1) & missing)


def validate(dataset: Dataset) -> ValidationReport:
    """ObservedRecord / Dataset の不変条件を検査する。

    違反はエラーではなくレポートとして返す。

    Args:
        dataset: 検査対象。

    Returns:
        ルールごとの違反数と先頭の違反行を持つ ValidationReport。
    """
    report = ValidationReport()
    scenario = dataset.scenario
    indicators = ["delta_a", "delta_y1"]
    if scenario.has_baseline_outcome:
        indicators.insert(1, "delta_y0")

    missing_indicator = np.zeros(dataset.n, dtype=bool)
    for indicator in indicators:
        missing_indicator |= np.isnan(dataset.values(indicator))
    _count(report, "indicator_missing", missing_indicator)

    _count(report, "delta_a_consistency", _measurement_rule(dataset, "delta_a", "a"))
    if scenario.has_baseline_outcome:
        _count(
            report,
            "delta_y0_consistency",
            _measurement_rule(dataset, "delta_y0", "y0"),
        )
    _count(
        report, "delta_y1_consistency", _measurement_rule(dataset, "delta_y1", "y1")
    )

    if scenario.has_baseline_outcome:
        at_risk = dataset.equals("delta_y0", 1) & dataset.equals("y0", 0)
        _count(
            report,
            "follow_up_at_risk",
            dataset.equals("delta_y1", 1) & ~at_risk,
        )

    absent = np.zeros(dataset.n, dtype=bool)
    if scenario is Scenario.S1:
        absent |= ~dataset.equals("delta_a", 1)
    if scenario in (Scenario.S1, Scenario.S2):
        absent |= ~dataset.equals("delta_y1", 1)
    _count(report, "absent_indicator", absent & ~missing_indicator)

    l0_missing = np.zeros(dataset.n, dtype=bool)
    for feature in dataset.schema.l0:
        l0_missing |= dataset.frame[feature.name].isna().to_numpy()
    _count(report, "l0_missing", l0_missing)

    if scenario.has_l1:
        l1_missing = np.zeros(dataset.n, dtype=bool)
        for feature in dataset.schema.l1:
            l1_missing |= dataset.frame[feature.name].isna().to_numpy()
        if scenario.has_baseline_outcome:
            # ΔY0=0 の行の L1 はどの回帰にも入らない
            l1_missing &= dataset.equals("delta_y0", 1) & dataset.equals("y0", 0)
        _count(report, "l1_missing", l1_missing)

    clusters = dataset.frame[CLUSTER_COLUMN].astype(str)
    _count(report, "cluster_missing", clusters.isin(["", NA]).to_numpy())

    if not report.passed:
        logger.warning(
            "検証違反: %s",
            ", ".join(f"{k}={v}" for k, v in report.counts.items() if v),
        )
    return report
