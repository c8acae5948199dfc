"""パッケージ共通の例外階層。

CLI はこれらの型を終了コードに対応付ける。
"""


class CounterfactualStrataError(Exception):
    """パッケージ内で送出される例外の基底クラス。"""


class DataFormatError(CounterfactualStrataError, ValueError):
    """CSV の列欠落・パース不能セル・未知のカテゴリ水準。"""

    def __init__(
        self, message: str, row: int | None = None, column: str | None = None
    ) -> None:
        location = ""
        if row is not None:
            location += f" (row {row}"
            location += f", column {column})" if column is not None else ")"
        elif column is not None:
            location = f" (column {column})"
        super().__init__(message + location)
        self.row = row
        self.column = column


class SpecError(CounterfactualStrataError, ValueError):
    """NPSEM 仕様や解析設定が不正。"""


class LearnerError(CounterfactualStrataError, RuntimeError):
    """学習器が与えられたタスクを当てはめられない。"""


class EstimationError(CounterfactualStrataError, RuntimeError):
    """推定量を計算できない (空の層、ゼロ分母など)。"""


class FluctuationError(EstimationError):
    """TMLE の揺らぎ (fluctuation) が収束しなかった。"""

    def __init__(self, level: str) -> None:
        super().__init__(f"fluctuation did not converge at level '{level}'")
        self.level = level


class ValidationFailedError(CounterfactualStrataError):
    """データセットがシナリオの構造検証に失敗した。"""
