"""Counterfactual Strata.

欠測のある曝露・ベースライン結果・追跡結果とクラスタ依存を含む観察研究に対し、
complete-case / IPW / 逐次 G-computation / 逐次回帰 TMLE を提供する。
"""
