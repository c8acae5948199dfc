"""共有テストフィクスチャ。"""

import copy
import json
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import pytest

from counterfactual_strata.data import Dataset, build_dataset
from counterfactual_strata.models import Feature, Scenario, Schema

S1_SPEC: dict[str, Any] = {
    "scenario": "S1",
    "l0": [{"name": "l0.x", "type": "binary", "intercept": 0.0}],
    "equations": {
        "a": {"intercept": -0.3, "coefficients": {"l0.x": 0.8}},
        "y1": {"intercept": -1.0, "coefficients": {"l0.x": 0.7, "a": 0.6}},
    },
    "clusters": {"n_clusters": 400, "size": 1},
}

S3_SPEC: dict[str, Any] = {
    "scenario": "S3",
    "l0": [{"name": "l0.x", "type": "binary", "intercept": 0.2}],
    "l1": [
        {
            "name": "l1.z",
            "type": "binary",
            "intercept": -0.4,
            "coefficients": {"l0.x": 0.5, "a": 0.6},
        }
    ],
    "equations": {
        "delta_a": {"intercept": 1.2, "coefficients": {"l0.x": -0.5}},
        "a": {"intercept": -0.2, "coefficients": {"l0.x": 0.6}},
        "delta_y1": {"intercept": 1.0, "coefficients": {"l1.z": -0.6}},
        "y1": {
            "intercept": -1.1,
            "coefficients": {"l0.x": 0.5, "a": 0.5, "l1.z": 0.7},
        },
    },
    "clusters": {"n_clusters": 300, "sizes": [1, 2], "probs": [0.5, 0.5]},
}

S4_SPEC: dict[str, Any] = {
    "scenario": "S4",
    "l0": [
        {"name": "l0.x", "type": "binary", "intercept": 0.0},
        {
            "name": "l0.site",
            "type": "categorical",
            "levels": ["north", "south"],
            "probs": [0.6, 0.4],
        },
    ],
    "l1": [
        {
            "name": "l1.z",
            "type": "binary",
            "intercept": -0.5,
            "coefficients": {"l0.x": 0.5, "a": 0.5},
        }
    ],
    "equations": {
        "delta_a": {"intercept": 1.5, "coefficients": {"l0.x": -0.5}},
        "a": {"intercept": -0.2, "coefficients": {"l0.x": 0.6, "l0.site=south": 0.3}},
        "delta_y0": {"intercept": 1.2, "coefficients": {"a": -0.3}},
        "y0": {"intercept": -1.5, "coefficients": {"l0.x": 0.5, "a": 0.4}},
        "delta_y1": {"intercept": 1.0, "coefficients": {"l1.z": -0.4}},
        "y1": {
            "intercept": -1.2,
            "coefficients": {"l0.x": 0.5, "a": 0.5, "l1.z": 0.6},
        },
    },
    "clusters": {"n_clusters": 300, "sizes": [1, 2, 3], "probs": [0.3, 0.4, 0.3]},
}


def write_spec(document: dict[str, Any], path: Path) -> Path:
    """spec を JSON ファイルに書き出す。"""
    path.write_text(json.dumps(document), encoding="utf-8")
    return path


@pytest.fixture
def s1_spec() -> dict[str, Any]:
    """曝露・結果が完全に観測される S1 の spec。"""
    return copy.deepcopy(S1_SPEC)


@pytest.fixture
def s3_spec() -> dict[str, Any]:
    """曝露と追跡結果が欠測する S3 の spec (世帯サイズ 1-2)。"""
    return copy.deepcopy(S3_SPEC)


@pytest.fixture
def s4_spec() -> dict[str, Any]:
    """6 ノードすべてを持つ S4 の spec (世帯サイズ 1-3)。"""
    return copy.deepcopy(S4_SPEC)


@pytest.fixture
def s4_spec_path(tmp_path: Path, s4_spec: dict[str, Any]) -> Path:
    """S4 spec の JSON ファイル。"""
    return write_spec(s4_spec, tmp_path / "s4.json")


@pytest.fixture
def s1_spec_path(tmp_path: Path, s1_spec: dict[str, Any]) -> Path:
    """S1 spec の JSON ファイル。"""
    return write_spec(s1_spec, tmp_path / "s1.json")


@pytest.fixture
def tiny_s4_dataset() -> Dataset:
    """手で組んだ 8 行の S4 データセット (4 世帯)。"""
    nan = np.nan
    frame = pd.DataFrame(
        {
            "l0.x": [0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0],
            "delta_a": [1, 1, 1, 1, 0, 1, 1, 1],
            "a": [1, 0, 1, 1, nan, 0, 1, 0],
            "delta_y0": [1, 1, 0, 1, 1, 1, 1, 1],
            "y0": [0, 0, nan, 1, 0, 0, 0, 0],
            "l1.z": [1.0, 0.0, nan, nan, 0.0, 1.0, 0.0, 1.0],
            "delta_y1": [1, 1, 0, 0, 1, 0, 1, 1],
            "y1": [1, 0, nan, nan, 0, nan, 0, 1],
            "cluster_id": ["h1", "h1", "h2", "h2", "h3", "h3", "h4", "h4"],
        }
    )
    schema = Schema(l0=(Feature("l0.x"),), l1=(Feature("l1.z"),))
    return build_dataset(frame, schema, Scenario.S4)
