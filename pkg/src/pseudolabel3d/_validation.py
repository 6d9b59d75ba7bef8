"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .geometry import PointCloud


def check_points(X, *, min_samples: int = 1) -> np.ndarray:
    """Return ``X`` as a finite (N, 3) float64 array.

    Accepts a :class:`PointCloud`, an (N, 3) array, or an (N, >=3) array
    whose first three columns are coordinates.
    """
    if isinstance(X, PointCloud):
        X = X.xyz
    X = check_array(X, dtype=np.float64, ensure_min_samples=min_samples,
                    ensure_all_finite=True)
    if X.shape[1] < 3:
        raise ValueError(f"expected at least 3 coordinate columns, got {X.shape[1]}")
    return X[:, :3]


def check_unit_interval(name: str, value: float, *, open_low: bool = False) -> float:
    value = float(value)
    low_ok = value > 0 if open_low else value >= 0
    if not (low_ok and value <= 1):
        raise ValueError(f"{name} must lie in {'(' if open_low else '['}0, 1], got {value}")
    return value


def check_positive(name: str, value: float) -> float:
    value = float(value)
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value
