"""Class-conditional Gaussian with tied covariance, used as a confidence score.

All arithmetic is float64 regardless of the feature dtype.
"""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg

from .errors import ConfigError, NumericError

logger = logging.getLogger(__name__)

RIDGE_SCALE = 1e-6


@dataclass(frozen=True)
class MahalanobisParams:
    means: np.ndarray        # (C, d)
    covariance: np.ndarray   # (d, d), before ridge
    ridge: float
    chol: np.ndarray         # lower Cholesky factor of covariance + ridge * I
    s_min: float
    s_max: float

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]


def _as_features(features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError(f"features must be (n, d), got shape {x.shape}")
    return x


def _class_distances(means: np.ndarray, chol: np.ndarray, x: np.ndarray) -> np.ndarray:
    if x.shape[1] != means.shape[1]:
        raise ValueError(f"feature dim {x.shape[1]} does not match fitted dim {means.shape[1]}")
    out = np.empty((x.shape[0], means.shape[0]))
    for c, mu in enumerate(means):
        z = linalg.solve_triangular(chol, (x - mu).T, lower=True)
        out[:, c] = np.einsum("ij,ij->j", z, z)
    return out


def fit(features, labels) -> MahalanobisParams:
    """Class means and pooled within-class covariance (divided by N).

    The ridge is 1e-6 * trace/d, falling back to 1e-6 when the scatter is zero.
    """
    x = _as_features(features)
    y = np.asarray(labels)
    if y.shape != (x.shape[0],):
        raise ValueError("labels must be a vector aligned with features")
    if not np.isfinite(x).all():
        raise NumericError("non-finite feature values")
    classes = np.unique(y)
    if classes.size == 0 or classes[0] < 0:
        raise ConfigError("labels must be nonnegative class indices")
    num_classes = int(classes[-1]) + 1
    means = np.zeros((num_classes, x.shape[1]))
    centered = np.empty_like(x)
    for c in range(num_classes):
        members = y == c
        if members.sum() < 2:
            raise ConfigError(f"class {c} has {int(members.sum())} examples; need at least 2")
        means[c] = x[members].mean(axis=0)
        centered[members] = x[members] - means[c]
    cov = centered.T @ centered / x.shape[0]
    cov = (cov + cov.T) / 2
    d = x.shape[1]
    scale = np.trace(cov) / d
    ridge = RIDGE_SCALE * (scale if scale > 0 else 1.0)
    chol = linalg.cholesky(cov + ridge * np.eye(d), lower=True)
    s = -_class_distances(means, chol, x).min(axis=1)
    return MahalanobisParams(means, cov, float(ridge), chol, float(s.min()), float(s.max()))


def class_distances(params: MahalanobisParams, features) -> np.ndarray:
    """(n, C) squared Mahalanobis distances to every class mean."""
    return _class_distances(params.means, params.chol, _as_features(features))


def score(params: MahalanobisParams, features) -> np.ndarray:
    """s_M = -min_c d(x, c); higher is more in-distribution."""
    return -class_distances(params, features).min(axis=1)


def normalize(params: MahalanobisParams, s) -> np.ndarray:
    """Map s_M to [0, 1], 1 at the fitting set's farthest point."""
    s = np.asarray(s, dtype=np.float64)
    span = params.s_max - params.s_min
    if span <= 0:
        logger.warning("degenerate Mahalanobis fit (s_max == s_min); normalized scores are 0")
        return np.zeros_like(s)
    return np.clip((params.s_max - s) / span, 0.0, 1.0)


def normalized_score(params: MahalanobisParams, features) -> np.ndarray:
    return normalize(params, score(params, features))


def save(params: MahalanobisParams, path: str | Path) -> None:
    buf = io.BytesIO()
    np.savez(buf, means=params.means, covariance=params.covariance, ridge=params.ridge,
             chol=params.chol, s_min=params.s_min, s_max=params.s_max)
    Path(path).write_bytes(buf.getvalue())


def load(path: str | Path) -> MahalanobisParams:
    with np.load(path) as z:
        return MahalanobisParams(z["means"], z["covariance"], float(z["ridge"]), z["chol"],
                                 float(z["s_min"]), float(z["s_max"]))
