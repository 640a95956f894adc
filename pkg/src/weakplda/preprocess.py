"""Centering, whitening and length normalization of i-vectors.

The pipeline order is fixed: subtract the mean, optionally whiten, then
scale to unit length.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

MAX_CONDITION = 1e12
NORM_FLOOR = 1e-12


class DegenerateVectorError(ValueError):
    """A vector's norm is too small to define a direction."""


def _as_matrix(vectors) -> np.ndarray:
    values = getattr(vectors, "values", vectors)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[None, :]
    return values


def fit_mean(vectors) -> np.ndarray:
    X = _as_matrix(vectors)
    if X.shape[0] == 0:
        raise ValueError("cannot fit a mean on an empty collection")
    return X.mean(axis=0)


def length_normalize(v) -> np.ndarray:
    """Scale a vector (or each row of a matrix) to unit Euclidean norm."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms < NORM_FLOOR):
        raise DegenerateVectorError("cannot length-normalize a (near) zero vector")
    return v / norms


def regularized_covariance(X: np.ndarray, regularize: Optional[bool] = None) -> np.ndarray:
    """Sample covariance (1/N) of already-centered rows.

    Regularization C + lambda*I with lambda = 1e-4*trace(C)/D is applied when
    ``regularize`` is True, or by default when there are fewer than D+1 rows.
    """
    n, d = X.shape
    C = X.T @ X / n
    C = (C + C.T) / 2
    if regularize is None:
        regularize = n < d + 1
    if regularize:
        C = C + 1e-4 * np.trace(C) / d * np.eye(d)
    return C


def fit_whitener(vectors, mean: Optional[np.ndarray] = None, regularize: Optional[bool] = None) -> np.ndarray:
    """Return the symmetric whitener W = C^(-1/2), so that W C W^T = I.

    C is the (regularized) covariance around ``mean``, inverted through its
    eigendecomposition. The symmetric form is unique, so whiteners fitted on
    two similar datasets are close to each other, which is what lets a
    refitted whitener stand in for the original one.
    """
    X = _as_matrix(vectors)
    if mean is None:
        mean = X.mean(axis=0)
    C = regularized_covariance(X - mean, regularize=regularize)
    evals, evecs = np.linalg.eigh(C)
    if evals[0] <= 0:
        # exactly singular and regularization was declined
        C = regularized_covariance(X - mean, regularize=True)
        evals, evecs = np.linalg.eigh(C)
    W = (evecs / np.sqrt(evals)) @ evecs.T
    return (W + W.T) / 2


@dataclass(frozen=True)
class Preprocessor:
    mean: np.ndarray
    whitener: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        if self.whitener is not None:
            W = np.asarray(self.whitener, dtype=np.float64)
            object.__setattr__(self, "whitener", W)
            d = self.mean.shape[0]
            if W.shape != (d, d):
                raise ValueError(f"whitener shape {W.shape} does not match mean length {d}")
            if not np.all(np.isfinite(W)):
                raise ValueError("whitener has non-finite entries")
            cond = self.condition_number
            if not cond < MAX_CONDITION:
                raise ValueError(f"whitener condition number {cond:.3g} exceeds {MAX_CONDITION:g}")

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @property
    def condition_number(self) -> float:
        if self.whitener is None:
            return 1.0
        return float(np.linalg.cond(self.whitener))

    @classmethod
    def fit(cls, vectors, whiten: bool = False) -> "Preprocessor":
        X = _as_matrix(vectors)
        mean = fit_mean(X)
        return cls(mean, fit_whitener(X, mean) if whiten else None)

    def transform(self, vectors, length_norm: bool = True) -> np.ndarray:
        X = _as_matrix(vectors) - self.mean
        if self.whitener is not None:
            X = X @ self.whitener.T
        if length_norm:
            X = length_normalize(X)
        return X

    def to_dict(self) -> dict:
        d = {"mean": self.mean.tolist()}
        if self.whitener is not None:
            d["whitener"] = self.whitener.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Preprocessor":
        whitener = d.get("whitener")
        return cls(np.array(d["mean"], dtype=np.float64),
                   None if whitener is None else np.array(whitener, dtype=np.float64))
