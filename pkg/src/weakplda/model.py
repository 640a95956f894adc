"""The PLDA parameter set and its JSON model file."""

import json
import os
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .io import FormatError, atomic_write, dumps_json
from .preprocess import Preprocessor

SYMMETRY_TOL = 1e-10


@dataclass(frozen=True)
class PldaModel:
    """w = u + V y + z with y ~ N(0, I_K) and z ~ N(0, sigma)."""

    u: np.ndarray
    V: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        V = np.asarray(self.V, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if V.ndim == 1:
            V = V[:, None]
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "sigma", sigma)
        d = u.shape[0]
        if u.ndim != 1 or d < 1:
            raise FormatError(f"u must be a non-empty vector, got shape {u.shape}")
        if V.ndim != 2 or V.shape[0] != d or not 1 <= V.shape[1] <= d:
            raise FormatError(f"V shape {V.shape} inconsistent with dim {d}")
        if sigma.shape != (d, d):
            raise FormatError(f"sigma shape {sigma.shape} inconsistent with dim {d}")
        for name, arr in (("u", u), ("V", V), ("sigma", sigma)):
            if not np.all(np.isfinite(arr)):
                raise FormatError(f"{name} has non-finite entries")
        scale = max(1.0, float(np.max(np.abs(sigma))))
        if np.max(np.abs(sigma - sigma.T)) > SYMMETRY_TOL * scale:
            raise FormatError("sigma is not symmetric")
        if np.linalg.eigvalsh(sigma)[0] <= 0:
            raise FormatError("sigma is not positive definite")

    @property
    def dim(self) -> int:
        return int(self.u.shape[0])

    @property
    def rank(self) -> int:
        return int(self.V.shape[1])

    @property
    def between(self) -> np.ndarray:
        return self.V @ self.V.T

    @property
    def total(self) -> np.ndarray:
        return self.V @ self.V.T + self.sigma


def model_to_dict(model: PldaModel, preprocess: Optional[Preprocessor] = None) -> dict:
    d = {
        "dim": model.dim,
        "rank": model.rank,
        "u": model.u,
        "V": model.V,
        "sigma": model.sigma,
    }
    if preprocess is not None:
        d["preprocess"] = preprocess.to_dict()
    return d


def model_from_dict(d: dict, source: str = "<model>") -> Tuple[PldaModel, Optional[Preprocessor]]:
    try:
        dim, rank = int(d["dim"]), int(d["rank"])
        u = np.array(d["u"], dtype=np.float64)
        V = np.array(d["V"], dtype=np.float64)
        sigma = np.array(d["sigma"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{source}: malformed model file ({exc})") from None
    if u.shape != (dim,):
        raise FormatError(f"{source}: u has length {u.shape} but dim is {dim}")
    if V.shape != (dim, rank):
        raise FormatError(f"{source}: V has shape {V.shape} but dim x rank is {(dim, rank)}")
    if sigma.shape != (dim, dim):
        raise FormatError(f"{source}: sigma has shape {sigma.shape} but dim is {dim}")
    try:
        model = PldaModel(u, V, sigma)
        pre = Preprocessor.from_dict(d["preprocess"]) if d.get("preprocess") else None
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{source}: {exc}") from None
    if pre is not None and pre.dim != dim:
        raise FormatError(f"{source}: preprocess dim {pre.dim} differs from model dim {dim}")
    return model, pre


def save_model(model: PldaModel, path, preprocess: Optional[Preprocessor] = None) -> None:
    atomic_write(path, dumps_json(model_to_dict(model, preprocess)))


def load_model(path) -> Tuple[PldaModel, Optional[Preprocessor]]:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{os.fspath(path)}: not valid JSON ({exc})") from None
    return model_from_dict(d, source=os.fspath(path))
