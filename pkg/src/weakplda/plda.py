"""PLDA training by EM, marginal likelihood, and pairwise scoring."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np
from scipy import linalg

from .io import IVector, IVectorSet, LabeledDataset, ScoreSet, TrialList
from .model import PldaModel
from .preprocess import DegenerateVectorError, NORM_FLOOR

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2 * np.pi))
SIGMA_FLOOR = 1e-8


class ConfigError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    rank: int
    iterations: int = 20
    seed: int = 0
    min_utts_per_speaker: int = 1
    sigma_mode: str = "full"
    init: str = "eig"
    threads: int = 1

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.min_utts_per_speaker < 1:
            raise ConfigError("min_utts_per_speaker must be >= 1")
        if self.sigma_mode not in ("full", "diagonal"):
            raise ConfigError(f"sigma_mode must be 'full' or 'diagonal', got {self.sigma_mode!r}")
        if self.init not in ("eig", "random"):
            raise ConfigError(f"init must be 'eig' or 'random', got {self.init!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")


@dataclass(frozen=True)
class SpeakerPosterior:
    mean: np.ndarray
    precision: np.ndarray
    count: int


# --------------------------------------------------------------------------
# sufficient statistics
# --------------------------------------------------------------------------


@dataclass
class _Stats:
    u: np.ndarray
    sums: np.ndarray  # (S, D) per-speaker sums of w - u
    counts: np.ndarray  # (S,)
    scatter: np.ndarray  # sum over all utterances of (w - u)(w - u)^T
    n: int
    speakers: List[str]


def _group(data: LabeledDataset, min_utts: int = 1) -> Tuple[np.ndarray, List[str], np.ndarray]:
    labels = data.label_array()
    speakers = sorted(set(labels))
    index = {s: i for i, s in enumerate(speakers)}
    codes = np.array([index[s] for s in labels], dtype=np.int64)
    counts = np.bincount(codes, minlength=len(speakers))
    keep = counts >= min_utts
    if not keep.all():
        rows = keep[codes]
        X = data.vectors.values[rows]
        speakers = [s for s, k in zip(speakers, keep) if k]
        remap = -np.ones(len(keep), dtype=np.int64)
        remap[keep] = np.arange(int(keep.sum()))
        codes = remap[codes[rows]]
    else:
        X = data.vectors.values
    return X, speakers, codes


def collect_stats(data: LabeledDataset, min_utts: int = 1) -> _Stats:
    X, speakers, codes = _group(data, min_utts)
    if len(speakers) < 2:
        raise ConfigError(f"PLDA training needs at least 2 speakers, got {len(speakers)}")
    u = X.mean(axis=0)
    R = X - u
    sums = np.zeros((len(speakers), X.shape[1]))
    np.add.at(sums, codes, R)
    counts = np.bincount(codes, minlength=len(speakers)).astype(np.float64)
    return _Stats(u, sums, counts, R.T @ R, X.shape[0], speakers)


# --------------------------------------------------------------------------
# E-step and likelihood
# --------------------------------------------------------------------------


def _estep_chunk(sums, counts, V, SinvV):
    """Accumulate (sum_i S_i E[y_i]^T, sum_i n_i E[y_i y_i^T], sum_i b^T L^-1 b, sum_i log|L_i|)."""
    K = V.shape[1]
    VtSinvV = V.T @ SinvV
    B = sums @ SinvV  # rows b_i = V^T Sigma^-1 S_i
    A = np.zeros((V.shape[0], K))
    R = np.zeros((K, K))
    quad = 0.0
    logdet = 0.0
    for n in np.unique(counts):
        sel = counts == n
        L = np.eye(K) + n * VtSinvV
        cf = linalg.cho_factor(L, lower=True)
        Linv = linalg.cho_solve(cf, np.eye(K))
        Ey = linalg.cho_solve(cf, B[sel].T).T  # (m, K)
        m = int(sel.sum())
        A += sums[sel].T @ Ey
        R += n * (m * Linv + Ey.T @ Ey)
        quad += float(np.sum(B[sel] * Ey))
        logdet += m * 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    return A, R, quad, logdet


def _estep(stats: _Stats, V, sigma, threads: int = 1):
    cf = linalg.cho_factor(sigma, lower=True)
    SinvV = linalg.cho_solve(cf, V)
    if threads <= 1 or len(stats.counts) < 2 * threads:
        return _estep_chunk(stats.sums, stats.counts, V, SinvV)
    bounds = np.linspace(0, len(stats.counts), threads + 1).astype(int)
    parts = [(stats.sums[a:b], stats.counts[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(lambda p: _estep_chunk(p[0], p[1], V, SinvV), parts))
    A = sum(r[0] for r in results)
    R = sum(r[1] for r in results)
    return A, R, sum(r[2] for r in results), sum(r[3] for r in results)


def _loglik(stats: _Stats, V, sigma, estep=None) -> float:
    cf = linalg.cho_factor(sigma, lower=True)
    logdet_sigma = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    D = V.shape[0]
    if estep is None:
        estep = _estep(stats, V, sigma)
    _, _, quad, logdet_L = estep
    resid = float(np.trace(linalg.cho_solve(cf, stats.scatter)))
    return -0.5 * (stats.n * (D * LOG_2PI + logdet_sigma) + resid) + 0.5 * quad - 0.5 * logdet_L


def log_likelihood(model: PldaModel, data: LabeledDataset) -> float:
    """Marginal log-likelihood of ``data`` under ``model`` (speaker factors integrated out)."""
    X, speakers, codes = _group(data)
    R = X - model.u
    sums = np.zeros((len(speakers), X.shape[1]))
    np.add.at(sums, codes, R)
    counts = np.bincount(codes, minlength=len(speakers)).astype(np.float64)
    stats = _Stats(model.u, sums, counts, R.T @ R, X.shape[0], speakers)
    return _loglik(stats, model.V, model.sigma)


def speaker_posteriors(model: PldaModel, data: LabeledDataset) -> Dict[str, SpeakerPosterior]:
    X, speakers, codes = _group(data)
    SinvV = linalg.solve(model.sigma, model.V, assume_a="pos")
    VtSinvV = model.V.T @ SinvV
    out = {}
    for i, spk in enumerate(speakers):
        rows = X[codes == i] - model.u
        n = rows.shape[0]
        L = np.eye(model.rank) + n * VtSinvV
        mean = linalg.solve(L, SinvV.T @ rows.sum(axis=0), assume_a="pos")
        out[spk] = SpeakerPosterior(mean, (L + L.T) / 2, n)
    return out


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def _floor_sigma(sigma: np.ndarray) -> np.ndarray:
    sigma = (sigma + sigma.T) / 2
    evals, evecs = np.linalg.eigh(sigma)
    floor = SIGMA_FLOOR * max(float(evals[-1]), 0.0)
    if evals[0] >= floor and evals[0] > 0:
        return sigma
    if floor <= 0:
        raise NumericError("residual covariance collapsed to zero")
    evals = np.maximum(evals, floor)
    sigma = (evecs * evals) @ evecs.T
    return (sigma + sigma.T) / 2


def _initial_params(stats: _Stats, config: TrainConfig):
    D = stats.sums.shape[1]
    C = stats.scatter / stats.n
    evals, evecs = np.linalg.eigh((C + C.T) / 2)
    order = np.argsort(evals)[::-1][: config.rank]
    lam = np.clip(evals[order], 0.0, None)
    V = evecs[:, order] * np.sqrt(lam / 2.0)
    if config.init == "random":
        rng = np.random.default_rng(config.seed)
        scale = np.sqrt(max(float(np.trace(C)), 1e-300) / D) * 0.1
        V = V + scale * rng.standard_normal(V.shape)
    sigma = C / 2.0
    if config.sigma_mode == "diagonal":
        sigma = np.diag(np.diag(sigma))
    if np.max(np.abs(sigma)) == 0:
        raise NumericError("training data has zero variance")
    return V, _floor_sigma(sigma)


def train_em(data: LabeledDataset, config: TrainConfig) -> Tuple[PldaModel, List[float]]:
    """Fit a PLDA model by EM; returns the model and the log-likelihood after each iteration."""
    if config.rank > data.dim:
        raise ConfigError(f"rank {config.rank} exceeds dimension {data.dim}")
    stats = collect_stats(data, config.min_utts_per_speaker)
    V, sigma = _initial_params(stats, config)
    history: List[float] = []
    estep = None
    for it in range(1, config.iterations + 1):
        try:
            A, R, _, _ = estep if estep is not None else _estep(stats, V, sigma, config.threads)
            V = linalg.solve(R, A.T, assume_a="pos").T
            sigma = (stats.scatter - V @ A.T) / stats.n
            if config.sigma_mode == "diagonal":
                sigma = np.diag(np.diag(sigma))
            sigma = _floor_sigma(sigma)
            estep = _estep(stats, V, sigma, config.threads)
            ll = _loglik(stats, V, sigma, estep)
        except (linalg.LinAlgError, NumericError) as exc:
            raise NumericError(f"EM iteration {it}: {exc}") from None
        if not np.isfinite(ll):
            raise NumericError(f"EM iteration {it}: non-finite log-likelihood")
        history.append(ll)
        logger.debug("iteration %d: log-likelihood %.6f", it, ll)
    return PldaModel(stats.u, V, sigma), history


# --------------------------------------------------------------------------
# scoring
# --------------------------------------------------------------------------


class Scorer:
    """Precomputed quadratic form for the same/different-speaker log-likelihood ratio.

    With x = w - u, score(x1, x2) = x1'Q x1/2 + x2'Q x2/2 + x1'P x2 + c.
    """

    def __init__(self, model: PldaModel):
        self.model = model
        tot = model.total
        tot = (tot + tot.T) / 2
        btw = model.between
        cf = linalg.cho_factor(tot, lower=True)
        tot_inv = linalg.cho_solve(cf, np.eye(model.dim))
        tot_inv = (tot_inv + tot_inv.T) / 2
        M = tot - btw @ tot_inv @ btw
        M = (M + M.T) / 2
        cm = linalg.cho_factor(M, lower=True)
        M_inv = linalg.cho_solve(cm, np.eye(model.dim))
        M_inv = (M_inv + M_inv.T) / 2
        Q = tot_inv - M_inv
        P = tot_inv @ btw @ M_inv
        self.Q = (Q + Q.T) / 2
        self.P = (P + P.T) / 2
        logdet_tot = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
        logdet_M = 2.0 * float(np.sum(np.log(np.diag(cm[0]))))
        self.const = 0.5 * (logdet_tot - logdet_M)

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.model.dim:
            raise ValueError(f"vector dimension {X.shape[-1]} does not match model dimension {self.model.dim}")
        return X - self.model.u

    def pair(self, w1, w2) -> float:
        x1, x2 = self._check(w1), self._check(w2)
        return float(0.5 * x1 @ self.Q @ x1 + 0.5 * x2 @ self.Q @ x2 + x1 @ self.P @ x2 + self.const)

    def pairs(self, W1: np.ndarray, W2: np.ndarray) -> np.ndarray:
        """Scores for row-aligned pairs."""
        X1, X2 = self._check(W1), self._check(W2)
        return (0.5 * np.sum((X1 @ self.Q) * X1, axis=1)
                + 0.5 * np.sum((X2 @ self.Q) * X2, axis=1)
                + np.sum((X1 @ self.P) * X2, axis=1) + self.const)

    def matrix(self, E: np.ndarray, T: np.ndarray) -> np.ndarray:
        """All-pairs score matrix, enroll rows by test columns."""
        XE, XT = self._check(E), self._check(T)
        qe = 0.5 * np.sum((XE @ self.Q) * XE, axis=1)
        qt = 0.5 * np.sum((XT @ self.Q) * XT, axis=1)
        return qe[:, None] + qt[None, :] + (XE @ self.P) @ XT.T + self.const


def _values(v) -> np.ndarray:
    return np.asarray(v.values if isinstance(v, IVector) else v, dtype=np.float64)


def score_llr(model: PldaModel, enroll, test) -> float:
    return Scorer(model).pair(_values(enroll), _values(test))


def _score_trials(trials: TrialList, vectors: IVectorSet, pair_fn, threads: int = 1) -> ScoreSet:
    missing = [u for u in trials.utterances() if u not in vectors]
    if missing:
        raise KeyError(f"no i-vector for utt_id {missing[0]!r}")
    if len(trials) == 0:
        return ScoreSet([])
    ie = np.array([vectors.index_of(e) for e, _, _ in trials])
    it = np.array([vectors.index_of(t) for _, t, _ in trials])
    chunks = [slice(a, a + 20000) for a in range(0, len(trials), 20000)]

    def run(sl):
        return pair_fn(vectors.values[ie[sl]], vectors.values[it[sl]])

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(sl) for sl in chunks]
    scores = np.concatenate(parts)
    return ScoreSet([(e, t, float(s), tgt) for (e, t, tgt), s in zip(trials, scores)])


def score_llr_batch(model: PldaModel, trials: TrialList, vectors: IVectorSet, threads: int = 1) -> ScoreSet:
    return _score_trials(trials, vectors, Scorer(model).pairs, threads)


def cosine_pairs(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(A, axis=-1)
    nb = np.linalg.norm(B, axis=-1)
    if np.any(na < NORM_FLOOR) or np.any(nb < NORM_FLOOR):
        raise DegenerateVectorError("cosine score of a (near) zero vector")
    return np.clip(np.sum(A * B, axis=-1) / (na * nb), -1.0, 1.0)


def cosine_matrix(E: np.ndarray, T: np.ndarray) -> np.ndarray:
    ne = np.linalg.norm(E, axis=1)
    nt = np.linalg.norm(T, axis=1)
    if np.any(ne < NORM_FLOOR) or np.any(nt < NORM_FLOOR):
        raise DegenerateVectorError("cosine score of a (near) zero vector")
    return np.clip((E / ne[:, None]) @ (T / nt[:, None]).T, -1.0, 1.0)


def score_cosine(enroll, test) -> float:
    return float(cosine_pairs(_values(enroll)[None, :], _values(test)[None, :])[0])


def score_cosine_batch(trials: TrialList, vectors: IVectorSet, threads: int = 1) -> ScoreSet:
    return _score_trials(trials, vectors, cosine_pairs, threads)
