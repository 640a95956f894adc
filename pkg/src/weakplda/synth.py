"""Synthetic i-vector corpora drawn from a known PLDA model.

Every random quantity is drawn from its own stream keyed on
``(seed, stream, index)``, so a corpus with fewer sessions or speakers is an
exact prefix of a larger one with the same seed, and held-out evaluation
data does not depend on how much training data was generated.

An utterance of speaker ``y`` recorded in a session is::

    w = u + V y + session_scale * U h + sigma^(1/2) eps (+ shift if in-domain)

where ``h ~ N(0, I)`` is drawn once per (speaker, session) and ``U`` is an
orthonormal basis of a session-variability subspace (rank capped at the
dimension). With
``session_scale = 0`` this is the plain PLDA generative model.
"""

from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .io import IVectorSet, LabeledDataset, TrialList, UtteranceRecord
from .model import PldaModel

# stream ids for SeedSequence spawn keys
_TRUTH, _CUST_SPK, _SERV_SPK, _STRONG_SPK, _EVAL_SPK = 0, 1, 2, 3, 4
_SESSION, _STRONG_UTT, _EVAL_UTT = 5, 6, 7

CUSTOMER, SERVICE = "cust", "serv"


@dataclass(frozen=True)
class SynthConfig:
    dim: int = 50
    rank: int = 25
    n_sessions: int = 2000
    pool_size: int = 10**9
    service_pool_size: int = 200
    utts_per_channel: float = 5.0
    speaker_scale: float = 1.0
    noise_scale: float = 1.0
    session_scale: float = 0.0
    session_rank: int = 10
    condition_shift: float = 0.0
    random_sigma: bool = False
    strong_sessions_per_speaker: int = 4
    strong_utts_per_session: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or not 1 <= self.rank <= self.dim:
            raise ValueError(f"need 1 <= rank <= dim, got rank={self.rank}, dim={self.dim}")
        if self.pool_size < 1 or self.service_pool_size < 1:
            raise ValueError("pool sizes must be >= 1")
        if self.n_sessions < 0:
            raise ValueError("n_sessions must be >= 0")
        if self.session_rank < 0:
            raise ValueError("session_rank must be >= 0")
        if self.utts_per_channel <= 0 or self.strong_utts_per_session <= 0:
            raise ValueError("mean utterance counts must be positive")
        if self.strong_sessions_per_speaker < 1:
            raise ValueError("strong_sessions_per_speaker must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _orthonormal(rng: np.random.Generator, d: int, k: int) -> np.ndarray:
    if k == 0:
        return np.zeros((d, 0))
    q, r = np.linalg.qr(rng.standard_normal((d, k)))
    return q * np.sign(np.diag(r))


def sample_truth_model(dim: int, rank: int, speaker_scale: float = 1.0, noise_scale: float = 1.0,
                       seed: int = 0, random_sigma: bool = False) -> PldaModel:
    """u = 0, V = random orthonormal columns * speaker_scale, sigma = noise_scale^2 I.

    With ``random_sigma`` the residual covariance is a random SPD matrix with
    trace noise_scale^2 * dim instead.
    """
    if not 1 <= rank <= dim:
        raise ValueError(f"need 1 <= rank <= dim, got rank={rank}, dim={dim}")
    rng = _rng(seed, _TRUTH, 0)
    V = _orthonormal(rng, dim, rank) * speaker_scale
    if random_sigma:
        A = rng.standard_normal((dim, dim))
        S = A @ A.T / dim + 0.1 * np.eye(dim)
        sigma = S * (noise_scale**2 * dim / np.trace(S))
        sigma = (sigma + sigma.T) / 2
    else:
        sigma = noise_scale**2 * np.eye(dim)
    return PldaModel(np.zeros(dim), V, sigma)


@dataclass
class SynthCorpus:
    """Session corpus with one customer and one service channel per session."""

    config: SynthConfig
    vectors: IVectorSet
    records: List[UtteranceRecord]
    truth_model: PldaModel
    session_basis: np.ndarray = field(repr=False)
    shift: np.ndarray = field(repr=False)

    def channel(self, local_speaker: str, n_sessions: Optional[int] = None) -> List[UtteranceRecord]:
        """Records of one channel, optionally restricted to the first ``n_sessions`` sessions."""
        limit = None if n_sessions is None else {_session_id(s) for s in range(n_sessions)}
        return [r for r in self.records if r.local_speaker_id == local_speaker
                and (limit is None or r.session_id in limit)]


def _session_id(s: int) -> str:
    return f"sess{s:06d}"


class _Population:
    """Truth model plus session/shift structure shared by all generators of one config."""

    def __init__(self, config: SynthConfig):
        self.config = config
        c = config
        self.model = sample_truth_model(c.dim, c.rank, c.speaker_scale, c.noise_scale, c.seed, c.random_sigma)
        rng = _rng(c.seed, _TRUTH, 1)
        self.session_rank = min(c.session_rank, c.dim)
        self.session_basis = _orthonormal(rng, c.dim, self.session_rank)
        # the condition offset carries no speaker information: it is drawn
        # orthogonal to the speaker subspace
        v = rng.standard_normal(c.dim)
        if c.speaker_scale != 0 and c.rank < c.dim:
            basis = self.model.V / c.speaker_scale
            v = v - basis @ (basis.T @ v)
        self.shift = v / np.linalg.norm(v) * c.condition_shift
        if c.random_sigma:
            self.noise_chol = np.linalg.cholesky(self.model.sigma)
        else:
            self.noise_chol = None
        self._factors: Dict[Tuple[int, int], np.ndarray] = {}

    def factor(self, pool: int, index: int) -> np.ndarray:
        key = (pool, index)
        y = self._factors.get(key)
        if y is None:
            y = _rng(self.config.seed, pool, index).standard_normal(self.config.rank)
            self._factors[key] = y
        return y

    def session(self, rng: np.random.Generator, y: np.ndarray, n: int, in_domain: bool) -> np.ndarray:
        """n utterances of one speaker recorded in one session."""
        c = self.config
        base = self.model.u + self.model.V @ y
        if self.session_rank and c.session_scale:
            base = base + c.session_scale * (self.session_basis @ rng.standard_normal(self.session_rank))
        if in_domain:
            base = base + self.shift
        eps = rng.standard_normal((n, c.dim))
        if self.noise_chol is None:
            noise = c.noise_scale * eps
        else:
            noise = eps @ self.noise_chol.T
        return base + noise


def _count(rng: np.random.Generator, mean: float) -> int:
    return max(1, int(rng.poisson(mean)))


def generate_corpus(config: SynthConfig) -> SynthCorpus:
    """Sessions with a customer channel and a service channel (weak-label source, in-domain)."""
    pop = _Population(config)
    ids: List[str] = []
    rows: List[np.ndarray] = []
    records: List[UtteranceRecord] = []
    for s in range(config.n_sessions):
        rng = _rng(config.seed, _SESSION, s)
        sid = _session_id(s)
        cust = int(rng.integers(config.pool_size))
        serv = int(rng.integers(config.service_pool_size))
        for local, pool, idx in ((CUSTOMER, _CUST_SPK, cust), (SERVICE, _SERV_SPK, serv)):
            n = _count(rng, config.utts_per_channel)
            W = pop.session(rng, pop.factor(pool, idx), n, in_domain=True)
            for j in range(n):
                utt = f"{sid}-{local}-{j:03d}"
                ids.append(utt)
                records.append(UtteranceRecord(utt, sid, local, f"{local}{idx}"))
            rows.append(W)
    values = np.vstack(rows) if rows else np.zeros((0, config.dim))
    return SynthCorpus(config, IVectorSet(ids, values), records, pop.model,
                       pop.session_basis, pop.shift)


def generate_strong_set(config: SynthConfig, n_speakers: int) -> Tuple[IVectorSet, List[UtteranceRecord]]:
    """Human-labelled development speakers, each recorded over several sessions.

    Drawn from a separate speaker pool and without the in-domain shift.
    """
    pop = _Population(config)
    ids: List[str] = []
    rows: List[np.ndarray] = []
    records: List[UtteranceRecord] = []
    for i in range(n_speakers):
        rng = _rng(config.seed, _STRONG_UTT, i)
        y = pop.factor(_STRONG_SPK, i)
        spk = f"strong{i}"
        for k in range(config.strong_sessions_per_speaker):
            n = _count(rng, config.strong_utts_per_session)
            sid = f"strong{i:06d}s{k:02d}"
            rows.append(pop.session(rng, y, n, in_domain=False))
            for j in range(n):
                utt = f"{sid}-{j:03d}"
                ids.append(utt)
                records.append(UtteranceRecord(utt, sid, "spk", spk))
    values = np.vstack(rows) if rows else np.zeros((0, config.dim))
    return IVectorSet(ids, values), records


def make_eval_split(corpus, n_eval_speakers: int, enroll_per_spk: int = 1,
                    test_per_spk: int = 6) -> Tuple[TrialList, IVectorSet]:
    """Held-out evaluation speakers and all enroll x test trials.

    ``corpus`` may be a :class:`SynthCorpus` or a :class:`SynthConfig`. Every
    evaluation utterance is a separate in-domain session.
    """
    config = corpus.config if isinstance(corpus, SynthCorpus) else corpus
    if n_eval_speakers < 2:
        raise ValueError(f"need at least 2 evaluation speakers for nontarget trials, got {n_eval_speakers}")
    if enroll_per_spk < 1 or test_per_spk < 1:
        raise ValueError("enroll_per_spk and test_per_spk must be >= 1")
    pop = _Population(config)
    enroll_ids: List[Tuple[str, int]] = []
    test_ids: List[Tuple[str, int]] = []
    ids: List[str] = []
    rows: List[np.ndarray] = []
    for i in range(n_eval_speakers):
        rng = _rng(config.seed, _EVAL_UTT, i)
        y = pop.factor(_EVAL_SPK, i)
        for role, count, bucket in (("e", enroll_per_spk, enroll_ids), ("t", test_per_spk, test_ids)):
            for j in range(count):
                utt = f"eval{i:05d}-{role}{j:02d}"
                rows.append(pop.session(rng, y, 1, in_domain=True))
                ids.append(utt)
                bucket.append((utt, i))
    trials = TrialList([(e, t, si == ti) for e, si in enroll_ids for t, ti in test_ids])
    return trials, IVectorSet(ids, np.vstack(rows))


def labeled(vectors: IVectorSet, labels: Dict[str, str]) -> LabeledDataset:
    return LabeledDataset.from_files(vectors, labels)


def with_overrides(config: SynthConfig, **overrides) -> SynthConfig:
    return replace(config, **overrides)
