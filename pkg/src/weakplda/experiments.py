"""End-to-end strong / weak / pooled training experiments on synthetic corpora.

Each experiment returns an :class:`ExperimentResult` holding one EER per
(condition, seed). Within a seed all conditions share the same truth model
and the same evaluation trials, so condition differences can be compared
seed by seed.
"""

import logging
import math
import os
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import __version__
from .io import IVectorSet, LabeledDataset, TrialList, atomic_write, dumps_json
from .labeling import derive_weak_labels, pool_datasets, true_labels
from .metrics import eer_from_scores, summarize_experiment
from .plda import Scorer, TrainConfig, cosine_matrix, train_em
from .preprocess import Preprocessor
from .synth import CUSTOMER, SERVICE, SynthConfig, generate_corpus, generate_strong_set, make_eval_split

logger = logging.getLogger(__name__)

EXPERIMENTS = ("table2", "fig2", "fig3", "fig4")

# Desk-scale corpus used by all experiments unless overridden.
DESK_SYNTH = dict(
    dim=50,
    rank=25,
    speaker_scale=1.5,
    noise_scale=1.0,
    session_scale=0.7,
    session_rank=10,
    utts_per_channel=5.0,
    pool_size=10**9,
    service_pool_size=200,
    strong_sessions_per_speaker=2,
    strong_utts_per_session=1.5,
)

DEFAULT_GRIDS = {
    "table2": {"n_strong": [2000], "n_weak": [2000]},
    "fig2": {"n_speakers": [50, 100, 200, 500, 1000, 2000]},
    "fig3": {"n_strong": [100, 200, 500, 1000, 2000], "n_weak": [0, 200, 400, 800, 1000, 2000]},
    "fig4": {"n_strong": [100, 200, 500, 2000], "n_weak": [100, 200, 500, 1000, 2000]},
}

DEFAULT_SYNTH_OVERRIDES = {
    "fig4": {"condition_shift": 1.5},
}


@dataclass
class ExperimentSpec:
    name: str
    synth: Dict = field(default_factory=dict)
    grid: Dict[str, List[int]] = field(default_factory=dict)
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: Optional[str] = None
    n_eval_speakers: int = 200
    enroll_per_spk: int = 1
    test_per_spk: int = 6
    train_rank: Optional[int] = None
    iterations: int = 20
    whiten: bool = False
    threads: int = 1

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.name!r}; expected one of {', '.join(EXPERIMENTS)}")
        grid = dict(DEFAULT_GRIDS[self.name])
        grid.update(self.grid or {})
        self.grid = {k: [int(x) for x in v] for k, v in grid.items()}
        for axis, values in self.grid.items():
            if not values:
                raise ValueError(f"grid axis {axis!r} is empty")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        self.seeds = [int(s) for s in self.seeds]

    def synth_config(self, seed: int) -> SynthConfig:
        params = dict(DESK_SYNTH)
        params.update(DEFAULT_SYNTH_OVERRIDES.get(self.name, {}))
        params.update(self.synth or {})
        params["seed"] = seed
        return SynthConfig(**params)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentResult:
    name: str
    seeds: List[int]
    eers: Dict[str, List[float]]
    """condition name -> EER per seed (same order as ``seeds``)."""

    def mean(self, cond: str) -> float:
        return float(np.mean(self.eers[cond]))

    def stderr(self, cond: str) -> float:
        v = np.asarray(self.eers[cond])
        return float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0

    def diff(self, a: str, b: str) -> Tuple[float, float]:
        """Mean and standard error of the per-seed difference EER(a) - EER(b)."""
        d = np.asarray(self.eers[a]) - np.asarray(self.eers[b])
        se = float(np.std(d, ddof=1) / math.sqrt(d.size)) if d.size > 1 else 0.0
        return float(d.mean()), se

    def better(self, a: str, b: str) -> bool:
        """True when condition ``a`` has lower EER than ``b`` by more than one standard error."""
        m, se = self.diff(a, b)
        return -m > se

    def rows(self) -> List[Tuple[str, float]]:
        return [(cond, self.mean(cond)) for cond in self.eers]

    def csv(self) -> str:
        lines = ["condition,mean_eer,stderr," + ",".join(f"seed{s}" for s in self.seeds)]
        for cond, vals in self.eers.items():
            lines.append(",".join([cond, f"{self.mean(cond):.6f}", f"{self.stderr(cond):.6f}"]
                                  + [f"{v:.6f}" for v in vals]))
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------


class Evaluation:
    """Held-out trials for one seed, scored as an enroll x test matrix."""

    def __init__(self, trials: TrialList, vectors: IVectorSet):
        self.trials = trials
        enroll = list(dict.fromkeys(e for e, _, _ in trials))
        test = list(dict.fromkeys(t for _, t, _ in trials))
        self.enroll = vectors.rows(enroll)
        self.test = vectors.rows(test)
        ei = {u: i for i, u in enumerate(enroll)}
        ti = {u: i for i, u in enumerate(test)}
        self.ie = np.array([ei[e] for e, _, _ in trials])
        self.it = np.array([ti[t] for _, t, _ in trials])
        self.target = np.array([tgt for _, _, tgt in trials])

    def eer(self, score_matrix: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> float:
        S = score_matrix(self.enroll, self.test)
        s = S[self.ie, self.it]
        return eer_from_scores(s[self.target], s[~self.target])[0]


@dataclass
class Backend:
    """A preprocessor plus PLDA model, ready to score raw vectors."""

    pre: Preprocessor
    scorer: Scorer

    def score_matrix(self, E: np.ndarray, T: np.ndarray, pre: Optional[Preprocessor] = None) -> np.ndarray:
        pre = pre or self.pre
        return self.scorer.matrix(pre.transform(E), pre.transform(T))


def train_backend(data: LabeledDataset, spec: ExperimentSpec, rank: int, seed: int,
                  pre_vectors: Optional[np.ndarray] = None) -> Backend:
    pre = Preprocessor.fit(data.vectors.values if pre_vectors is None else pre_vectors, whiten=spec.whiten)
    transformed = data.with_vectors(data.vectors.with_values(pre.transform(data.vectors.values)))
    model, _ = train_em(transformed, TrainConfig(rank=rank, iterations=spec.iterations, seed=seed))
    return Backend(pre, Scorer(model))


class SeedContext:
    """Corpora for one seed, generated once at the largest sizes the grid needs."""

    def __init__(self, spec: ExperimentSpec, seed: int, n_strong: int, n_weak: int):
        self.spec = spec
        self.seed = seed
        self.config = spec.synth_config(seed)
        self.rank = spec.train_rank or self.config.rank
        trials, vectors = make_eval_split(self.config, spec.n_eval_speakers, spec.enroll_per_spk, spec.test_per_spk)
        self.evaluation = Evaluation(trials, vectors)
        self.strong_vectors, self.strong_records = generate_strong_set(self.config, n_strong)
        self._strong_labels = true_labels(self.strong_records) if self.strong_records else {}
        self.corpus = generate_corpus(replace(self.config, n_sessions=n_weak))
        self._strong_order = self._speaker_prefix_order()

    def _speaker_prefix_order(self) -> Dict[str, int]:
        return {f"strong{i}": i for i in range(len(self.strong_records))}

    def strong(self, n_speakers: int) -> LabeledDataset:
        keep = [r.utt_id for r in self.strong_records
                if self._strong_order[r.true_speaker_id] < n_speakers]
        return LabeledDataset(self.strong_vectors.subset(keep), {u: self._strong_labels[u] for u in keep})

    def weak(self, channel: str, n_sessions: int, first_session: int = 0) -> LabeledDataset:
        records = [r for r in self.corpus.channel(channel, first_session + n_sessions)
                   if int(r.session_id[4:]) >= first_session]
        labels = derive_weak_labels(records).labels
        keep = [r.utt_id for r in records]
        return LabeledDataset(self.corpus.vectors.subset(keep), {u: labels[u] for u in keep})

    def cosine_eer(self) -> float:
        return self.evaluation.eer(cosine_matrix)

    def plda_eer(self, data: LabeledDataset, pre_vectors: Optional[np.ndarray] = None) -> float:
        backend = train_backend(data, self.spec, self.rank, self.seed, pre_vectors)
        return self.evaluation.eer(backend.score_matrix)


def _map_seeds(spec: ExperimentSpec, fn) -> List[Dict[str, float]]:
    if spec.threads > 1 and len(spec.seeds) > 1:
        with ThreadPoolExecutor(max_workers=spec.threads) as pool:
            return list(pool.map(fn, spec.seeds))
    return [fn(s) for s in spec.seeds]


def _collect(spec: ExperimentSpec, per_seed: List[Dict[str, float]]) -> ExperimentResult:
    conds = list(per_seed[0])
    return ExperimentResult(spec.name, list(spec.seeds), {c: [r[c] for r in per_seed] for c in conds})


# --------------------------------------------------------------------------
# experiments
# --------------------------------------------------------------------------


def run_table2(spec: ExperimentSpec) -> ExperimentResult:
    """Cosine vs PLDA trained on strong, weak-customer, weak-service and weak-mix labels."""
    n_strong = spec.grid["n_strong"][0]
    n_weak = spec.grid["n_weak"][0]
    half = n_weak // 2

    def one(seed):
        ctx = SeedContext(spec, seed, n_strong, n_weak)
        mix = pool_datasets(ctx.weak(CUSTOMER, half), ctx.weak(SERVICE, n_weak - half, first_session=half))
        out = {
            "Cosine": ctx.cosine_eer(),
            "PLDA: STRONG": ctx.plda_eer(ctx.strong(n_strong)),
            "PLDA: WEAK-customer": ctx.plda_eer(ctx.weak(CUSTOMER, n_weak)),
            "PLDA: WEAK-service": ctx.plda_eer(ctx.weak(SERVICE, n_weak)),
            "PLDA: WEAK-mix": ctx.plda_eer(mix),
        }
        logger.info("table2 seed %d: %s", seed, _fmt(out))
        return out

    return _collect(spec, _map_seeds(spec, one))


def run_fig2(spec: ExperimentSpec) -> ExperimentResult:
    """EER against training volume; weak volumes count sessions. n=0 is the cosine point."""
    sizes = sorted(spec.grid["n_speakers"])
    top = max(sizes)

    def one(seed):
        ctx = SeedContext(spec, seed, top, top)
        cos = ctx.cosine_eer()
        out = {}
        for label, make in (("strong", ctx.strong),
                            ("weak-customer", lambda n: ctx.weak(CUSTOMER, n)),
                            ("weak-service", lambda n: ctx.weak(SERVICE, n))):
            out[f"{label}@0"] = cos
            for n in sizes:
                out[f"{label}@{n}"] = ctx.plda_eer(make(n))
        logger.info("fig2 seed %d done", seed)
        return out

    return _collect(spec, _map_seeds(spec, one))


def run_fig3(spec: ExperimentSpec) -> ExperimentResult:
    """Pooled training over a grid of strong speakers x weak-customer sessions."""
    strong_sizes = sorted(spec.grid["n_strong"])
    weak_sizes = sorted(spec.grid["n_weak"])

    def one(seed):
        ctx = SeedContext(spec, seed, max(strong_sizes), max(weak_sizes))
        out = {}
        for ns in strong_sizes:
            strong = ctx.strong(ns)
            for nw in weak_sizes:
                key = f"strong={ns},weak={nw}"
                if ns == 0 and nw == 0:
                    out[key] = ctx.cosine_eer()
                elif nw == 0:
                    out[key] = ctx.plda_eer(strong)
                else:
                    out[key] = ctx.plda_eer(pool_datasets(strong, ctx.weak(CUSTOMER, nw)))
        logger.info("fig3 seed %d done", seed)
        return out

    return _collect(spec, _map_seeds(spec, one))


def run_fig4(spec: ExperimentSpec) -> ExperimentResult:
    """Strong-only vs pooled training vs mean/whitener adaptation under a domain shift.

    Every weak amount in the grid is tried both as pooled training data and
    as adaptation data; ``pooled@n`` and ``adapted@n`` report the amount with
    the lowest seed-mean EER, and every cell is kept in the result as
    ``pooled@n,weak=m`` / ``adapted@n,weak=m``.
    """
    strong_sizes = sorted(spec.grid["n_strong"])
    weak_sizes = sorted(spec.grid["n_weak"])

    def one(seed):
        ctx = SeedContext(spec, seed, max(strong_sizes), max(weak_sizes))
        weak = {nw: ctx.weak(CUSTOMER, nw) for nw in weak_sizes}
        in_domain = {nw: Preprocessor.fit(w.vectors.values, whiten=spec.whiten) for nw, w in weak.items()}
        out = {}
        for ns in strong_sizes:
            strong = ctx.strong(ns)
            backend = train_backend(strong, spec, ctx.rank, seed)
            out[f"strong-only@{ns}"] = ctx.evaluation.eer(backend.score_matrix)
            for nw in weak_sizes:
                out[f"adapted@{ns},weak={nw}"] = ctx.evaluation.eer(
                    lambda E, T: backend.score_matrix(E, T, pre=in_domain[nw]))
                out[f"pooled@{ns},weak={nw}"] = ctx.plda_eer(pool_datasets(strong, weak[nw]))
        logger.info("fig4 seed %d done", seed)
        return out

    result = _collect(spec, _map_seeds(spec, one))
    eers = {}
    for ns in strong_sizes:
        eers[f"strong-only@{ns}"] = result.eers[f"strong-only@{ns}"]
        for method in ("adapted", "pooled"):
            cells = [f"{method}@{ns},weak={nw}" for nw in weak_sizes]
            best = min(cells, key=result.mean)
            eers[f"{method}@{ns}"] = result.eers[best]
    for cond, vals in result.eers.items():
        eers.setdefault(cond, vals)
    result.eers = eers
    return result


RUNNERS = {"table2": run_table2, "fig2": run_fig2, "fig3": run_fig3, "fig4": run_fig4}


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    result = RUNNERS[spec.name](spec)
    if spec.output_dir:
        write_outputs(spec, result, spec.output_dir)
    return result


def _fmt(d: Dict[str, float]) -> str:
    return ", ".join(f"{k}={100 * v:.2f}%" for k, v in d.items())


def versions() -> dict:
    import scipy

    return {"weakplda": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def manifest(spec: ExperimentSpec, result: ExperimentResult) -> dict:
    return {
        "experiment": spec.name,
        "spec": spec.to_dict(),
        "synth_config": {str(s): spec.synth_config(s).to_dict() for s in spec.seeds},
        "versions": versions(),
        "results": {
            cond: {"mean": result.mean(cond), "stderr": result.stderr(cond), "per_seed": vals}
            for cond, vals in result.eers.items()
        },
    }


def write_outputs(spec: ExperimentSpec, result: ExperimentResult, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    atomic_write(os.path.join(out_dir, f"{spec.name}.csv"), result.csv())
    table, table_csv = summarize_experiment(result.rows())
    atomic_write(os.path.join(out_dir, f"{spec.name}_summary.txt"), table)
    atomic_write(os.path.join(out_dir, f"{spec.name}_summary.csv"), table_csv)
    m = manifest(spec, result)
    m["spec"]["output_dir"] = None  # keep manifests independent of where they were written
    atomic_write(os.path.join(out_dir, f"{spec.name}_manifest.json"), dumps_json(m))
