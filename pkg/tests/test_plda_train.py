import numpy as np
import pytest
from scipy import optimize
from scipy.stats import multivariate_normal

from weakplda.io import IVectorSet, LabeledDataset
from weakplda.model import PldaModel
from weakplda.plda import (ConfigError, TrainConfig, log_likelihood, speaker_posteriors, train_em)

from conftest import random_model, sample_dataset


def _monotone(history):
    return all(b >= a - abs(a) * 1e-6 for a, b in zip(history, history[1:]))


def brute_loglik(model, data):
    """Sum over speakers of the log-density of all their utterances stacked into one Gaussian."""
    total = 0.0
    labels = data.label_array()
    for spk in sorted(set(labels)):
        X = data.vectors.values[[i for i, s in enumerate(labels) if s == spk]]
        n, d = X.shape
        cov = np.kron(np.ones((n, n)), model.between) + np.kron(np.eye(n), model.sigma)
        total += multivariate_normal(np.tile(model.u, n), cov).logpdf(X.ravel())
    return total


def test_one_dimensional_closed_form():
    # speaker means +3 and -3, utterances one unit either side
    X = np.array([[2.0], [4.0], [-4.0], [-2.0]])
    data = LabeledDataset(IVectorSet(list("abcd"), X), {"a": "A", "b": "A", "c": "B", "d": "B"})
    model, history = train_em(data, TrainConfig(rank=1, iterations=500))

    def negll(p):
        m = PldaModel(np.zeros(1), np.array([[np.exp(p[0])]]), np.array([[np.exp(p[1])]]))
        return -brute_loglik(m, data)

    best = optimize.minimize(negll, x0=[0.0, 0.0], method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12})
    b_opt, s_opt = np.exp(best.x[0]) ** 2, np.exp(best.x[1])
    assert abs(model.total[0, 0] - np.mean(X**2)) < 1e-3
    assert abs(model.total[0, 0] - (b_opt + s_opt)) < 1e-3
    assert abs(model.sigma[0, 0] - s_opt) < 1e-3
    assert abs(history[-1] + best.fun) < 1e-6
    assert _monotone(history)


def test_monotone_on_generated_corpus(rng):
    truth = random_model(rng, 20, 10)
    data = sample_dataset(truth, 200, 5, rng)
    _, history = train_em(data, TrainConfig(rank=10, iterations=20))
    assert len(history) == 20
    assert _monotone(history)


@pytest.mark.parametrize("mode,init", [("full", "eig"), ("diagonal", "eig"), ("full", "random"),
                                       ("diagonal", "random")])
def test_monotone_for_all_variants(rng, mode, init):
    truth = random_model(rng, 8, 3)
    counts = rng.integers(1, 7, size=60)
    data = sample_dataset(truth, 60, counts, rng)
    model, history = train_em(data, TrainConfig(rank=4, iterations=25, sigma_mode=mode, init=init, seed=7))
    assert _monotone(history)
    if mode == "diagonal":
        np.testing.assert_array_equal(model.sigma, np.diag(np.diag(model.sigma)))


def test_reported_likelihood_matches_brute_force(rng):
    truth = random_model(rng, 3, 2)
    data = sample_dataset(truth, 6, [1, 2, 3, 1, 4, 2], rng)
    model, history = train_em(data, TrainConfig(rank=2, iterations=5))
    assert abs(history[-1] - brute_loglik(model, data)) < 1e-8
    assert abs(log_likelihood(model, data) - history[-1]) < 1e-8


def test_single_utterance_speakers_fit_total_covariance(rng):
    truth = random_model(rng, 6, 3)
    data = sample_dataset(truth, 3000, 1, rng)
    model, _ = train_em(data, TrainConfig(rank=3, iterations=20))
    X = data.vectors.values
    C = np.cov(X.T, bias=True)
    assert np.linalg.norm(model.total - C) / np.linalg.norm(C) < 0.05


def test_recovers_known_model(rng):
    truth = random_model(rng, 5, 2)
    data = sample_dataset(truth, 2000, 8, rng)
    model, _ = train_em(data, TrainConfig(rank=2, iterations=100))
    # V is identifiable only up to rotation, so compare the covariances
    assert np.linalg.norm(model.between - truth.between) / np.linalg.norm(truth.between) < 0.1
    assert np.linalg.norm(model.sigma - truth.sigma) / np.linalg.norm(truth.sigma) < 0.05
    np.testing.assert_allclose(model.u, data.vectors.values.mean(axis=0), atol=1e-12)


def test_threads_do_not_change_result(rng):
    truth = random_model(rng, 10, 4)
    data = sample_dataset(truth, 300, rng.integers(1, 9, size=300), rng)
    m1, h1 = train_em(data, TrainConfig(rank=4, iterations=10, threads=1))
    m4, h4 = train_em(data, TrainConfig(rank=4, iterations=10, threads=4))
    np.testing.assert_allclose(h1, h4, rtol=1e-10)
    np.testing.assert_allclose(m1.V, m4.V, atol=1e-8)
    np.testing.assert_allclose(m1.sigma, m4.sigma, atol=1e-8)


def test_training_is_deterministic(rng):
    data = sample_dataset(random_model(rng, 6, 2), 40, 3, rng)
    a = train_em(data, TrainConfig(rank=2, iterations=5, init="random", seed=3))
    b = train_em(data, TrainConfig(rank=2, iterations=5, init="random", seed=3))
    np.testing.assert_array_equal(a[0].V, b[0].V)
    assert a[1] == b[1]


def test_config_errors(rng):
    data = sample_dataset(random_model(rng, 3, 1), 5, 2, rng)
    with pytest.raises(ConfigError, match="exceeds"):
        train_em(data, TrainConfig(rank=4))
    for bad in (dict(rank=0), dict(rank=1, iterations=0), dict(rank=1, sigma_mode="x"), dict(rank=1, init="x"),
                dict(rank=1, min_utts_per_speaker=0), dict(rank=1, threads=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    one = LabeledDataset(data.vectors, {u: "same" for u in data.vectors.ids})
    with pytest.raises(ConfigError, match="at least 2 speakers"):
        train_em(one, TrainConfig(rank=1))


def test_min_utts_drops_small_speakers(rng):
    data = sample_dataset(random_model(rng, 3, 1), 6, [1, 1, 3, 3, 3, 1], rng)
    model, _ = train_em(data, TrainConfig(rank=1, iterations=3, min_utts_per_speaker=2))
    kept = data.vectors.values[[i for i, s in enumerate(data.label_array()) if s in ("s2", "s3", "s4")]]
    np.testing.assert_allclose(model.u, kept.mean(axis=0), atol=1e-12)
    with pytest.raises(ConfigError):
        train_em(data, TrainConfig(rank=1, min_utts_per_speaker=4))


def test_speaker_posteriors_match_gaussian_conditioning(rng):
    model = random_model(rng, 4, 2)
    data = sample_dataset(model, 2, [3, 1], rng)
    post = speaker_posteriors(model, data)
    X = data.vectors.values[:3]
    # joint of (y, w_1..w_3): condition y on the stacked utterances
    n, d, k = 3, 4, 2
    cov_w = np.kron(np.ones((n, n)), model.between) + np.kron(np.eye(n), model.sigma)
    cov_yw = np.tile(model.V.T, (1, n))
    mean = cov_yw @ np.linalg.solve(cov_w, (X - model.u).ravel())
    cov = np.eye(k) - cov_yw @ np.linalg.solve(cov_w, cov_yw.T)
    p = post["s0"]
    assert p.count == 3
    np.testing.assert_allclose(p.mean, mean, atol=1e-10)
    np.testing.assert_allclose(np.linalg.inv(p.precision), cov, atol=1e-10)
    assert np.all(np.linalg.eigvalsh(p.precision) > 0)
