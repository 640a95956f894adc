import numpy as np
import pytest

from weakplda.io import IVectorSet, LabeledDataset
from weakplda.model import PldaModel


def random_model(rng, dim, rank, noise=1.0):
    """A PLDA model with a random SPD residual covariance."""
    A = rng.standard_normal((dim, dim))
    sigma = A @ A.T / dim + noise * np.eye(dim)
    return PldaModel(rng.standard_normal(dim), rng.standard_normal((dim, rank)), (sigma + sigma.T) / 2)


def sample_dataset(model, n_speakers, utts_per_speaker, rng, prefix="s"):
    """Utterances drawn from ``model``; labels are the speaker index."""
    L = np.linalg.cholesky(model.sigma)
    ids, rows, labels = [], [], {}
    for i in range(n_speakers):
        y = rng.standard_normal(model.rank)
        n = utts_per_speaker if np.isscalar(utts_per_speaker) else utts_per_speaker[i]
        for j in range(n):
            utt = f"{prefix}{i}-{j}"
            ids.append(utt)
            rows.append(model.u + model.V @ y + L @ rng.standard_normal(model.dim))
            labels[utt] = f"{prefix}{i}"
    return LabeledDataset(IVectorSet(ids, np.array(rows)), labels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance check, filled in by test_acceptance.py
ACCEPTANCE = {}


def record(key, title, passed, detail=""):
    ACCEPTANCE[key] = (title, bool(passed), detail)
    print(f"[{key}] {'PASS' if passed else 'FAIL'} {title}: {detail}")
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if passed else 'FAIL'}  {title}  ({detail})")
