import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory):
    from fedpca import synth

    d = tmp_path_factory.mktemp("synthetic")
    synth.write_dataset(str(d))
    return d


@pytest.fixture(scope="session")
def synthetic_cache(synthetic_dir):
    from fedpca import cli

    out = synthetic_dir / "prepared"
    assert cli.main(["prepare-data", "--train", str(synthetic_dir / "KDDTrain+.txt"),
                     "--test", str(synthetic_dir / "KDDTest+.txt"), "--out", str(out)]) == 0
    return out / "dataset.cache"


def random_orthonormal(rng, d, k):
    return np.linalg.qr(rng.standard_normal((d, k)))[0]


def low_rank_data(rng, d, k, n, noise=0.01, spread=(3.0, 1.0)):
    basis = random_orthonormal(rng, d, k)
    scales = np.linspace(spread[0], spread[1], k)[:, None]
    return basis @ (scales * rng.standard_normal((k, n))) + noise * rng.standard_normal((d, n))


@pytest.fixture(scope="session")
def nslkdd_dir():
    from pathlib import Path

    root = os.environ.get("FEDPCA_DATA")
    if not root or not (Path(root) / "KDDTrain+.txt").exists():
        pytest.skip("NSL-KDD files not available (set FEDPCA_DATA)")
    return Path(root)
