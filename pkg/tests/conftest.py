import numpy as np
import pytest

ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, text in sorted(lines):
            terminalreporter.write_line(text)

from gradleak.exclusivity import UniformSampler, curate_insecure_batch
from gradleak.model import FcnParams, average_gradient, generate_model


def insecure_case(dims, M, seed=0, bias_mean=0.0, max_trials=2000):
    """Model, curated insecure batch and its average gradient."""
    params = generate_model(dims, seed, bias_mean)
    sampler = UniformSampler(dims[0], dims[-1])
    batch, _ = curate_insecure_batch(params, sampler, max_trials, seed + 100, M)
    return params, batch, average_gradient(params, batch)


def toy_two_sample(n_classes=4, seed=0):
    """Hand-built 4-4-5-K net: layer-2 masks (1,1,1,0,0) and (0,0,1,1,1)."""
    W0 = np.eye(4)
    b0 = np.zeros(4)
    W1 = np.array(
        [
            [1.0, 0, 0, 0],
            [2.0, 0, 0, 0],
            [0, 0, 1.0, 0],
            [0, 1.0, 0, 0],
            [0, 0, 0, 1.0],
        ]
    )
    b1 = np.full(5, -0.1)
    rng = np.random.default_rng(seed)
    W2 = rng.normal(size=(n_classes, 5))
    b2 = rng.normal(size=n_classes) * 0.1
    params = FcnParams([4, 4, 5, n_classes], [W0, W1, W2], [b0, b1, b2])
    x = np.array([[0.5, -0.5, 0.6, -0.5], [-0.5, 0.4, 0.7, 0.3]])
    y = np.array([1, 3])
    return params, x, y


@pytest.fixture(scope="session")
def deep_case():
    return insecure_case((16, 40, 32, 5), 4, seed=1)


@pytest.fixture(scope="session")
def wide_case():
    return insecure_case((48, 256, 10), 8, seed=3, bias_mean=-0.9)
