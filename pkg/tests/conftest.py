import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


def planted_selective(seed, p=256, k_prime=32, n=64, m=8, noise=0.1):
    """Gradients whose GradDot scores are carried by a hidden support ``A``.

    Returns ``(train, test, A)`` with ``|A| = k_prime // 2``. Coordinates off
    ``A`` are small independent noise in both train and test.
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    A = np.sort(rng.choice(p, size=k_prime // 2, replace=False))
    scale = np.full(p, noise)
    scale[A] = 1.0
    train = rng.standard_normal((n, p)) * scale
    test = rng.standard_normal((m, p)) * scale
    return train, test, A


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
