import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from swirl.model import DiscreteHmMdp, Spaces, Trajectory

settings.register_profile(
    "swirl", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("swirl")


def random_kernel(rng, S, A, deterministic=False):
    if deterministic:
        env = np.zeros((S, A, S))
        env[np.arange(S)[:, None], np.arange(A)[None, :], rng.integers(0, S, size=(S, A))] = 1.0
        return env
    env = rng.dirichlet(np.ones(S), size=(S, A))
    return env


def random_model(rng, Z=2, S=3, A=2, L=1, gamma=0.9, alpha=0.5, deterministic=False, tied=False):
    sp = Spaces(Z, S, A, L)
    logits = rng.normal(size=(Z, Z)) if tied else rng.normal(size=(Z, S, Z))
    if tied:
        logits = np.broadcast_to(logits[:, None, :], (Z, S, Z)).copy()
    return DiscreteHmMdp(
        spaces=sp,
        env=random_kernel(rng, S, A, deterministic),
        rewards=rng.normal(size=(Z, sp.num_augmented, A)),
        mode_logits=logits,
        init_state=rng.dirichlet(np.ones(S)),
        init_mode=rng.dirichlet(np.ones(Z)),
        gamma=gamma,
        alpha=alpha,
    )


def random_trajectory(rng, T, S, A):
    return Trajectory(rng.integers(0, S, size=T), rng.integers(0, A, size=T))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = {}


def report_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
