import numpy as np
import pytest

from dualgp import cli
from dualgp.kernels import VARIANTS

# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_cfg():
    return cli.RunConfig()


@pytest.fixture(scope="session")
def pipelines(default_cfg):
    """Full default-config training run per kernel: (dyn, value, policy, diagnostics)."""
    return {variant: cli.train(default_cfg, variant) for variant in VARIANTS}


@pytest.fixture(scope="session")
def toy_result(default_cfg):
    return cli.toy_study(default_cfg)


@pytest.fixture(scope="session")
def rollouts(default_cfg, pipelines):
    """Greedy 100-step rollout from the start state for each trained pipeline."""
    from dualgp import mountaincar as mc
    from dualgp import policy_iteration as pi

    env = default_cfg.env()
    return {
        variant: pi.greedy_rollout(val, dyn, env, mc.START_STATE, default_cfg.horizon, default_cfg.n_forces)
        for variant, (dyn, val, _, _) in pipelines.items()
    }
