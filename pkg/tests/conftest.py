import pytest

from bremen.config import ExperimentConfig

TINY = dict(env="pointmass", deployments=2, batch_size=200, iterations=3, policy_batch=300,
            rollout_length=10, ensemble_size=2, dynamics_hidden=(16,), policy_hidden=(8,),
            eval_episodes=2, horizon=50, dynamics_max_epochs=3, bc_max_epochs=5)


@pytest.fixture
def tiny_cfg():
    return ExperimentConfig(**TINY).validate()


@pytest.fixture(autouse=True)
def _data_dir(tmp_path, monkeypatch):
    # keep default-location writes out of the working tree
    monkeypatch.setenv("BREMEN_DATA_DIR", str(tmp_path / "data"))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size acceptance runs (tens of minutes)")


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
