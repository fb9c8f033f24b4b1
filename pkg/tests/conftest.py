import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from regionedit.backends.mock import MockWorld
from tests.helpers import ACCEPTANCE_LINES, random_image

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path_factory, monkeypatch):
    monkeypatch.setenv("REGIONEDIT_CACHE_DIR", str(tmp_path_factory.mktemp("cache")))


@pytest.fixture
def world():
    return MockWorld(seed=0)


@pytest.fixture
def backends(world):
    return world.backends()


@pytest.fixture
def small_image():
    return random_image(np.random.default_rng(7))


@pytest.fixture(scope="session")
def grow_runs():
    """Ten default training runs on the ``grow`` scene, with j-dagger fixed beforehand."""
    import time

    from regionedit.scenarios import enumerate_proposal_losses, synthetic_scenario
    from regionedit.trainer import TrainConfig, proposal_probabilities, train_region_generator

    scenario = synthetic_scenario("grow", seed=0)
    table = enumerate_proposal_losses(scenario)
    best = table.argmin(axis=1) + 1
    runs = []
    start = time.perf_counter()
    for seed in range(10):
        result = train_region_generator(scenario.image, scenario.prompt, scenario.backends(),
                                        TrainConfig(seed=seed))
        runs.append({"seed": seed,
                     "final": proposal_probabilities(result.params, result.prepared),
                     "epochs": result.epoch_probabilities})
    return {"table": table, "j_dagger": best, "runs": runs,
            "elapsed": time.perf_counter() - start}
