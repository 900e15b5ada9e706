import time

import pytest

from gatewire import compare_with_without, run_experiment


@pytest.fixture(scope="session")
def desk_experiments():
    """Default desk-scale experiment trained on seeds 0..4, with wall-clock seconds."""
    t0 = time.perf_counter()
    runs = [run_experiment(s) for s in range(5)]
    return runs, time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk_bundle(desk_experiments):
    """The seed-0 run, for tests that need one trained model."""
    return desk_experiments[0][0]


@pytest.fixture(scope="session")
def five_seed_compare():
    """with/without runs on seeds 0..4 plus wall-clock seconds for all of them."""
    t0 = time.perf_counter()
    runs = [compare_with_without(s) for s in range(5)]
    return runs, time.perf_counter() - t0
