import contextlib
import time

import pytest
import torch

from bathyscope.net import NetConfig
from bathyscope.synthscene import RegionProfile, SceneSpec, make_tiles, shifted_profile
from bathyscope.trainer import TrainSpec, train

torch.set_num_threads(1)

DESK_TRAIN, DESK_TEST = 32, 20

# criterion number -> (title, passed, detail); filled by tests through ``criterion``
ACCEPTANCE = {}


@contextlib.contextmanager
def record(number, title):
    """Record a PASS/FAIL line for an acceptance criterion around a block of assertions."""
    detail = {}
    try:
        yield detail
    except BaseException:
        ACCEPTANCE[number] = (title, False, detail)
        raise
    if number not in ACCEPTANCE or ACCEPTANCE[number][1]:
        ACCEPTANCE[number] = (title, True, detail)


@pytest.fixture
def criterion():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        extra = ", ".join(f"{k}={v}" for k, v in detail.items())
        terminalreporter.write_line(f"[{number:2d}] {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({extra})" if extra else ""))


@pytest.fixture(scope="session")
def region_a():
    return RegionProfile(scene=SceneSpec(seed=1))


@pytest.fixture(scope="session")
def desk(region_a):
    """Desk model trained on region A: 32 training tiles, 20 held-out test tiles."""
    tiles = [t.pair for t in make_tiles(region_a, DESK_TRAIN + DESK_TEST)]
    start = time.process_time()
    model, history = train(tiles[:DESK_TRAIN], NetConfig(seed=0), TrainSpec(seed=0))
    cpu_s = time.process_time() - start
    return {"model": model, "history": history, "train": tiles[:DESK_TRAIN], "test": tiles[DESK_TRAIN:],
            "cpu_s": cpu_s}


@pytest.fixture(scope="session")
def region_b(region_a):
    """Shifted region: doubled attenuation, bimodal depths in [0, 5] m."""
    return [t.pair for t in make_tiles(shifted_profile(region_a), 20, prefix="b")]
