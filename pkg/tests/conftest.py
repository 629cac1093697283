import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_model():
    from usdenoise.network import MICRO_CONFIG, build_model

    return build_model(MICRO_CONFIG, seed=0)


def make_pairs(n, size=16, sigma=0.25, seed=0):
    from usdenoise.imagio import PhantomSpec, synth_phantom
    from usdenoise.speckle import NoiseSpec, add_speckle
    from usdenoise.training import PairSet

    clean = [synth_phantom(PhantomSpec(size=size), [seed, i]) for i in range(n)]
    noisy = [add_speckle(c, NoiseSpec(sigma, seed=1000 * seed + i)) for i, c in enumerate(clean)]
    return PairSet(np.concatenate([x.data for x in noisy]), np.concatenate([x.data for x in clean]))


@pytest.fixture
def micro_pairs():
    return make_pairs(6)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
