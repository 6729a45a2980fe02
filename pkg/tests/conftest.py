import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from stormsteer.diffusion import NoiseSchedule, init_params  # noqa: E402
from stormsteer.fields import AtmosphericState, GridSpec, NormStats  # noqa: E402

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def small_spec():
    return GridSpec.default(8, 8, 2)


def random_state(spec, rng, time_index=0):
    data = rng.normal(size=spec.shape)
    data[..., spec.indices("temperature")] += 280.0
    hum = spec.indices("humidity")
    data[..., hum] = rng.uniform(0.2, 1.5, size=data[..., hum].shape)
    data[..., spec.precip_index] = rng.uniform(0.0, 0.3, size=(spec.height, spec.width))
    return AtmosphericState(spec, data, time_index)


def random_params(spec, rng, hidden=6, activation="silu"):
    C = spec.n_channels
    st = NormStats(rng.normal(size=C) + np.where(np.arange(C) < spec.levels, 280.0, 0.0),
                   rng.uniform(0.5, 2.0, size=C))
    rs = NormStats(np.zeros(C), rng.uniform(0.05, 0.5, size=C))
    p = init_params(spec, st, rs, hidden, activation, 1.0, rng)
    for k in p.weights:
        if k.endswith("_b"):
            p.weights[k] = rng.normal(scale=0.1, size=p.weights[k].shape)
    p.trained = True
    return p


@pytest.fixture
def small_params(small_spec):
    return random_params(small_spec, np.random.default_rng(7))


@pytest.fixture
def short_schedule():
    return NoiseSchedule.geometric(6, 80.0, 0.03)
