import numpy as np
import pytest

from conftest import random_state
from stormsteer.dynamics import Trajectory
from stormsteer.errors import StateError, ValidationError
from stormsteer.fields import AtmosphericState, GridSpec
from stormsteer.guidance import Perturbation
from stormsteer.transfer import (TransferTrainConfig, half_step, init_transfer, load_transfer, predict_increment,
                                 save_transfer, train_transfer, transfer_rollout)

SPEC = GridSpec.default(8, 8, 2)


def _constant(n=40):
    base = random_state(SPEC, np.random.default_rng(0)).data
    return Trajectory([AtmosphericState(SPEC, base, t) for t in range(n)], 2, n // 2), base


def _varied(n=40):
    rng = np.random.default_rng(1)
    return Trajectory([random_state(SPEC, rng, t) for t in range(n)], 2, n // 2)


def test_constant_dynamics_predicts_no_increment():
    traj, base = _constant()
    hyper = TransferTrainConfig(iterations=300, holdout_steps=0)
    trained = train_transfer(traj, hyper)
    init = init_transfer(SPEC, trained.state_stats, trained.increment_stats, hyper.hidden, hyper.activation,
                         np.random.default_rng(hyper.seed))
    after = np.linalg.norm(predict_increment(trained, base, base))
    before = np.linalg.norm(predict_increment(init, base, base))
    assert after <= 0.1 * before


def test_training_deterministic():
    hyper = TransferTrainConfig(iterations=20, holdout_steps=0, seed=3)
    a = train_transfer(_varied(), hyper)
    b = train_transfer(_varied(), hyper)
    for k in a.weights:
        assert a.weights[k].tobytes() == b.weights[k].tobytes()


@pytest.fixture(scope="module")
def trained():
    return train_transfer(_varied(), TransferTrainConfig(iterations=30, holdout_steps=0))


def test_rollout_time_bookkeeping(trained):
    rng = np.random.default_rng(2)
    xc, xn = random_state(SPEC, rng, 6), random_state(SPEC, rng, 7)
    out = transfer_rollout(xc, xn, trained)
    # half-step indices: X^{t+1} sits at 2(t+1); two half-steps end one model step later
    assert out.first.time_index == 2 * 7 + 1 and out.second.time_index == 2 * 8
    assert np.array_equal(out.precip_total, out.first.precipitation + out.second.precipitation)
    with pytest.raises(ValidationError):
        transfer_rollout(xc, random_state(SPEC, rng, 9), trained)


def test_zero_delta_is_identity(trained):
    rng = np.random.default_rng(3)
    xc, xn = random_state(SPEC, rng, 6), random_state(SPEC, rng, 7)
    a = transfer_rollout(xc, xn, trained)
    b = transfer_rollout(xc, Perturbation.zeros(SPEC).apply(xn), trained)
    assert a.second.data.tobytes() == b.second.data.tobytes()


def test_delta_only_touches_perturbable_channels():
    rng = np.random.default_rng(4)
    xn = random_state(SPEC, rng, 7)
    d = Perturbation.masked(rng.normal(size=SPEC.shape), SPEC)
    moved = d.apply(xn)
    for name in ("humidity",):
        idx = SPEC.indices(name)
        assert np.array_equal(moved.data[..., idx], xn.data[..., idx])
    assert np.array_equal(moved.precipitation, xn.precipitation)


def test_untrained_rejected():
    traj, _ = _constant()
    p = train_transfer(traj, TransferTrainConfig(iterations=1, holdout_steps=0))
    p.trained = False
    x = traj[0]
    with pytest.raises(StateError):
        half_step(p, x, x)


def test_roundtrip(tmp_path, trained):
    back = load_transfer(save_transfer(tmp_path / "t.fld", trained))
    assert back.trained and back.hidden == trained.hidden and back.activation == trained.activation
    for k, v in trained.weights.items():
        assert np.array_equal(back.weights[k], v)
