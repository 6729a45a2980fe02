"""Reverse-mode derivatives against central finite differences (h = 1e-5)."""

import numpy as np
import pytest

from conftest import random_params, random_state
from oracles import central_difference
from stormsteer import nn
from stormsteer.diffusion import (DenoiserInputs, NoiseSchedule, denoise_forward, net_backward,
                                  net_forward, vjp_denoiser)
from stormsteer.fields import GridSpec, TargetRegion, channel_mask
from stormsteer.guidance import RolloutPlan, residual_gradient, rollout_objective

H = 1e-5
PROBES = 10


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def check_directional(f, grad, x, rng, tol, mask=None):
    """f: array -> scalar; grad: the claimed gradient of f at x."""
    worst = 0.0
    for _ in range(PROBES):
        u = rng.normal(size=x.shape)
        if mask is not None:
            u = u * mask
        fd = central_difference(f, x, u, H)
        worst = max(worst, rel_err(float(np.sum(grad * u)), fd))
    assert worst <= tol, worst
    return worst


@pytest.mark.parametrize("name", ["silu", "tanh", "linear"])
def test_activation_derivatives(name):
    f, df = nn.ACTIVATIONS[name]
    rng = np.random.default_rng(0)
    x = rng.normal(scale=2.0, size=50)
    w = rng.normal(size=50)
    check_directional(lambda v: float(np.sum(w * f(v))), w * df(x), x, rng, 1e-4)


def test_dense_backward():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 4, 5))
    W = rng.normal(size=(5, 7))
    b = rng.normal(size=7)
    cot = rng.normal(size=(2, 3, 4, 7))
    dx, dw, db = nn.dense_backward(x, W, cot)
    check_directional(lambda v: float(np.sum(cot * nn.dense(v, W, b))), dx, x, rng, 1e-4)
    check_directional(lambda v: float(np.sum(cot * nn.dense(x, v, b))), dw, W, rng, 1e-4)
    check_directional(lambda v: float(np.sum(cot * nn.dense(x, W, v))), db, b, rng, 1e-4)


@pytest.mark.parametrize("periodic", [(False, True), (False, False), (True, True)])
def test_conv_columns_backward(periodic):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 5, 6, 3))
    cot = rng.normal(size=(1, 5, 6, 27))
    dx = nn.col2im3(cot, *periodic)
    check_directional(lambda v: float(np.sum(cot * nn.im2col3(v, *periodic))), dx, x, rng, 1e-4)


def test_pad_adjoint_identity():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 4, 5, 3))
    for pr in (False, True):
        for pc in (False, True):
            y = rng.normal(size=(2, 6, 7, 3))
            lhs = np.sum(nn.pad_grid(x, pr, pc) * y)
            rhs = np.sum(x * nn.unpad_grid_grad(y, pr, pc))
            assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_network_weight_gradients(small_spec):
    rng = np.random.default_rng(4)
    params = random_params(small_spec, rng)
    inp = rng.normal(size=(2,) + small_spec.shape[:2] + (params.n_inputs,))
    out, cache = net_forward(params, inp)
    cot = rng.normal(size=out.shape)
    dinp, grads = net_backward(params, cache, cot)

    def f_input(v):
        return float(np.sum(cot * net_forward(params, v)[0]))

    check_directional(f_input, dinp, inp, rng, 1e-4)
    for key in params.weights:
        base = params.weights[key]

        def f_w(v, key=key):
            saved = params.weights[key]
            params.weights[key] = v
            try:
                return float(np.sum(cot * net_forward(params, inp)[0]))
            finally:
                params.weights[key] = saved

        check_directional(f_w, grads[key], base.copy(), rng, 1e-4)


@pytest.mark.parametrize("sigma", [0.03, 1.0, 80.0])
def test_denoiser_vjp(small_spec, small_params, sigma):
    rng = np.random.default_rng(5)
    xp = random_state(small_spec, rng).data
    xc = random_state(small_spec, rng).data
    z = rng.normal(size=small_spec.shape)
    cot = rng.normal(size=small_spec.shape)
    g = vjp_denoiser(DenoiserInputs(z, xp, xc, sigma), small_params, cot)

    def f(which):
        def inner(v):
            args = {"z": z, "x_prev": xp, "x_cur": xc}
            args[which] = v
            return float(np.sum(cot * denoise_forward(small_params, args["z"], args["x_prev"],
                                                      args["x_cur"], sigma)[0]))
        return inner

    for which, x in (("z", z), ("x_prev", xp), ("x_cur", xc)):
        check_directional(f(which), g[which], x, rng, 1e-4)


def _composition_setup(seed, T, n):
    spec = GridSpec.default(8, 8, 2)
    rng = np.random.default_rng(seed)
    params = random_params(spec, rng)
    schedule = NoiseSchedule.geometric(6, 80.0, 0.03)
    xc = random_state(spec, rng).data
    plan = RolloutPlan.draw(schedule, n, T, spec.shape, rng)
    region = TargetRegion.around((3, 3), 1, spec)
    return spec, rng, params, schedule, xc, plan, region


@pytest.mark.parametrize("T,n", [(2, 2), (3, 2), (2, 1)])
def test_rollout_gradient_wrt_next_state(T, n):
    spec, rng, params, schedule, xc, plan, region = _composition_setup(6, T, n)
    xn = xc + rng.normal(scale=0.1, size=spec.shape)
    _, g, _ = rollout_objective(xn, xc, params, schedule, plan, region, T)

    def f(v):
        return rollout_objective(v, xc, params, schedule, plan, region, T, need_grad=False)[0]

    check_directional(f, g, xn, rng, 1e-3)


def test_precip_loss_through_rollout_wrt_residual():
    spec, rng, params, schedule, xc, plan, region = _composition_setup(7, 2, 2)
    zhat = rng.normal(scale=0.5, size=spec.shape)
    _, g = residual_gradient(zhat, xc, params, schedule, plan, region, 2)
    mask = np.broadcast_to(channel_mask(spec), spec.shape)

    def f(v):
        return residual_gradient(v, xc, params, schedule, plan, region, 2)[0]

    check_directional(f, g, zhat, rng, 1e-3, mask=mask)
    assert np.all(g[..., channel_mask(spec) == 0] == 0)


def test_zero_cotangent_gives_zero_gradients(small_spec, small_params):
    rng = np.random.default_rng(8)
    inputs = DenoiserInputs(rng.normal(size=small_spec.shape), random_state(small_spec, rng).data,
                            random_state(small_spec, rng).data, 2.0)
    g = vjp_denoiser(inputs, small_params, np.zeros(small_spec.shape))
    assert all(not np.any(v) for v in g.values())


def test_linear_network_gradient_is_map_transpose(small_spec):
    """Identity 1x1 layers, zero 3x3 kernels except the centre tap, linear activation."""
    rng = np.random.default_rng(9)
    p = random_params(small_spec, rng, hidden=small_spec.n_channels * 3 + 1, activation="linear")
    D = p.hidden
    p.weights["enc_w"] = np.eye(p.n_inputs, D)
    conv = np.zeros((9 * D, D))
    conv[4 * D:5 * D] = np.eye(D)
    p.weights["c1_w"] = conv
    p.weights["c2_w"] = conv.copy()
    A = rng.normal(size=(D, small_spec.n_channels))
    p.weights["dec_w"] = A
    for k in ("enc_b", "c1_b", "c2_b", "dec_b"):
        p.weights[k] = np.zeros_like(p.weights[k])
    inp = rng.normal(size=(1,) + small_spec.shape[:2] + (p.n_inputs,))
    out, cache = net_forward(p, inp)
    np.testing.assert_allclose(out, inp @ A, atol=1e-12)
    cot = rng.normal(size=out.shape)
    dinp, _ = net_backward(p, cache, cot, need_weights=False)
    np.testing.assert_allclose(dinp, cot @ A.T, atol=1e-12)
