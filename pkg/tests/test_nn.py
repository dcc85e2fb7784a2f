import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import central_difference, jitter_biases, rel_error
from wakesac.nn import (AdamState, GaussianPolicyOutput, MlpParams, SquashConfig, adam_step,
                        atanh_invert, bc_loss, deterministic_action, init_mlp, load_params,
                        mlp_forward, mlp_grad, mse_loss, sample_squashed, save_params,
                        squashed_logprob)


def naive_forward(params, x):
    # independent per-sample implementation with explicit loops
    out = []
    for row in np.atleast_2d(x):
        h = list(row)
        for li, (W, b) in enumerate(params.layers):
            nxt = []
            for j in range(W.shape[1]):
                s = b[j] + sum(h[i] * W[i, j] for i in range(W.shape[0]))
                nxt.append(max(s, 0.0) if li < len(params.layers) - 1 else s)
            h = nxt
        out.append(h)
    return np.array(out)


def test_zero_network():
    p = init_mlp([3, 5, 2], np.random.default_rng(0))
    z = p.zeros_like()
    out, _ = mlp_forward(z, np.ones(3))
    assert out.tolist() == [0.0, 0.0]


def test_hand_computed_forward():
    p = MlpParams([(np.array([[2.0]]), np.array([1.0])), (np.array([[3.0]]), np.array([-1.0]))])
    assert mlp_forward(p, np.array([0.5]))[0][0] == 3.0 * (2.0 * 0.5 + 1.0) - 1.0
    assert mlp_forward(p, np.array([-2.0]))[0][0] == -1.0  # ReLU off


def test_forward_matches_naive():
    rng = np.random.default_rng(1)
    p = init_mlp([4, 6, 5, 3], rng)
    x = rng.normal(size=(7, 4))
    np.testing.assert_allclose(mlp_forward(p, x)[0], naive_forward(p, x), atol=1e-12)


def test_shape_errors():
    p = init_mlp([3, 4, 1], np.random.default_rng(0))
    with pytest.raises(ValueError):
        mlp_forward(p, np.ones(4))
    with pytest.raises(ValueError):
        MlpParams([(np.ones((3, 4)), np.ones(4)), (np.ones((5, 1)), np.ones(1))])


def test_zero_upstream():
    p = init_mlp([3, 4, 2], np.random.default_rng(0))
    g, gx = mlp_grad(p, np.ones((2, 3)), np.zeros((2, 2)))
    assert all(np.all(a == 0) for a in g.arrays()) and np.all(gx == 0)


def test_linear_region_input_grad():
    W1, W2 = np.array([[1.0, 2.0], [0.5, 1.0]]), np.array([[3.0], [-1.0]])
    p = MlpParams([(W1, np.zeros(2)), (W2, np.zeros(1))])
    _, gx = mlp_grad(p, np.array([1.0, 1.0]), np.array([1.0]))
    np.testing.assert_allclose(gx, (W1 @ W2)[:, 0])


class _Box:
    # lets central_difference perturb a plain array
    def __init__(self, a):
        self.a = a

    def arrays(self):
        yield self.a


@pytest.mark.parametrize("seed", range(5))
def test_mlp_grad_finite_difference(seed):
    rng = np.random.default_rng(seed)
    p = jitter_biases(init_mlp([3, 5, 4, 2], rng), rng)
    x = rng.normal(size=(6, 3))
    w = rng.normal(size=(6, 2))
    g, gx = mlp_grad(p, x, w)
    f = lambda: float(np.sum(mlp_forward(p, x)[0] * w))
    assert rel_error(list(g.arrays()), central_difference(f, p)) < 1e-4
    assert rel_error([gx], central_difference(f, _Box(x))) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_bc_loss_finite_difference(seed):
    rng = np.random.default_rng(seed)
    p = jitter_biases(init_mlp([3, 6, 6, 4], rng), rng)
    obs, act = rng.normal(size=(8, 3)), rng.uniform(-0.95, 0.95, (8, 2))
    _, g = bc_loss(p, obs, act)
    f = lambda: bc_loss(p, obs, act, grad=False)[0]
    assert rel_error(list(g.arrays()), central_difference(f, p)) < 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_mse_loss_finite_difference(seed):
    rng = np.random.default_rng(seed)
    p = jitter_biases(init_mlp([4, 6, 6, 1], rng), rng)
    x, y = rng.normal(size=(9, 4)), rng.normal(size=9)
    _, g = mse_loss(p, x, y)
    f = lambda: mse_loss(p, x, y, grad=False)[0]
    assert rel_error(list(g.arrays()), central_difference(f, p)) < 1e-4


def test_adam_zero_gradient():
    p = init_mlp([2, 3, 1], np.random.default_rng(0))
    before = p.copy()
    st_ = AdamState.zeros(p)
    adam_step(p, p.zeros_like(), st_, 1e-3)
    assert p.equals(before) and st_.t == 1


def test_adam_first_step_is_lr_sign():
    p = MlpParams([(np.zeros((1, 2)), np.zeros(2))])
    g = MlpParams([(np.array([[0.3, -2.0]]), np.array([1e-3, -5.0]))])
    adam_step(p, g, AdamState.zeros(p), 0.01)
    np.testing.assert_allclose(p.layers[0][0], [[-0.01, 0.01]], rtol=1e-6)
    np.testing.assert_allclose(p.layers[0][1], [-0.01, 0.01], rtol=1e-4)


def test_adam_two_steps_hand_recurrence():
    p = MlpParams([(np.array([[1.0]]), np.array([0.0]))])
    s = AdamState.zeros(p)
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    x, m, v = 1.0, 0.0, 0.0
    for t, gv in enumerate([0.5, -0.25], start=1):
        adam_step(p, MlpParams([(np.array([[gv]]), np.array([0.0]))]), s, lr)
        m = b1 * m + (1 - b1) * gv
        v = b2 * v + (1 - b2) * gv * gv
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    assert p.layers[0][0][0, 0] == pytest.approx(x, abs=1e-12)


def test_atanh_invert_examples():
    assert atanh_invert(0.3, SquashConfig(2.0, 0.3)) == 0.0
    assert atanh_invert(0.5) == pytest.approx(0.549306, abs=1e-6)
    assert np.all(np.isfinite(atanh_invert(np.array([-1.0, 1.0]))))
    assert np.all(np.isfinite(atanh_invert(np.array([-0.5, 4.5]), SquashConfig(2.5, 2.0))))


def test_squash_validation():
    with pytest.raises(ValueError):
        SquashConfig(scale=0.0)


def _out(mu, ls):
    return GaussianPolicyOutput(np.atleast_1d(mu).astype(float), np.atleast_1d(ls).astype(float))


def test_logprob_at_origin():
    assert squashed_logprob(_out(0.0, 0.0), np.array([0.0])) == pytest.approx(-0.918939, abs=1e-6)


def integrate_density(out, squash=SquashConfig(), n=2_000_001):
    """Trapezoid rule for exp(logprob) over the open action interval."""
    lo, hi = squash.bias - squash.scale, squash.bias + squash.scale
    pad = 1e-9 * squash.scale
    a = np.linspace(lo + pad, hi - pad, n)
    dens = np.exp(squashed_logprob(out, a[:, None], squash))
    return float(np.sum(0.5 * (dens[1:] + dens[:-1]) * np.diff(a)))


def random_head(rng):
    # policy-like heads; a very wide sigma would put mass in the atanh clip zone
    return _out(rng.uniform(-2, 2), rng.uniform(-2, 0.5))


@pytest.mark.parametrize("seed", range(10))
def test_density_integrates_to_one(seed):
    out = random_head(np.random.default_rng(seed))
    assert integrate_density(out) == pytest.approx(1.0, abs=1e-3)


def test_density_integrates_with_scale():
    sq = SquashConfig(scale=3.0, bias=-1.0)
    assert integrate_density(_out(0.4, -0.5), sq) == pytest.approx(1.0, abs=1e-3)


def test_monte_carlo_entropy():
    out = _out([0.2, -0.7], [-0.3, 0.1])
    rng = np.random.default_rng(0)
    s = sample_squashed(GaussianPolicyOutput(np.tile(out.mu, (100_000, 1)),
                                             np.tile(out.log_std, (100_000, 1))), rng=rng)
    # analytic: Gaussian entropy plus E[log(1 - tanh^2 u)] by Gauss-Hermite quadrature
    sigma = np.exp(out.log_std)
    h_gauss = np.sum(0.5 * np.log(2 * np.pi * np.e * sigma**2))
    z, w = np.polynomial.hermite_e.hermegauss(80)
    u = out.mu[:, None] + sigma[:, None] * z[None]
    log_jac = 2 * (math.log(2) - u - np.logaddexp(0, -2 * u))
    corr = np.sum(log_jac @ w) / math.sqrt(2 * math.pi)
    mc = -s.logprob
    se = mc.std() / math.sqrt(len(mc))
    assert abs(mc.mean() - (h_gauss + corr)) < 3 * se + 1e-3


def test_sample_consistent_with_logprob():
    rng = np.random.default_rng(2)
    out = GaussianPolicyOutput(rng.normal(size=(50, 3)), rng.uniform(-2, 0.5, (50, 3)))
    s = sample_squashed(out, rng=rng)
    inside = np.all(np.abs(s.action) < 1 - 1e-6, axis=1)
    np.testing.assert_allclose(s.logprob[inside], squashed_logprob(out, s.action)[inside], atol=1e-9)
    assert np.all(np.abs(s.action) < 1)


def test_sample_small_sigma_and_mean():
    sq = SquashConfig(2.0, 1.0)
    s = sample_squashed(_out(0.7, -20.0), sq, rng=np.random.default_rng(0))
    assert s.action[0] == pytest.approx(np.tanh(0.7) * 2 + 1, abs=1e-8)
    assert deterministic_action(_out(0.7, 0.0), sq)[0] == pytest.approx(np.tanh(0.7) * 2 + 1)
    big = GaussianPolicyOutput(np.full((100_000, 1), 0.3), np.full((100_000, 1), math.log(0.8)))
    pre = sample_squashed(big, rng=np.random.default_rng(1)).pre_tanh
    assert abs(pre.mean() - 0.3) < 3 * 0.8 / math.sqrt(1e5)


def test_sampling_determinism():
    out = _out([0.1, 0.2], [0.0, -1.0])
    a = sample_squashed(out, rng=np.random.default_rng(9)).action
    b = sample_squashed(out, rng=np.random.default_rng(9)).action
    np.testing.assert_array_equal(a, b)


@settings(max_examples=50)
@given(st.floats(-1e6, 1e6), st.floats(-1e3, 1e3), st.floats(-2, 2))
def test_clamp_keeps_things_finite(mu, raw_ls, a):
    out = GaussianPolicyOutput.from_raw(np.array([mu, raw_ls]))
    assert -20 <= out.log_std[0] <= 2
    assert np.isfinite(squashed_logprob(out, np.array([a])))
    s = sample_squashed(out, rng=np.random.default_rng(0))
    assert np.all(np.isfinite(s.action)) and np.all(np.isfinite(s.logprob))


def test_save_load(tmp_path):
    p = init_mlp([3, 4, 2], np.random.default_rng(0))
    save_params(tmp_path / "p.npz", {"actor": p}, {"step": 5})
    nets, meta = load_params(tmp_path / "p.npz", {"actor": [3, 4, 2]})
    assert nets["actor"].equals(p) and meta == {"step": 5}
    with pytest.raises(ValueError):
        load_params(tmp_path / "p.npz", {"actor": [3, 5, 2]})
