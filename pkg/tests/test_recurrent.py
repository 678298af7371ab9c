"""Sequence backbone: LSTM gate equations, conditional parameter networks,
and reparameterized sampling."""

import numpy as np
import pytest

from conftest import fd_grads, max_rel_err
from recflow.diffcore import Parameter, Tape, backward
from recflow.diffcore import tape as tp
from recflow.diffcore.tape import Tensor
from recflow.flows import diag_gaussian_log_prob
from recflow.recurrent import (
    FeatureExtractor,
    GaussianParamNet,
    LstmCell,
    LstmState,
    reparam_sample,
)


def zeroed_cell(in_width=3, hidden=4) -> LstmCell:
    cell = LstmCell("lstm", in_width, hidden, np.random.default_rng(0))
    cell.weight.value[:] = 0.0
    cell.bias.value[:] = 0.0
    return cell


def zero_state(hidden=4) -> LstmState:
    return LstmState(h=Tensor(np.zeros((1, hidden))),
                     c=Tensor(np.zeros((1, hidden))))


# ---------------------------------------------------------------------------
# LSTM.
# ---------------------------------------------------------------------------


def test_lstm_zero_weights_zero_cell():
    cell = zeroed_cell()
    out = cell.step(Tensor(np.random.default_rng(1).normal(size=(1, 3))),
                    zero_state())
    np.testing.assert_allclose(out.c.value, 0.0, atol=1e-15)
    np.testing.assert_allclose(out.h.value, 0.0, atol=1e-15)


def test_lstm_zero_weights_halves_cell_state():
    cell = zeroed_cell()
    v = np.array([[2.0, -1.0, 0.5, 4.0]])
    state = LstmState(h=Tensor(np.zeros((1, 4))), c=Tensor(v))
    out = cell.step(Tensor(np.zeros((1, 3))), state)
    np.testing.assert_allclose(out.c.value, 0.5 * v, atol=1e-15)
    np.testing.assert_allclose(out.h.value, 0.5 * np.tanh(0.5 * v), atol=1e-15)


def test_lstm_deterministic_and_replayable():
    rng = np.random.default_rng(2)
    cell = LstmCell("lstm", 3, 4, rng)
    xs = [Tensor(rng.normal(size=(1, 3))) for _ in range(5)]

    def run():
        state = zero_state()
        trace = []
        for x in xs:
            state = cell.step(x, state)
            trace.append((state.h.value.copy(), state.c.value.copy()))
        return trace

    first = run()
    second = run()
    for (h1, c1), (h2, c2) in zip(first, second):
        np.testing.assert_array_equal(h1, h2)
        np.testing.assert_array_equal(c1, c2)


def test_lstm_hidden_state_bounded_by_one():
    rng = np.random.default_rng(3)
    cell = LstmCell("lstm", 3, 8, rng)
    state = zero_state(8)
    for _ in range(50):
        state = cell.step(Tensor(rng.normal(0, 3, size=(1, 3))), state)
        assert np.all(np.abs(state.h.value) <= 1.0)


def test_lstm_rejects_width_mismatch():
    cell = zeroed_cell(in_width=3)
    with pytest.raises(ValueError, match="width"):
        cell.step(Tensor(np.zeros((1, 5))), zero_state())


def test_lstm_gradients_match_fd():
    rng = np.random.default_rng(4)
    cell = LstmCell("lstm", 2, 3, rng)
    xs = rng.normal(size=(3, 1, 2))
    target = rng.normal(size=(1, 3))
    params = cell.parameters()

    def objective():
        state = zero_state(3)
        for x in xs:
            state = cell.step(Tensor(x), state)
        return float(np.sum((state.h.value - target) ** 2))

    with Tape() as tape:
        state = zero_state(3)
        for x in xs:
            state = cell.step(Tensor(x), state)
        diff = tp.sub(state.h, target)
        loss = tp.sum_(tp.square(diff))
    backward(tape, loss)
    numeric = fd_grads(objective, params)
    for name, p in params.items():
        assert max_rel_err(p.grad, numeric[name], floor=1e-4) <= 1e-4, name


# ---------------------------------------------------------------------------
# Prior / posterior parameter networks.
# ---------------------------------------------------------------------------


def test_param_net_sigma_strictly_positive():
    rng = np.random.default_rng(5)
    net = GaussianParamNet("prior", 6, (8,), 4, rng)
    for trial in range(100):
        x = Tensor(np.random.default_rng(trial).normal(0, 4, size=(1, 6)))
        params = net(x)
        assert np.all(params.sigma.value > 0.0)


def test_param_net_zero_weights_gives_log2_sigma():
    rng = np.random.default_rng(6)
    net = GaussianParamNet("prior", 5, (4,), 3, rng)
    for p in net.parameters().values():
        p.value[:] = 0.0
    params = net(Tensor(np.random.default_rng(0).normal(size=(1, 5))))
    np.testing.assert_allclose(params.mu.value, 0.0, atol=1e-15)
    np.testing.assert_allclose(params.sigma.value, np.log(2.0), atol=1e-12)


def test_param_net_gradients_match_fd():
    rng = np.random.default_rng(7)
    net = GaussianParamNet("prior", 4, (4,), 2, rng)
    x = rng.normal(size=(1, 4))
    params_dict = net.parameters()

    def objective():
        p = net(Tensor(x))
        return float(np.sum(p.mu.value) + np.sum(p.sigma.value))

    with Tape() as tape:
        p = net(Tensor(x))
        loss = tp.add(tp.sum_(p.mu), tp.sum_(p.sigma))
    backward(tape, loss)
    numeric = fd_grads(objective, params_dict)
    for name, p in params_dict.items():
        assert max_rel_err(p.grad, numeric[name], floor=1e-4) <= 1e-4, name


def test_posterior_with_zeroed_feature_path_equals_prior():
    rng = np.random.default_rng(8)
    Z, H, F = 3, 4, 5
    prior = GaussianParamNet("prior", Z + H, (6,), Z, rng)
    posterior = GaussianParamNet("posterior", Z + H + F, (6,), Z,
                                 np.random.default_rng(9))
    # copy the prior's weights into the (z, h) block and zero the x block
    pw = prior.net.layers[0].weight.value
    qw = posterior.net.layers[0].weight
    qw.value[:] = 0.0
    qw.value[:Z + H, :] = pw
    posterior.net.layers[0].bias.value = prior.net.layers[0].bias.value.copy()
    posterior.net.layers[1].weight.value = prior.net.layers[1].weight.value.copy()
    posterior.net.layers[1].bias.value = prior.net.layers[1].bias.value.copy()

    z = Tensor(rng.normal(size=(1, Z)))
    h = Tensor(rng.normal(size=(1, H)))
    feats = Tensor(rng.normal(size=(1, F)))
    p = prior(z, h)
    q = posterior(z, h, feats)
    np.testing.assert_allclose(q.mu.value, p.mu.value, atol=1e-12)
    np.testing.assert_allclose(q.sigma.value, p.sigma.value, atol=1e-12)


def test_posterior_sensitive_to_frame_features():
    rng = np.random.default_rng(10)
    net = GaussianParamNet("posterior", 3 + 4 + 5, (8,), 3, rng)
    z = Tensor(rng.normal(size=(1, 3)))
    h = Tensor(rng.normal(size=(1, 4)))
    a = net(z, h, Tensor(np.zeros((1, 5))))
    b = net(z, h, Tensor(np.ones((1, 5))))
    assert np.max(np.abs(a.mu.value - b.mu.value)) > 1e-6


# ---------------------------------------------------------------------------
# Reparameterized sampling.
# ---------------------------------------------------------------------------


def _params(mu, sigma):
    from recflow.recurrent import GaussianParams
    return GaussianParams(mu=Tensor(np.asarray(mu, dtype=float).reshape(1, -1)),
                          sigma=Tensor(np.asarray(sigma, dtype=float).reshape(1, -1)))


def test_reparam_zero_noise_returns_mean():
    params = _params([1.0, -2.0, 0.5], [0.1, 0.2, 0.3])
    sample = reparam_sample(params, np.zeros(3))
    np.testing.assert_array_equal(sample.z.value, params.mu.value)


def test_reparam_unit_noise_shifts_by_sigma():
    params = _params([1.0, 2.0, 3.0], [1.0, 1.0, 1.0])
    sample = reparam_sample(params, np.ones(3))
    np.testing.assert_allclose(sample.z.value, params.mu.value + 1.0)


def test_reparam_sample_variance_matches_sigma():
    rng = np.random.default_rng(11)
    sigma = np.array([0.5, 1.5, 2.0])
    params = _params([0.0, 0.0, 0.0], sigma)
    n = 10 ** 5
    draws = np.empty((n, 3))
    noise = rng.standard_normal((n, 3))
    for i in range(3):
        draws[:, i] = sigma[i] * noise[:, i]
    var = draws.var(axis=0)
    assert np.all(np.abs(var - sigma ** 2) / sigma ** 2 < 0.05)


def test_reparam_gradients_flow_to_mu_and_sigma():
    rng = np.random.default_rng(12)
    net = GaussianParamNet("prior", 3, (4,), 2, rng)
    x = rng.normal(size=(1, 3))
    noise = rng.standard_normal(2)
    target_mu = np.zeros((1, 2))
    params_dict = net.parameters()

    def objective():
        p = net(Tensor(x))
        z = p.mu.value + p.sigma.value * noise
        d = (z - target_mu) / 1.3
        return float(-0.5 * 2 * np.log(2 * np.pi)
                     - 2 * np.log(1.3) - 0.5 * np.sum(d * d))

    with Tape() as tape:
        p = net(Tensor(x))
        sample = reparam_sample(p, noise)
        ll = diag_gaussian_log_prob(sample.z, target_mu, np.full((1, 2), 1.3))
        loss = tp.sum_(ll)
    backward(tape, loss)
    numeric = fd_grads(objective, params_dict)
    for name, p in params_dict.items():
        assert max_rel_err(p.grad, numeric[name], floor=1e-4) <= 1e-4, name


def test_feature_extractor_fixed_output_width():
    rng = np.random.default_rng(13)
    extractor = FeatureExtractor("extractor", 16, (8, 8), rng, act="relu")
    for rows in (1, 5):
        out = extractor(Tensor(rng.normal(size=(rows, 16))))
        assert out.value.shape == (rows, 8)
