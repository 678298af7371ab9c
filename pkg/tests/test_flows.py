"""Conditional flow algebra: coupling forward/inverse, normalization
layers, permutations, stack composition, densities, and sampling."""

import numpy as np
import pytest

from conftest import fd_grads, max_rel_err
from recflow.diffcore import Parameter, Tape, backward
from recflow.diffcore.tape import Tensor
from recflow.flows import (
    ConditionalBase,
    ConditionalCoupling,
    FixedBase,
    FlowError,
    FlowNorm,
    FlowStack,
    Swap,
    diag_gaussian_log_prob,
)

LOG_2PI = np.log(2.0 * np.pi)


def force_coupling(coupling: ConditionalCoupling, s_value: float, t_value: float):
    """Zero the coupling nets and pin constant scale/translation outputs."""
    for p in coupling.scale_net.parameters().values():
        p.value[:] = 0.0
    for p in coupling.translate_net.parameters().values():
        p.value[:] = 0.0
    coupling.scale_net.layers[-1].bias.value[:] = s_value
    coupling.translate_net.layers[-1].bias.value[:] = t_value


def make_coupling(s_value: float, t_value: float, ctx_width: int = 2,
                  clamp: float = 0.0) -> ConditionalCoupling:
    rng = np.random.default_rng(0)
    c = ConditionalCoupling("c", ctx_width, (4,), rng, clamp=clamp)
    force_coupling(c, s_value, t_value)
    return c


def random_stack(depth: int = 3, ctx_width: int = 4, seed: int = 0,
                 clamp: float = 5.0) -> FlowStack:
    rng = np.random.default_rng(seed)
    stack = FlowStack.build("flow", ctx_width, depth, (8,), (8,), rng,
                            clamp=clamp)
    for norm in stack.norm_layers():
        norm.running_mean = rng.normal(0, 0.3, size=2)
        norm.running_var = rng.uniform(0.5, 2.0, size=2)
    return stack


ZERO_CTX = Tensor(np.zeros((1, 2)))


# ---------------------------------------------------------------------------
# Coupling layer.
# ---------------------------------------------------------------------------


def test_coupling_identity_when_nets_zero():
    c = make_coupling(0.0, 0.0)
    b = np.array([[0.4, 0.6], [-1.0, 2.0]])
    x, log_det = c.forward(b, Tensor(np.zeros((2, 2))))
    np.testing.assert_allclose(x.value, b, atol=1e-15)
    np.testing.assert_allclose(log_det.value, 0.0, atol=1e-15)


def test_coupling_forward_scale_example():
    c = make_coupling(np.log(2.0), 0.0)
    x, log_det = c.forward(np.array([[0.4, 0.6]]), ZERO_CTX)
    np.testing.assert_allclose(x.value, [[0.4, 0.3]], atol=1e-12)
    assert log_det.value[0] == pytest.approx(-np.log(2.0), abs=1e-12)


def test_coupling_inverse_scale_example():
    c = make_coupling(np.log(2.0), 0.0)
    b, log_det = c.inverse(np.array([[0.4, 0.3]]), ZERO_CTX)
    np.testing.assert_allclose(b.value, [[0.4, 0.6]], atol=1e-12)
    assert log_det.value[0] == pytest.approx(np.log(2.0), abs=1e-12)


def test_coupling_roundtrip_100_random_points():
    rng = np.random.default_rng(5)
    c = ConditionalCoupling("c", 3, (8,), rng, clamp=5.0)
    b = rng.normal(size=(100, 2))
    ctx = Tensor(rng.normal(size=(100, 3)))
    x, ld_f = c.forward(b, ctx)
    back, ld_i = c.inverse(x, ctx)
    assert np.max(np.abs(back.value - b)) < 1e-9
    np.testing.assert_allclose(ld_i.value, -ld_f.value, atol=1e-12)


# ---------------------------------------------------------------------------
# Normalization layer.
# ---------------------------------------------------------------------------


def test_flow_norm_eval_identity_statistics():
    norm = FlowNorm(epsilon=1e-5)
    v = np.array([[0.3, -0.2]])
    out, log_det = norm.normalize(v, training=False)
    np.testing.assert_allclose(out.value, v, atol=1e-4)
    assert float(log_det.value) == pytest.approx(-np.log(1.0 + 1e-5), abs=1e-12)


def test_flow_norm_training_batch_example():
    norm = FlowNorm(epsilon=1e-5)
    batch = np.array([[1.0, 1.0], [3.0, 3.0]])
    out, log_det = norm.normalize(batch, training=True)
    np.testing.assert_allclose(out.value, [[-1.0, -1.0], [1.0, 1.0]], atol=1e-4)
    assert float(log_det.value) == pytest.approx(-np.log(1.0 + 1e-5), abs=1e-9)


def test_flow_norm_training_requires_batch():
    norm = FlowNorm()
    with pytest.raises(ValueError, match="batch"):
        norm.normalize(np.array([[1.0, 2.0]]), training=True)


def test_flow_norm_eval_mode_deterministic():
    norm = FlowNorm()
    norm.running_mean = np.array([0.2, -0.1])
    norm.running_var = np.array([1.5, 0.7])
    v = np.array([[0.5, 0.5], [1.0, -1.0]])
    a1, d1 = norm.normalize(v, training=False)
    a2, d2 = norm.normalize(v, training=False)
    np.testing.assert_array_equal(a1.value, a2.value)
    assert float(d1.value) == float(d2.value)


def test_flow_norm_running_stats_update_only_when_asked():
    norm = FlowNorm(momentum=0.1)
    batch = np.array([[1.0, 1.0], [3.0, 3.0]])
    norm.normalize(batch, training=True, update_stats=False)
    np.testing.assert_array_equal(norm.running_mean, [0.0, 0.0])
    norm.normalize(batch, training=True, update_stats=True)
    np.testing.assert_allclose(norm.running_mean, [0.2, 0.2])
    np.testing.assert_allclose(norm.running_var, [0.9 + 0.1, 0.9 + 0.1])


def test_flow_norm_roundtrip_with_running_stats():
    norm = FlowNorm()
    norm.running_mean = np.array([0.4, -0.6])
    norm.running_var = np.array([2.0, 0.5])
    v = np.random.default_rng(0).normal(size=(50, 2))
    normed, ld_n = norm.normalize(v, training=False)
    back, ld_d = norm.denormalize(normed)
    assert np.max(np.abs(back.value - v)) < 1e-12
    assert float(ld_n.value) + float(ld_d.value) == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------------------
# Permutation.
# ---------------------------------------------------------------------------


def test_swap_is_self_inverse_with_zero_log_det():
    swap = Swap()
    v = np.array([[1.0, 2.0], [3.0, 4.0]])
    out, log_det = swap.forward(v)
    np.testing.assert_array_equal(out.value, [[2.0, 1.0], [4.0, 3.0]])
    assert float(log_det.value) == 0.0
    back, log_det_i = swap.inverse(out)
    np.testing.assert_array_equal(back.value, v)
    assert float(log_det_i.value) == 0.0


# ---------------------------------------------------------------------------
# Stack densities.
# ---------------------------------------------------------------------------


def test_empty_stack_standard_normal_density():
    stack = FlowStack(FixedBase(), [])
    lp = stack.log_prob(np.array([[0.0, 0.0]]), ZERO_CTX)
    assert lp.value[0] == pytest.approx(-LOG_2PI, abs=1e-12)


def test_single_coupling_change_of_variables():
    stack = FlowStack(FixedBase(), [make_coupling(np.log(2.0), 0.0)])
    lp = stack.log_prob(np.array([[0.0, 0.0]]), ZERO_CTX)
    assert lp.value[0] == pytest.approx(np.log(1.0 / np.pi), abs=1e-9)


def test_stack_log_det_composition():
    stack = random_stack(depth=3, seed=2)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(10, 2))
    ctx = Tensor(rng.normal(size=(10, 4)))
    b, total = stack.inverse_transform(x, ctx)

    v = Tensor(x)
    manual = np.zeros(10)
    for layer in reversed(stack.layers):
        v, ld = layer.inverse(v, ctx)
        manual = manual + ld.value
    np.testing.assert_allclose(total.value, manual, atol=1e-9)
    np.testing.assert_allclose(v.value, b.value, atol=1e-12)

    # inverse-function theorem at matched points
    x2, forward_total = stack.forward_transform(b, ctx)
    np.testing.assert_allclose(forward_total.value, -total.value, atol=1e-9)


def test_stack_invertibility_1000_points():
    stack = random_stack(depth=35, seed=4)
    rng = np.random.default_rng(9)
    x = rng.normal(size=(1000, 2))
    ctx = Tensor(rng.normal(size=(1000, 4)))
    b, ld_i = stack.inverse_transform(x, ctx)
    back, ld_f = stack.forward_transform(b, ctx)
    assert np.max(np.abs(back.value - x)) < 1e-8
    np.testing.assert_allclose(ld_f.value, -ld_i.value, atol=1e-8)


def test_density_integrates_to_one():
    stack = random_stack(depth=2, seed=6)
    # center the base inside the unit square so tails are covered
    base = FixedBase(mu=(0.5, 0.5), sigma=(0.2, 0.25))
    stack = FlowStack(base, stack.layers)
    ctx = Tensor(np.zeros((1, 4)))
    m = 200
    lo, hi = -1.0, 2.0
    cell = (hi - lo) / m
    centers = lo + (np.arange(m) + 0.5) * cell
    xx, yy = np.meshgrid(centers, centers, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    lp = stack.log_prob(pts, ctx)
    mass = float(np.sum(np.exp(lp.value)) * cell * cell)
    assert mass == pytest.approx(1.0, abs=1e-2)


def test_non_finite_intermediate_names_layer():
    # two unclamped couplings whose inverse scales compound past float64
    big = make_coupling(500.0, 0.0, clamp=0.0)
    big2 = make_coupling(500.0, 0.0, clamp=0.0)
    stack = FlowStack(FixedBase(), [big, big2])
    with pytest.raises(FlowError) as err, np.errstate(over="ignore"):
        stack.log_prob(np.array([[0.2, 10.0]]), ZERO_CTX)
    assert err.value.layer_index == 0
    assert "layer 0" in str(err.value)


# ---------------------------------------------------------------------------
# Sampling.
# ---------------------------------------------------------------------------


def test_sample_zero_noise_identity_layers_returns_base_mean():
    base = FixedBase(mu=(0.3, 0.8), sigma=(0.05, 0.05))
    stack = FlowStack(base, [make_coupling(0.0, 0.0)])
    x = stack.sample(ZERO_CTX, np.zeros((3, 2)))
    np.testing.assert_allclose(x.value, np.tile([[0.3, 0.8]], (3, 1)), atol=1e-12)


def test_samples_have_finite_density():
    stack = random_stack(depth=3, seed=10)
    rng = np.random.default_rng(11)
    ctx = Tensor(rng.normal(size=(1, 4)))
    noise = rng.standard_normal((1000, 2))
    x = stack.sample(ctx, noise)
    lp = stack.log_prob(x.value, ctx)
    assert np.all(np.isfinite(lp.value))


def test_identity_stack_sample_mean_matches_base():
    mu = np.array([0.4, 0.6])
    sigma = np.array([0.3, 0.2])
    base = FixedBase(mu=mu, sigma=sigma)
    stack = FlowStack(base, [])
    n = 10 ** 5
    noise = np.random.default_rng(12).standard_normal((n, 2))
    x = stack.sample(Tensor(np.zeros((1, 0))), noise)
    bound = 4.0 * sigma / np.sqrt(n)
    assert np.all(np.abs(x.value.mean(axis=0) - mu) < bound)


# ---------------------------------------------------------------------------
# Gradients and exact reductions.
# ---------------------------------------------------------------------------


def test_flow_log_prob_gradients_match_fd():
    rng = np.random.default_rng(13)
    stack = FlowStack.build("flow", 3, 2, (4,), (4,), rng)
    pts = rng.normal(0.5, 0.2, size=(5, 2))
    ctx_values = rng.normal(size=(1, 3))
    params = stack.parameters()

    def value():
        return float(np.sum(stack.log_prob(pts, Tensor(ctx_values)).value))

    with Tape() as tape:
        out_t = stack.log_prob(pts, Tensor(ctx_values))
        from recflow.diffcore import tape as tp
        loss = tp.sum_(out_t)
    backward(tape, loss)
    numeric = fd_grads(value, params)
    for name, p in params.items():
        assert max_rel_err(p.grad, numeric[name], floor=1e-4) <= 1e-4, name


def test_identity_couplings_reduce_to_base_density():
    rng = np.random.default_rng(14)
    stack = FlowStack.build("flow", 3, 2, (4,), (4,), rng, epsilon=1e-5)
    for layer in stack.layers:
        if isinstance(layer, ConditionalCoupling):
            force_coupling(layer, 0.0, 0.0)
    for norm in stack.norm_layers():
        norm.running_mean = np.zeros(2)
        norm.running_var = np.ones(2) - norm.epsilon  # var + eps == 1 exactly
    ctx = Tensor(rng.normal(size=(1, 3)))
    pts = rng.normal(0.5, 0.3, size=(20, 2))
    lp = stack.log_prob(pts, ctx)
    mu, sigma = stack.base.params_for(ctx)
    direct = diag_gaussian_log_prob(pts, mu, sigma)
    np.testing.assert_array_equal(lp.value, direct.value)


def test_conditional_base_sigma_positive_everywhere():
    rng = np.random.default_rng(15)
    base = ConditionalBase("base", 4, (8,), rng)
    for trial in range(50):
        ctx = Tensor(np.random.default_rng(trial).normal(0, 5, size=(1, 4)))
        _, sigma = base.params_for(ctx)
        assert np.all(sigma.value > 0.0)
