import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rvslab import nn_core
from rvslab.nn_core import (
    AdamState,
    CategoricalHead,
    CheckpointFormatError,
    GaussianHead,
    HeadOutputs,
    MlpPolicy,
    NonFiniteError,
    adam_step,
    decode_checkpoint,
    encode_checkpoint,
    forward,
    gradient_check,
    head_nll,
    init_mlp,
    loss_and_grad,
    nll_loss,
    sample_action,
)


def small_batch(policy, n, rng):
    x = rng.normal(size=(n, policy.input_dim))
    head = policy.head
    if isinstance(head, CategoricalHead):
        a = rng.uniform(head.low, head.high, size=(n, head.action_dims))
    else:
        a = rng.normal(size=(n, head.action_dims))
    return x, a


# --- init -----------------------------------------------------------------


def test_init_biases_and_log_std_zero():
    p = init_mlp(3, 4, GaussianHead(2), seed=7)
    for k in ("b1", "b2", "b3", "log_std"):
        assert np.all(p.params[k] == 0.0)


def test_init_is_deterministic():
    a = init_mlp(3, 16, CategoricalHead((-1.0,), (1.0,)), seed=3)
    b = init_mlp(3, 16, CategoricalHead((-1.0,), (1.0,)), seed=3)
    assert a.same_parameters(b)
    c = init_mlp(3, 16, CategoricalHead((-1.0,), (1.0,)), seed=4)
    assert not a.same_parameters(c)


def test_parameter_count_width_256():
    p = init_mlp(3, 256, GaussianHead(2), seed=0)
    assert p.num_parameters() == 3 * 256 + 256 + 256 * 256 + 256 + 256 * 2 + 2 + 2 == 67_332


def test_init_weight_bounds():
    p = init_mlp(5, 64, GaussianHead(1), seed=1)
    for name, fan_in in (("W1", 5), ("W2", 64), ("W3", 64)):
        bound = math.sqrt(6.0 / fan_in)
        w = p.params[name]
        assert np.all(np.abs(w) <= bound)
        assert np.abs(w).max() > 0.8 * bound


@pytest.mark.parametrize("args", [(0, 4), (3, 0), (-1, 4)])
def test_init_rejects_bad_dims(args):
    with pytest.raises(ValueError):
        init_mlp(args[0], args[1], GaussianHead(1), seed=0)


def test_categorical_needs_two_bins():
    with pytest.raises(ValueError):
        CategoricalHead((0.0,), (1.0,), bins=1)


# --- forward ----------------------------------------------------------------


def test_zero_network_gaussian_mean_is_zero():
    p = MlpPolicy(3, 8, GaussianHead(2))
    out = forward(p, np.random.default_rng(0).normal(size=(4, 3)))
    assert np.all(out.mean == 0.0)


def test_forward_dim_mismatch_and_nonfinite():
    p = init_mlp(3, 8, GaussianHead(1), seed=0)
    with pytest.raises(ValueError):
        forward(p, np.zeros((2, 4)))
    with pytest.raises(NonFiniteError):
        forward(p, np.array([[0.0, np.nan, 1.0]]))


def test_dropout_zero_train_equals_eval():
    p = init_mlp(3, 16, GaussianHead(2), seed=0, dropout_p=0.0)
    x = np.random.default_rng(1).normal(size=(5, 3))
    a = forward(p, x, train=True, rng=np.random.default_rng(2))
    b = forward(p, x, train=False)
    assert np.array_equal(a.mean, b.mean)


def test_eval_forward_is_pure():
    p = init_mlp(3, 16, CategoricalHead((0.0,), (1.0,)), seed=0, dropout_p=0.3)
    x = np.random.default_rng(1).normal(size=(5, 3))
    assert np.array_equal(forward(p, x).logits, forward(p, x).logits)


def test_inverted_dropout_preserves_expected_activation():
    p = init_mlp(3, 32, GaussianHead(1), seed=0, dropout_p=0.5)
    x = np.tile(np.random.default_rng(5).normal(size=(1, 3)), (10_000, 1))
    train = forward(p, x, train=True, rng=np.random.default_rng(6))
    evals = forward(p, x[:1], train=False)
    h_train = train.cache["h1"].mean(axis=0)
    h_eval = evals.cache["h1"][0]
    active = h_eval > 0
    assert active.any()
    rel = abs(h_train[active].sum() - h_eval[active].sum()) / h_eval[active].sum()
    assert rel < 0.02
    # per unit: within 5 binomial standard errors
    se = h_eval[active] / math.sqrt(10_000)
    assert np.all(np.abs(h_train[active] - h_eval[active]) < 5 * se)


def test_train_dropout_needs_rng():
    p = init_mlp(3, 8, GaussianHead(1), seed=0, dropout_p=0.2)
    with pytest.raises(ValueError):
        forward(p, np.zeros((1, 3)), train=True)


# --- losses -----------------------------------------------------------------


def test_uniform_logits_cross_entropy():
    head = CategoricalHead((0.0,), (4.0,), bins=4)
    out = HeadOutputs(head, logits=np.zeros((1, 1, 4)))
    loss, *_ = head_nll(out, np.array([[2.5]]))
    assert loss == pytest.approx(math.log(4), abs=1e-12)


def test_standard_normal_at_mode():
    out = HeadOutputs(GaussianHead(1), mean=np.zeros((1, 1)), log_std=np.zeros(1))
    loss, *_ = head_nll(out, np.zeros((1, 1)))
    assert loss == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-12)


def test_gaussian_head_gradient_closed_form():
    # d/dmu = (mu - a)/sigma^2, d/dlog_sigma = 1 - (a - mu)^2/sigma^2, averaged over the batch
    rng = np.random.default_rng(0)
    mu, a = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    log_std = np.array([0.3, -0.7])
    out = HeadOutputs(GaussianHead(2), mean=mu, log_std=log_std)
    loss, d_mean, d_log_std, _ = head_nll(out, a)
    var = np.exp(2 * log_std)
    expected = np.mean(np.sum(0.5 * (a - mu) ** 2 / var + log_std + 0.5 * math.log(2 * math.pi), axis=1))
    assert loss == pytest.approx(expected, rel=1e-14)
    assert np.allclose(d_mean, (mu - a) / var / 6, rtol=1e-13)
    assert np.allclose(d_log_std, np.sum(1 - (a - mu) ** 2 / var, axis=0) / 6, rtol=1e-13)


def test_out_of_range_categorical_clamps_and_counts():
    p = init_mlp(2, 8, CategoricalHead((-1.0,), (1.0,), bins=4), seed=0)
    out = forward(p, np.zeros((3, 2)))
    in_range = nll_loss(p, forward(p, np.zeros((3, 2))), np.array([[-1.0], [0.0], [1.0]]))[0]
    clamped = nll_loss(p, out, np.array([[-5.0], [0.0], [9.0]]))[0]
    assert clamped == pytest.approx(in_range)
    assert p.clamped_actions == 2


def test_discrete_head_bin_centers_are_integers():
    head = CategoricalHead.for_discrete(5)
    assert np.array_equal(head.centers()[0], np.arange(5.0))
    idx, outside = head.to_bins(np.arange(5.0))
    assert np.array_equal(idx[:, 0], np.arange(5)) and outside == 0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), bins=st.integers(2, 9), dims=st.integers(1, 3), n=st.integers(1, 8))
def test_categorical_nll_nonnegative(seed, bins, dims, n):
    rng = np.random.default_rng(seed)
    head = CategoricalHead(tuple([-1.0] * dims), tuple([1.0] * dims), bins)
    out = HeadOutputs(head, logits=rng.normal(scale=5, size=(n, dims, bins)))
    loss, *_ = head_nll(out, rng.uniform(-1, 1, size=(n, dims)))
    assert loss >= 0.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), dims=st.integers(1, 3))
def test_gaussian_nll_lower_bound_with_clamped_log_std(seed, dims):
    # per example and dim the NLL is >= 0.5*ln(2*pi) + log_std >= 0.5*ln(2*pi*sigma_min^2)
    rng = np.random.default_rng(seed)
    log_std = np.clip(rng.normal(scale=4, size=dims), *nn_core.LOG_STD_BOUNDS)
    out = HeadOutputs(GaussianHead(dims), mean=rng.normal(size=(1, dims)), log_std=log_std)
    loss, *_ = head_nll(out, rng.normal(size=(1, dims)))
    sigma_min = math.exp(nn_core.LOG_STD_BOUNDS[0])
    assert loss >= dims * 0.5 * math.log(2 * math.pi * sigma_min**2) - 1e-12


# --- gradients --------------------------------------------------------------


def test_gradient_check_tiny_net():
    rng = np.random.default_rng(0)
    p = init_mlp(3, 2, GaussianHead(2), seed=1)
    p.params["log_std"][:] = [0.2, -0.3]
    assert gradient_check(p, small_batch(p, 5, rng)) <= 1e-4


@pytest.mark.parametrize("head", [GaussianHead(2), CategoricalHead((-1.0, 0.0), (1.0, 2.0), bins=5)])
def test_gradient_check_with_frozen_dropout_masks(head):
    rng = np.random.default_rng(3)
    p = init_mlp(4, 12, head, seed=2, dropout_p=0.3)
    assert gradient_check(p, small_batch(p, 6, rng), train=True, rng=np.random.default_rng(9)) <= 1e-4


def test_gradient_check_catches_wrong_gradient(monkeypatch):
    rng = np.random.default_rng(0)
    p = init_mlp(3, 6, GaussianHead(1), seed=1)
    real = nn_core.backward

    def broken(policy, cache, d_out):
        g = real(policy, cache, d_out)
        g["W2"] = g["W2"] * 1.01
        return g

    monkeypatch.setattr(nn_core, "backward", broken)
    assert gradient_check(p, small_batch(p, 4, rng)) > 1e-3


def test_gradient_check_rejects_bad_epsilon():
    p = init_mlp(2, 2, GaussianHead(1), seed=0)
    with pytest.raises(ValueError):
        gradient_check(p, (np.zeros((1, 2)), np.zeros((1, 1))), epsilon=0.1)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), width=st.integers(1, 32), batch=st.integers(1, 16),
       gaussian=st.booleans(), in_dim=st.integers(1, 4))
def test_gradient_check_property(seed, width, batch, gaussian, in_dim):
    rng = np.random.default_rng(seed)
    head = GaussianHead(2) if gaussian else CategoricalHead((-1.0, -1.0), (1.0, 1.0), bins=3)
    p = init_mlp(in_dim, width, head, seed=seed)
    assert gradient_check(p, small_batch(p, batch, rng)) <= 1e-4


# --- adam -------------------------------------------------------------------


def zero_grads(policy):
    return {k: np.zeros_like(v) for k, v in policy.params.items()}


def test_adam_zero_gradient_is_fixed_point():
    p = init_mlp(3, 8, GaussianHead(2), seed=0)
    before = p.copy()
    state = AdamState(p)
    adam_step(p, zero_grads(p), state, 1e-3)
    assert p.same_parameters(before)
    assert state.step == 1
    assert all(np.all(state.m[k] == 0) and np.all(state.v[k] == 0) for k in state.m)


def test_adam_first_step_is_lr_times_sign():
    p = init_mlp(3, 8, GaussianHead(2), seed=0)
    before = p.copy()
    g = {k: np.random.default_rng(1).normal(size=v.shape) for k, v in p.params.items()}
    adam_step(p, g, AdamState(p), 1e-3)
    for k in p.params:
        delta = p.params[k] - before.params[k]
        # exact up to eps / |g|
        assert np.allclose(delta, -1e-3 * np.sign(g[k]), rtol=1e-8 / np.abs(g[k]).min() + 1e-12, atol=0)


def test_adam_quadratic_converges_monotonically():
    p = MlpPolicy(1, 1, GaussianHead(1))
    state = AdamState(p)
    dist = []
    for _ in range(100):
        g = zero_grads(p)
        theta = p.params["b3"][0]
        g["b3"][0] = 2.0 * (theta - 3.0)
        adam_step(p, g, state, 1e-2)
        dist.append(abs(p.params["b3"][0] - 3.0))
    assert all(b < a for a, b in zip(dist[9:], dist[10:]))


def test_adam_rejects_nonfinite_without_mutation():
    p = init_mlp(3, 8, GaussianHead(2), seed=0)
    before = p.copy()
    state = AdamState(p)
    g = zero_grads(p)
    g["W2"][0, 0] = np.inf
    with pytest.raises(NonFiniteError):
        adam_step(p, g, state, 1e-3)
    assert p.same_parameters(before) and state.step == 0


def test_adam_shape_mismatch():
    p = init_mlp(3, 8, GaussianHead(2), seed=0)
    g = zero_grads(p)
    g["b1"] = np.zeros(3)
    with pytest.raises(ValueError):
        adam_step(p, g, AdamState(p), 1e-3)


def test_log_std_clamped_after_update():
    p = init_mlp(3, 8, GaussianHead(2), seed=0)
    p.params["log_std"][:] = [1.9999, -4.9999]
    g = zero_grads(p)
    g["log_std"][:] = [-1.0, 1.0]
    adam_step(p, g, AdamState(p), 0.5)
    assert np.array_equal(p.params["log_std"], [2.0, -5.0])


def test_memorizes_toy_dataset():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(16, 3))
    a = rng.integers(0, 4, size=(16, 1)).astype(float)
    p = init_mlp(3, 64, CategoricalHead.for_discrete(4), seed=0)
    state = AdamState(p)
    first = None
    for _ in range(1000):
        loss, g = loss_and_grad(p, x, a)
        first = loss if first is None else first
        adam_step(p, g, state, 1e-3)
    assert loss < 0.1 * first


# --- sampling -----------------------------------------------------------------


def test_deterministic_categorical_dominant_and_tie():
    head = CategoricalHead((0.0,), (4.0,), bins=4)
    centers = head.centers()[0]
    dom = sample_action(HeadOutputs(head, logits=np.array([[[10.0, 0, 0, 0]]])), "deterministic")
    tie = sample_action(HeadOutputs(head, logits=np.zeros((1, 1, 4))), "deterministic")
    assert dom[0, 0] == centers[0] and tie[0, 0] == centers[0]


def test_deterministic_gaussian_is_mean():
    out = HeadOutputs(GaussianHead(2), mean=np.array([[0.3, -0.2]]), log_std=np.zeros(2))
    assert np.array_equal(sample_action(out, "deterministic"), [[0.3, -0.2]])


def test_stochastic_categorical_frequencies():
    head = CategoricalHead((0.0,), (3.0,), bins=3)
    probs = np.array([0.2, 0.5, 0.3])
    out = HeadOutputs(head, logits=np.tile(np.log(probs), (50_000, 1, 1)))
    acts = sample_action(out, "stochastic", np.random.default_rng(0))[:, 0]
    freq = np.array([(acts == c).mean() for c in head.centers()[0]])
    sigma = np.sqrt(probs * (1 - probs) / 50_000)
    assert np.all(np.abs(freq - probs) < 3 * sigma)


def test_stochastic_gaussian_moments():
    out = HeadOutputs(GaussianHead(1), mean=np.full((40_000, 1), 2.0), log_std=np.array([math.log(0.5)]))
    a = sample_action(out, "stochastic", np.random.default_rng(0))
    assert abs(a.mean() - 2.0) < 3 * 0.5 / 200
    assert abs(a.std() - 0.5) < 0.01


def test_unknown_sampling_mode():
    out = HeadOutputs(GaussianHead(1), mean=np.zeros((1, 1)), log_std=np.zeros(1))
    with pytest.raises(ValueError):
        sample_action(out, "greedy")


# --- checkpoints ------------------------------------------------------------


@pytest.mark.parametrize("head", [GaussianHead(2), CategoricalHead((-1.0, 0.0), (1.0, 3.0), bins=7)])
def test_checkpoint_round_trip_bit_exact(head):
    rng = np.random.default_rng(0)
    p = init_mlp(4, 10, head, seed=3, dropout_p=0.1)
    state = AdamState(p)
    for _ in range(3):
        x, a = small_batch(p, 5, rng)
        adam_step(p, loss_and_grad(p, x, a, train=True, rng=rng)[1], state, 1e-3)
    blob = encode_checkpoint(p, state, {"note": "x"})
    q, s2, meta = decode_checkpoint(blob)
    assert q.same_parameters(p) and s2.equals(state) and meta == {"note": "x"}
    assert q.head == p.head and q.dropout_p == p.dropout_p
    assert encode_checkpoint(q, s2, meta) == blob


def test_checkpoint_without_adam():
    p = init_mlp(2, 4, GaussianHead(1), seed=0)
    q, state, _ = decode_checkpoint(encode_checkpoint(p, None))
    assert state is None and q.same_parameters(p)


def test_checkpoint_truncated_and_bad_magic():
    p = init_mlp(2, 4, GaussianHead(1), seed=0)
    blob = encode_checkpoint(p, AdamState(p), {"a": 1})
    for cut in (0, 3, 10, len(blob) // 2, len(blob) - 1):
        with pytest.raises(CheckpointFormatError):
            decode_checkpoint(blob[:cut])
    with pytest.raises(CheckpointFormatError):
        decode_checkpoint(b"XXXX" + blob[4:])
