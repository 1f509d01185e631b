import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar
from scipy.stats import norm

from diffpark.dynamics import ActionCommand, DynamicsParams, GuidanceFeatures, VehicleState, step_batch
from diffpark.errors import DomainError, SchemaError
from diffpark.nn import MlpParams
from diffpark.predictor import (
    INPUT_DIM,
    ActionDistribution,
    PredictorParams,
    TrainConfig,
    action_variance_penalty,
    coverage_from_moments,
    decode_jacobian,
    decode_physics,
    encode,
    encode_batch,
    init_predictor,
    load_model,
    loss_and_grads,
    model_from_dict,
    model_to_dict,
    reparameterize,
    reparameterize_batch,
    save_model,
    train_arrays,
    vae_loss,
)

DYN = DynamicsParams()


def random_batch(rng, n):
    h = rng.uniform(-math.pi, math.pi, n)
    v = rng.uniform(-6, 6, n)
    S = np.column_stack([rng.uniform(-15, 15, n), rng.uniform(-10, 10, n), v * np.cos(h), v * np.sin(h), h])
    G = np.column_stack([rng.uniform(-math.pi, math.pi, n), rng.uniform(0, 20, n)])
    return S, G


def small_predictor(seed=0, hidden=(8,)):
    rng = np.random.default_rng(seed)
    p = init_predictor(rng, TrainConfig(hidden=hidden))
    # larger weights than Glorot so the test exercises the squashes away from zero
    return p.with_arrays([a + 0.3 * rng.standard_normal(a.shape) for a in p.arrays()])


# ---------------------------------------------------------------- encoder

@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_encoder_outputs_respect_bounds(seed):
    rng = np.random.default_rng(seed)
    p = small_predictor(seed)
    p = p.with_arrays([a * 20 for a in p.arrays()])
    S, G = random_batch(rng, 20)
    mean, sigma, _ = encode_batch(p, S, G, DYN)
    assert np.all(mean >= DYN.lb) and np.all(mean <= DYN.ub)
    assert np.all(sigma > p.eps) and np.all(sigma < 1 - p.eps)


def test_zero_encoder():
    p = init_predictor(np.random.default_rng(0))
    p = p.with_arrays([np.zeros_like(a) for a in p.arrays()])
    d = encode(p, VehicleState(1, 2, 3, 4, 0.5), GuidanceFeatures(0.3, 4.0), DYN)
    assert d.mean == ActionCommand(0.0, 0.0)
    assert d.sigma[0] == pytest.approx(0.5, abs=1e-4) and d.sigma[1] == pytest.approx(0.5, abs=1e-4)


def test_encoder_shape_check():
    with pytest.raises(SchemaError):
        PredictorParams(MlpParams([np.zeros((4, 6))], [np.zeros(4)], []), np.zeros(5))


# ---------------------------------------------------------------- reparameterisation

def test_reparameterize_zero_noise_and_tiny_sigma():
    d = ActionDistribution(ActionCommand(1.0, -0.2), (0.3, 0.3))
    assert reparameterize(d, [0.0, 0.0], DYN) == d.mean
    tiny = ActionDistribution(ActionCommand(1.0, -0.2), (1e-9, 1e-9))
    z = reparameterize(tiny, [3.0, -3.0], DYN)
    assert z.throttle == pytest.approx(1.0, abs=1e-8) and z.steer == pytest.approx(-0.2, abs=1e-8)


def test_reparameterize_monte_carlo_std():
    noise = np.random.default_rng(5).standard_normal((100_000, 2))
    z, inside = reparameterize_batch(np.zeros(2), np.array([0.2, 0.2]), noise, DYN)
    # steer clips beyond 3.9 sigma, which is too rare to move the std
    assert inside.mean() > 0.9999
    np.testing.assert_allclose(z.std(axis=0), 0.2, rtol=0.02)


def test_reparameterize_clips():
    z, inside = reparameterize_batch(np.array([4.9, 0.7]), np.array([0.5, 0.5]), np.array([3.0, 3.0]), DYN)
    np.testing.assert_array_equal(z, DYN.ub)
    assert not inside.any()


# ---------------------------------------------------------------- decoder

def test_decoder_is_bicycle_step():
    rng = np.random.default_rng(1)
    S, _ = random_batch(rng, 50)
    A = np.column_stack([rng.uniform(-5, 5, 50), rng.uniform(-0.78, 0.78, 50)])
    for s, a in zip(S, A):
        out = decode_physics(VehicleState.from_array(s), ActionCommand.from_array(a), DYN)
        assert out.as_array().tobytes() == VehicleState.from_array(step_batch(s, a, DYN)).as_array().tobytes()


def test_decoder_stationary_zero_action():
    s = VehicleState(1.0, -2.0, 0.0, 0.0, 0.4)
    assert decode_physics(s, ActionCommand(0.0, 0.0), DYN) == s


def test_decoder_jacobian_finite_differences():
    rng = np.random.default_rng(2)
    S, _ = random_batch(rng, 100)
    worst = 0.0
    for s in S:
        a = np.array([rng.uniform(-4, 4), rng.uniform(-0.7, 0.7)])
        J = decode_jacobian(VehicleState.from_array(s), ActionCommand.from_array(a), DYN)
        for k in range(2):
            e = np.zeros(2)
            e[k] = 1e-6
            fd = (step_batch(s, a + e, DYN) - step_batch(s, a - e, DYN)) / 2e-6
            scale = np.maximum(np.abs(fd), 1e-3)
            worst = max(worst, float(np.max(np.abs(J[:, k] - fd) / scale)))
    assert worst < 1e-5


# ---------------------------------------------------------------- loss

def test_loss_examples():
    truth = np.zeros((1, 5))
    pred = truth.copy()
    pred[0, 2] = 1.0
    terms, *_ = vae_loss(pred, truth, np.full((1, 2), 0.5), np.ones(5), 0.0, 0.0)
    assert terms.mse == pytest.approx(0.2)
    terms, *_ = vae_loss(pred, truth, np.full((1, 2), 0.5), np.ones(5), 0.0, 1.0)
    assert terms.total - terms.mse == pytest.approx(0.1)
    terms, *_ = vae_loss(truth, truth, np.full((1, 2), 0.5), np.ones(5), 1.0, 1.0)
    assert terms.total == pytest.approx(-2 * math.log(0.5), abs=4e-4)


def test_loss_domain():
    z = np.zeros((1, 5))
    with pytest.raises(DomainError):
        vae_loss(z, z, np.array([[0.5, 1.0]]), np.ones(5), 1, 1)
    with pytest.raises(DomainError):
        vae_loss(z, z, np.array([[0.5, 0.5]]), np.array([1, 1, 0, 1, 1.0]), 1, 1)


def test_action_penalty_minimum_at_half():
    res = minimize_scalar(lambda s: action_variance_penalty(np.array([s])), bounds=(1e-4 + 1e-9, 1 - 1e-4 - 1e-9),
                          method="bounded", options={"xatol": 1e-9})
    assert res.x == pytest.approx(0.5, abs=1e-3)


@given(st.floats(1e-4 + 1e-9, 1 - 1e-4 - 1e-9), st.floats(1e-4 + 1e-9, 1 - 1e-4 - 1e-9))
def test_action_penalty_lower_bound(a, b):
    # per-sample mean over two dims; doubled to the two-dimension sum
    assert 2 * action_variance_penalty(np.array([a, b])) >= 2.772 - 1e-3


@given(st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_loss_parts_non_negative(seed):
    rng = np.random.default_rng(seed)
    pred, truth = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    terms, *_ = vae_loss(pred, truth, rng.uniform(0.01, 0.99, (4, 2)), rng.uniform(0.01, 3, 5), 0.1, 0.1)
    assert terms.mse >= 0 and terms.r_eps_fit >= 0 and terms.r_a >= 1.38 / 2


def test_full_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    passed = 0
    for trial in range(100):
        p = small_predictor(trial)
        S, G = random_batch(rng, 4)
        A = np.column_stack([rng.uniform(-3, 3, 4), rng.uniform(-0.5, 0.5, 4)])
        T = step_batch(S, A, DYN) + 0.05 * rng.standard_normal((4, 5))
        noise = rng.standard_normal((4, 2))
        mean, sigma, _ = encode_batch(p, S, G, DYN)
        if not reparameterize_batch(mean, sigma, noise, DYN)[1].all():
            noise = np.zeros_like(noise)  # keep the check in the interior
        _, grads, _ = loss_and_grads(p, S, G, T, noise, DYN, 0.1, 0.05)
        arrays = p.arrays()
        fds = []
        for i, a in enumerate(arrays):
            fd = np.zeros_like(a)
            for j in np.ndindex(a.shape):
                hi = [x.copy() for x in arrays]
                lo = [x.copy() for x in arrays]
                hi[i][j] += 1e-6
                lo[i][j] -= 1e-6
                fh = loss_and_grads(p.with_arrays(hi), S, G, T, noise, DYN, 0.1, 0.05)[0].total
                fl = loss_and_grads(p.with_arrays(lo), S, G, T, noise, DYN, 0.1, 0.05)[0].total
                fd[j] = (fh - fl) / 2e-6
            fds.append(fd.ravel())
        # norm-wise relative error over the whole parameter vector
        g, fd = np.concatenate([x.ravel() for x in grads]), np.concatenate(fds)
        passed += np.linalg.norm(g - fd) / max(np.linalg.norm(g), np.linalg.norm(fd)) < 1e-4
    assert passed >= 95


# ---------------------------------------------------------------- training

def one_sample_arrays():
    s = np.array([[1.0, 2.0, 1.5, 0.5, 0.3]])
    g = np.array([[0.5, 3.0]])
    t = step_batch(s, np.array([[1.2, 0.1]]), DYN)
    return s, g, t


def test_one_sample_overfit():
    data = one_sample_arrays()
    _, hist = train_arrays(data, data, TrainConfig(epochs=200, batch_size=1, lr=1e-2, seed=0), DYN)
    assert hist[-1].train_mse < 0.1 * hist[0].train_mse


def test_training_is_seeded():
    data = one_sample_arrays()
    cfg = TrainConfig(epochs=20, batch_size=1, seed=3, hidden=(16,))
    _, h1 = train_arrays(data, data, cfg, DYN)
    _, h2 = train_arrays(data, data, cfg, DYN)
    assert h1 == h2


def test_large_action_penalty_drives_sigma_to_half():
    rng = np.random.default_rng(0)
    S, G = random_batch(rng, 64)
    T = step_batch(S, np.zeros((64, 2)), DYN)
    cfg = TrainConfig(epochs=1000, batch_size=64, lr=1e-2, lambda1=1e3, seed=0, hidden=(16,))
    p, _ = train_arrays((S, G, T), (S, G, T), cfg, DYN)
    _, sigma, _ = encode_batch(p, S, G, DYN)
    assert np.max(np.abs(sigma - 0.5)) < 1e-2


# ---------------------------------------------------------------- evaluation

def test_calibrated_coverage():
    rng = np.random.default_rng(0)
    n = 10_000
    mean = rng.normal(size=(n, 5))
    std = rng.uniform(0.1, 2.0, (n, 5))
    truth = mean + std * rng.standard_normal((n, 5))
    cov = coverage_from_moments(mean, std, truth)
    for k in (1, 2, 3):
        assert cov[k] == pytest.approx(norm.cdf(k) - norm.cdf(-k), abs=0.01)


@given(st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_coverage_nested(seed):
    rng = np.random.default_rng(seed)
    mean, truth = rng.normal(size=(50, 5)), rng.normal(size=(50, 5)) * 3
    cov = coverage_from_moments(mean, np.ones((50, 5)), truth)
    assert cov[1] <= cov[2] <= cov[3]


# ---------------------------------------------------------------- model file

def test_model_round_trip(tmp_path):
    p = small_predictor(4)
    p.log_sigma = np.linspace(-5, -1, 5)
    path = tmp_path / "m.json"
    save_model(path, p, DYN, TrainConfig())
    q, dyn = load_model(path)
    assert dyn == DYN
    for a, b in zip(p.arrays(), q.arrays()):
        assert a.tobytes() == b.tobytes()
    assert q.in_shift.tobytes() == p.in_shift.tobytes()


def test_model_schema_errors(tmp_path):
    d = model_to_dict(small_predictor(), DYN)
    bad = dict(d, schema_version=2)
    with pytest.raises(SchemaError):
        model_from_dict(bad)
    bad = dict(d, action_dim=3)
    with pytest.raises(SchemaError, match="action 3"):
        model_from_dict(bad)
    bad = dict(d)
    del bad["log_sigma"]
    with pytest.raises(SchemaError):
        model_from_dict(bad)
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(SchemaError):
        load_model(path)


def test_input_dim():
    assert INPUT_DIM == 7
    assert small_predictor().encoder.sizes[0] == 7
