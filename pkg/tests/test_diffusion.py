import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from mapo_lab import ndgrad as nd
from mapo_lab.diffusion import (
    ReferenceHandle,
    SamplerDivergence,
    Schedule,
    ancestral_sample,
    denoise_predict,
    forward_sample,
    init_denoiser,
    make_schedule,
    optimal_gaussian_denoiser,
    time_embedding,
)
from mapo_lab.objectives import ObjectiveConfig
from mapo_lab.tasks import preset, synthesize_preferences
from mapo_lab.train import TrainConfig, train

from conftest import as_traced, tiny_denoiser, weight_list


def fixed_schedule(alpha: float, sigma: float) -> Schedule:
    """Two-step schedule whose t=1 entry is (alpha, sigma)."""
    a = np.array([alpha, 0.1])
    s = np.sqrt(1 - a * a)
    s[0] = sigma
    return Schedule("fixed", 2, a, s, np.log(a**2 / s**2), np.ones(2))


# schedule


@pytest.mark.parametrize("kind", ["cosine", "linear"])
@pytest.mark.parametrize("T", [2, 3, 16, 64, 1000])
def test_schedule_invariants(kind, T):
    s = make_schedule(kind, T)
    assert s.T == T and s.alpha.shape == (T,)
    assert_allclose(s.alpha**2 + s.sigma**2, 1.0, atol=1e-12)
    assert np.all(np.diff(s.alpha) < 0)
    assert np.all(np.diff(s.sigma) > 0)
    assert np.all(np.diff(s.lam) < 0)
    assert_array_equal(s.omega, np.ones(T))
    assert s.sigma[0] >= 1e-4 and s.alpha[-1] >= 1e-4


def test_linear_schedule_matches_ddpm_at_1000_steps():
    s = make_schedule("linear", 1000)
    ddpm = np.sqrt(np.cumprod(1 - np.linspace(1e-4, 0.02, 1000)))
    assert_allclose(s.alpha, ddpm, rtol=0, atol=2e-3)


def test_cosine_endpoints():
    s = make_schedule("cosine", 64)
    assert s.alpha[0] >= 0.999
    assert s.alpha[-1] <= 0.05


def test_log_snr_reference_value():
    # log(0.64 / 0.36) from mpmath at 50 digits
    s = fixed_schedule(0.8, 0.6)
    assert_allclose(s.lam[0], 0.57536414490356185, rtol=1e-14)


@pytest.mark.parametrize("T", [1, 0, -3, 2.5])
def test_schedule_rejects_short_chains(T):
    with pytest.raises(ValueError):
        make_schedule("cosine", T)


def test_schedule_unknown_kind():
    with pytest.raises(ValueError, match="unknown schedule"):
        make_schedule("sigmoid", 8)


def test_schedule_arrays_are_read_only(schedule):
    with pytest.raises(ValueError):
        schedule.alpha[0] = 0.5


# forward process


def test_forward_sample_arithmetic():
    s = fixed_schedule(0.8, 0.6)
    out = forward_sample(s, np.array([1.0, 0.0]), 1, np.array([0.5, -0.5]))
    assert_allclose(out, [1.1, -0.3], rtol=1e-15)


def test_forward_sample_zero_signal_and_zero_noise(schedule):
    rng = np.random.default_rng(0)
    x0, eps = rng.normal(size=(2, 5, 2))
    t = 7
    assert_array_equal(forward_sample(schedule, np.zeros_like(x0), t, eps), schedule.sigma[t - 1] * eps)
    assert_array_equal(forward_sample(schedule, x0, t, np.zeros_like(eps)), schedule.alpha[t - 1] * x0)


def test_forward_sample_per_row_timesteps(schedule):
    x0 = np.ones((3, 2))
    eps = np.zeros((3, 2))
    out = forward_sample(schedule, x0, np.array([1, 5, 16]), eps)
    assert_allclose(out[:, 0], schedule.alpha[[0, 4, 15]])


@pytest.mark.parametrize("t", [0, 17, -1])
def test_forward_sample_rejects_out_of_range_t(schedule, t):
    with pytest.raises(ValueError, match="out of range"):
        forward_sample(schedule, np.zeros(2), t, np.zeros(2))


def test_forward_sample_rejects_shape_mismatch(schedule):
    with pytest.raises(ValueError, match="shape"):
        forward_sample(schedule, np.zeros(2), 1, np.zeros(3))


@pytest.mark.parametrize("t", [1, 8, 16])
def test_forward_marginals(schedule, t):
    n = 100_000
    rng = np.random.default_rng(t)
    mu, s2 = np.array([1.5, -0.5]), 0.3
    x0 = mu + math.sqrt(s2) * rng.standard_normal((n, 2))
    xt = forward_sample(schedule, x0, t, rng.standard_normal((n, 2)))
    a, s = schedule.alpha[t - 1], schedule.sigma[t - 1]
    var = a * a * s2 + s * s
    se_mean = math.sqrt(var / n)
    se_var = var * math.sqrt(2.0 / (n - 1))
    assert np.all(np.abs(xt.mean(axis=0) - a * mu) < 3 * se_mean)
    assert np.all(np.abs(xt.var(axis=0, ddof=1) - var) < 3 * se_var)


# denoiser


def test_time_embedding_shape_and_range():
    e = time_embedding(np.arange(1, 9), 8, 6)
    assert e.shape == (8, 6)
    assert np.all(np.abs(e) <= 1.0)


def test_zero_output_layer_predicts_zero(schedule):
    p = init_denoiser(2, 4, (8,), seed=3, zero_output=True)
    rng = np.random.default_rng(0)
    out = denoise_predict(p, rng.normal(size=(6, 2)), np.eye(4)[[0, 1, 2, 3, 0, 1]], 5, schedule)
    assert out.shape == (6, 2)
    assert_array_equal(out.values, np.zeros((6, 2)))


def test_denoiser_is_deterministic(schedule):
    p = tiny_denoiser(1)
    x, c = np.array([[0.3, -0.2]]), np.array([[0.0, 1.0]])
    a = denoise_predict(p, x, c, 9, schedule).values
    b = denoise_predict(p, x, c, 9, schedule).values
    assert a.tobytes() == b.tobytes()


def test_denoiser_rejects_wrong_shapes(schedule):
    p = tiny_denoiser(0)
    with pytest.raises(ValueError, match="denoiser expects"):
        denoise_predict(p, np.zeros((3, 3)), np.zeros((3, 2)), 1, schedule)
    with pytest.raises(ValueError, match="denoiser expects"):
        denoise_predict(p, np.zeros((3, 2)), np.zeros((3, 5)), 1, schedule)


def test_denoiser_mse_gradient_matches_finite_differences(schedule):
    p = tiny_denoiser(4)
    rng = np.random.default_rng(4)
    x_t, eps = rng.normal(size=(2, 5, 2))
    c = np.eye(2)[rng.integers(2, size=5)]
    t = rng.integers(1, 17, size=5)

    def loss(*leaves):
        return nd.mean(nd.square(denoise_predict(as_traced(p, leaves), x_t, c, t, schedule) - nd.Tensor(eps)))

    assert p.n_params <= 200
    assert nd.finite_difference_check(loss, weight_list(p)) < 1e-5


def test_params_flat_round_trip():
    p = tiny_denoiser(2)
    q = p.with_flat(p.flat())
    assert q.checksum() == p.checksum()
    with pytest.raises(ValueError):
        p.with_flat(np.zeros(3))


def test_reference_handle_is_frozen():
    p = tiny_denoiser(0)
    ref = ReferenceHandle(p)
    p.weights["W0"][0, 0] += 1.0
    ref.verify()
    with pytest.raises(ValueError):
        ref.params.weights["W0"][0, 0] = 5.0
    assert ref.checksum != p.checksum()


# sampler


def test_sampler_is_deterministic(schedule):
    p = tiny_denoiser(5)
    a = ancestral_sample(p, schedule, np.array([1.0, 0.0]), 3, seed=11)
    b = ancestral_sample(p, schedule, np.array([1.0, 0.0]), 3, seed=11)
    assert a.shape == (3, 2)
    assert a.tobytes() == b.tobytes()


def test_sampler_two_step_chain_is_finite():
    s = make_schedule("cosine", 2)
    out = ancestral_sample(tiny_denoiser(0), s, np.array([0.0, 1.0]), 4, seed=0)
    assert np.all(np.isfinite(out))


def test_sampler_rejects_bad_arguments(schedule):
    with pytest.raises(ValueError, match="n must be"):
        ancestral_sample(tiny_denoiser(0), schedule, np.zeros(2), 0, seed=0)
    with pytest.raises(ValueError, match="dim is required"):
        ancestral_sample(lambda x, c, t: x, schedule, np.zeros(1), 2, seed=0)


def test_sampler_reports_divergence_step(schedule):
    def explode(x, c, t):
        return np.full_like(x, np.inf) if t[0] == 9 else np.zeros_like(x)

    with pytest.raises(SamplerDivergence) as info:
        ancestral_sample(explode, schedule, np.zeros(1), 2, seed=0, dim=2)
    assert info.value.t == 9


def test_oracle_sampler_recovers_standard_normal():
    s = make_schedule("cosine", 64)

    def eps_star(x, c, t):
        return optimal_gaussian_denoiser(np.zeros(2), 1.0, s, x, t)

    x = ancestral_sample(eps_star, s, np.zeros(1), 4096, seed=0, dim=2)
    assert np.all(np.abs(x.mean(axis=0)) < 0.05)
    assert np.all(np.abs(x.var(axis=0) - 1.0) < 0.1)


# analytic oracle


@given(st.integers(1, 16), st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_oracle_collapses_for_standard_normal(t, x):
    s = make_schedule("cosine", 16)
    x = np.array(x)
    assert_allclose(optimal_gaussian_denoiser(np.zeros(2), 1.0, s, x, t), s.sigma[t - 1] * x, atol=1e-12)


def test_oracle_is_zero_at_scaled_mode(schedule):
    mu = np.array([2.0, 2.0])
    t = 6
    out = optimal_gaussian_denoiser(mu, 1e-12, schedule, schedule.alpha[t - 1] * mu, t)
    assert_allclose(out, 0.0, atol=1e-9)


@pytest.mark.filterwarnings("ignore:divide by zero:RuntimeWarning")
def test_oracle_rejects_degenerate_inputs():
    s = fixed_schedule(1.0, 0.0)
    with pytest.raises(ValueError, match="sigma_t"):
        optimal_gaussian_denoiser(np.zeros(2), 1.0, s, np.zeros(2), 1)
    with pytest.raises(ValueError, match="variance"):
        optimal_gaussian_denoiser(np.zeros(2), 0.0, make_schedule("cosine", 4), np.zeros(2), 1)


def test_trained_mlp_never_beats_the_oracle():
    task = preset("gaussian")
    data = synthesize_preferences(task, None, 2048, seed=1, filter_margin=None)
    init = init_denoiser(2, 1, (32, 32), seed=0)
    cfg = TrainConfig(ObjectiveConfig("sft"), steps=600, batch_size=64, lr=3e-3, T=16)
    params = train(cfg, data, init, task).params
    s = make_schedule("cosine", 16)
    mu, s2 = np.array(task.base_mixture[0].mean), task.base_mixture[0].std ** 2
    rng = np.random.default_rng(99)
    n = 10_000
    for t in range(1, s.T + 1):
        x0 = mu + math.sqrt(s2) * rng.standard_normal((n, 2))
        eps = rng.standard_normal((n, 2))
        xt = forward_sample(s, x0, t, eps)
        model = np.mean((denoise_predict(params, xt, np.ones((n, 1)), t, s).values - eps) ** 2)
        oracle = np.mean((optimal_gaussian_denoiser(mu, s2, s, xt, t) - eps) ** 2)
        assert model >= oracle - 1e-3, f"t={t}: model {model} < oracle {oracle}"
