import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from mapo_lab.diffusion import init_denoiser, make_schedule
from mapo_lab.metrics import (
    CSV_COLUMNS,
    MetricsReport,
    evaluate,
    oracle_reward,
    target_mass,
    two_sample_distance,
    win_rate,
)
from mapo_lab.tasks import PRESETS, preset, sample_data

from conftest import oracle_eps_fn

# 1 - exp(-2): probability a 2-D isotropic Gaussian lands within two stds (mpmath)
COVERAGE_2SIGMA_2D = 0.86466471676338731


# energy distance


def test_identical_sets_have_zero_distance():
    a = np.random.default_rng(0).normal(size=(300, 2))
    assert abs(two_sample_distance(a, a.copy())) < 1e-12


@given(st.integers(0, 2**32 - 1), st.integers(2, 40), st.integers(2, 40))
def test_distance_symmetric_and_non_negative(seed, n, m):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(n, 2)), rng.normal(size=(m, 2)) + rng.normal(size=2)
    d = two_sample_distance(a, b)
    assert d == two_sample_distance(b, a)
    assert d >= -1e-12


@given(st.integers(0, 2**32 - 1))
def test_root_distance_satisfies_triangle_inequality(seed):
    rng = np.random.default_rng(seed)
    sets = [rng.normal(size=(30, 2)) * rng.uniform(0.2, 2) + rng.normal(size=2) for _ in range(3)]
    root = lambda u, v: math.sqrt(max(two_sample_distance(u, v), 0.0))  # noqa: E731
    a, b, c = sets
    assert root(a, c) <= root(a, b) + root(b, c) + 3e-12


def test_squared_form_is_not_a_metric():
    # for small shifts the statistic grows quadratically, so only its square root is a metric
    rng = np.random.default_rng(1)
    base = rng.normal(size=(2000, 1))
    a, b, c = base, base + 0.2, base + 0.4
    assert two_sample_distance(a, c) > two_sample_distance(a, b) + two_sample_distance(b, c)


def test_shifted_gaussian_exceeds_null():
    gaps = []
    for seed in range(3):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(4096, 2))
        a2 = rng.normal(size=(4096, 2))
        b = rng.normal(size=(4096, 2)) + [4.0, 0.0]
        gaps.append(two_sample_distance(a, b) - two_sample_distance(a, a2))
    assert np.median(gaps) > 0


def test_blocked_sum_is_thread_count_invariant(monkeypatch):
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(2500, 2)), rng.normal(size=(1800, 2))
    one = two_sample_distance(a, b)
    monkeypatch.setenv("MAPO_LAB_THREADS", "4")
    assert two_sample_distance(a, b) == one


@pytest.mark.parametrize("a,b", [(np.zeros((1, 2)), np.zeros((5, 2))), (np.zeros((0, 2)), np.zeros((5, 2)))])
def test_distance_needs_two_points(a, b):
    with pytest.raises(ValueError):
        two_sample_distance(a, b)


def test_distance_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        two_sample_distance(np.zeros((3, 2)), np.zeros((3, 3)))


# oracle reward and win rate


def test_reward_peak_value():
    task = preset("custom", 2.0)
    comp = task.target_mixture[1]
    expected = math.log(comp.weight) - (task.dim / 2) * math.log(2 * math.pi * comp.std**2)
    assert_allclose(oracle_reward(task, np.array(comp.mean), 1), expected, rtol=1e-14)


def test_reward_decreases_along_a_ray():
    task = preset("style")
    mu = np.array(task.target_mixture[0].mean)
    ray = mu + np.linspace(0, 5, 50)[:, None] * np.array([0.6, -0.8])
    assert np.all(np.diff(oracle_reward(task, ray, 0)) < 0)


def test_target_draws_outscore_base_draws():
    task = preset("style")
    x_t, cls = sample_data(task, "target", None, 4096, seed=0, return_labels=True)
    x_b = sample_data(task, "base", None, 4096, seed=1)
    # score base draws under the same class labels
    assert oracle_reward(task, x_t, cls).mean() > oracle_reward(task, x_b, cls).mean()


def test_reward_rejects_non_finite():
    with pytest.raises(ValueError):
        oracle_reward(preset("style"), np.array([np.inf, 0.0]), 0)


def test_win_rate_identity_and_complement():
    task = preset("style")
    a = sample_data(task, "target", 2, 500, seed=0)
    b = sample_data(task, "base", 2, 500, seed=1)
    assert win_rate(task, a, a, 2) == 0.5
    assert win_rate(task, a, b, 2) + win_rate(task, b, a, 2) == 1.0
    assert win_rate(task, a, b, 2) > 0.5


def test_win_rate_shape_check():
    with pytest.raises(ValueError):
        win_rate(preset("style"), np.zeros((3, 2)), np.zeros((4, 2)), 0)


def test_target_mass_bounds():
    task = preset("style")
    mu = np.array(task.target_mixture[3].mean)
    assert target_mass(task, np.tile(mu, (5, 1)), 3) == 1.0
    assert target_mass(task, np.tile(mu + 10, (5, 1)), 3) == 0.0


def test_target_mass_matches_closed_form_coverage():
    task = preset("style")
    x = sample_data(task, "target", 0, 100_000, seed=3)
    se = math.sqrt(COVERAGE_2SIGMA_2D * (1 - COVERAGE_2SIGMA_2D) / 100_000)
    assert abs(target_mass(task, x, 0) - COVERAGE_2SIGMA_2D) < 4 * se


# report


def test_report_validation():
    with pytest.raises(ValueError):
        MetricsReport(0.1, -1.0, 1.5, 0.5, 64, 0)
    with pytest.raises(ValueError):
        MetricsReport(-0.1, -1.0, 0.5, 0.5, 64, 0)


def test_report_serialisation():
    r = MetricsReport(0.25, -2.5, 0.75, 0.5, 64, 3, wall_time_s=1.25)
    assert len(r.csv_row()) == len(CSV_COLUMNS)
    assert float(r.csv_row()[0]) == 0.25
    assert json.loads(r.to_json())["wall_time_s"] == 1.25
    assert "wall_time_s" not in json.loads(r.to_json(include_timing=False))


def test_oracle_sampler_covers_target_regions():
    task = preset("style")
    s = make_schedule("cosine", 64)
    report = evaluate(oracle_eps_fn(task, "target", s), task, 1024, seed=0, schedule=s)
    assert report.target_mass > 0.8
    assert abs(report.target_mass - COVERAGE_2SIGMA_2D) < 0.04


def test_evaluate_is_deterministic(base_model):
    params, s = base_model
    task = preset("style")
    a = evaluate(params, task, 64, seed=5, schedule=s)
    b = evaluate(params, task, 64, seed=5, schedule=s)
    assert a.csv_row() == b.csv_row()


def test_evaluate_needs_enough_samples(base_model):
    params, s = base_model
    with pytest.raises(ValueError, match="n >= 64"):
        evaluate(params, preset("style"), 32, seed=0, schedule=s)


def test_untrained_model_is_further_from_the_data(base_model):
    params, s = base_model
    task = preset("preference")
    trained, random = [], []
    for seed in range(3):
        trained.append(evaluate(params, task, 256, seed, s).mismatch)
        untrained = init_denoiser(2, 4, params.hidden, seed=seed)
        random.append(evaluate(untrained, task, 256, seed, s).mismatch)
    assert np.median(random) > np.median(trained)


def test_preset_mismatch_ordering(base_model):
    params, s = base_model
    order = ["preference", "culture", "safety", "style", "personalization"]
    med = {name: np.median([evaluate(params, preset(name), 256, seed, s).mismatch for seed in range(3)])
           for name in order}
    assert set(order) == set(PRESETS)
    assert med["preference"] == min(med.values())
    assert med["personalization"] == max(med.values())
    assert all(med[a] < med[b] for a, b in zip(order, order[1:]))


def test_converged_base_model_rejections_match_chosen(base_model):
    from mapo_lab.tasks import synthesize_preferences

    params, s = base_model
    task = preset("preference")
    d = synthesize_preferences(task, params, 2048, seed=1, schedule=s, filter_margin=None)
    matched = two_sample_distance(d.x_w, d.x_l)
    # threshold: twice the distance between two independent base-mixture draws of the same size
    null = two_sample_distance(sample_data(task, "base", None, 2048, seed=1),
                               sample_data(task, "base", None, 2048, seed=2))
    assert matched < 2 * null
