import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mapo_lab.diffusion import TracedParams, init_denoiser, make_schedule
from mapo_lab.objectives import PairBatch, draw_noise

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def schedule():
    return make_schedule("cosine", 16)


def tiny_denoiser(seed=0, dim=2, cond_dim=2, hidden=(6,), emb_dim=2):
    """Random denoiser with a non-zero output layer, well under 200 parameters."""
    p = init_denoiser(dim, cond_dim, hidden, emb_dim, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    w = {k: v + 0.3 * rng.standard_normal(v.shape) for k, v in p.weights.items()}
    return type(p)(p.dim, p.cond_dim, p.hidden, p.emb_dim, w)


def pair_batch(seed=0, n=5, dim=2, cond_dim=2):
    rng = np.random.default_rng(seed)
    c = np.eye(cond_dim)[rng.integers(cond_dim, size=n)]
    return PairBatch(c, rng.normal(size=(n, dim)), rng.normal(size=(n, dim)) + 1.0)


def pair_noise(seed, n, dim, T, share=True):
    return draw_noise(np.random.default_rng(seed), n, dim, T, share)


def as_traced(params, leaves):
    """View ``leaves`` (one tensor per weight matrix) as a differentiable denoiser."""
    return TracedParams(params, list(leaves))


def weight_list(params):
    return [params.weights[k] for k in params.names]


@pytest.fixture(scope="session")
def base_model():
    """Denoiser pretrained on the four-class base mixture with the shipped defaults."""
    from mapo_lab.config import resolve_config
    from mapo_lab.experiments import run_pretrain, schedule_from_config

    cfg = resolve_config({"task": {"preset": "custom"}})
    return run_pretrain(cfg).params, schedule_from_config(cfg)


def oracle_eps_fn(task, which, schedule):
    """Bayes-optimal noise predictor for the class-keyed mixture as a sampler callable."""
    from mapo_lab.diffusion import optimal_gaussian_denoiser

    def eps(x, c, t):
        mu, var = task.moments(which, task.class_of(c))
        return optimal_gaussian_denoiser(mu, var, schedule, x, t)

    return eps


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
