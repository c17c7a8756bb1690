"""Training objectives: DDPM MSE, MaPO, Diffusion-DPO surrogate and SFT.

Per-sample denoising errors are means over data dimensions. Every
log-sigmoid is evaluated as a softplus and every ``exp(l) - 1`` as expm1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndgrad as nd
from .diffusion import ReferenceHandle, Schedule, denoise_predict, forward_sample

__all__ = [
    "ObjectiveConfig",
    "PairBatch",
    "PairLossBreakdown",
    "PairNoise",
    "amplification_factor",
    "dpo_loss",
    "draw_noise",
    "implicit_reward_gap",
    "link_phi",
    "link_phi_grad",
    "link_phi_log",
    "log_link_tensor",
    "mapo_loss",
    "margin_loss",
    "mse_loss",
    "objective_loss",
    "sft_loss",
]

SERIES_CUTOFF = 1e-5
LN2 = math.log(2.0)


@dataclass(frozen=True)
class ObjectiveConfig:
    kind: str = "mapo"
    beta: float = 8.0
    beta_dpo: float = 500.0
    share_noise: bool = True
    timestep_sampling: str = "uniform"

    def __post_init__(self):
        if self.kind not in ("mapo", "dpo", "sft"):
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if not self.beta > 0 or not self.beta_dpo > 0:
            raise ValueError("beta and beta_dpo must be positive")
        if self.timestep_sampling != "uniform":
            raise ValueError("only uniform timestep sampling is supported")


@dataclass
class PairBatch:
    """Stacked preference triples: rows of ``c``, ``x_w`` and ``x_l``."""

    c: np.ndarray
    x_w: np.ndarray
    x_l: np.ndarray

    def __post_init__(self):
        self.c = np.atleast_2d(np.asarray(self.c, dtype=np.float64))
        self.x_w = np.atleast_2d(np.asarray(self.x_w, dtype=np.float64))
        self.x_l = np.atleast_2d(np.asarray(self.x_l, dtype=np.float64))
        n = self.x_w.shape[0]
        if self.x_l.shape != self.x_w.shape or self.c.shape[0] != n:
            raise ValueError(
                f"inconsistent batch shapes c={self.c.shape} x_w={self.x_w.shape} x_l={self.x_l.shape}"
            )

    def __len__(self) -> int:
        return self.x_w.shape[0]


@dataclass
class PairNoise:
    """Pre-drawn timesteps and Gaussian noise for each side of each pair."""

    t_w: np.ndarray
    t_l: np.ndarray
    eps_w: np.ndarray
    eps_l: np.ndarray


@dataclass
class PairLossBreakdown:
    total: float
    mse_w: float
    mse_l: float
    margin: float
    phi_w: float
    phi_l: float
    loss: nd.Tensor | None = None


def draw_noise(rng: np.random.Generator, n: int, dim: int, T: int, share_noise: bool = True) -> PairNoise:
    t_w = rng.integers(1, T + 1, size=n)
    eps_w = rng.standard_normal((n, dim))
    if share_noise:
        return PairNoise(t_w, t_w.copy(), eps_w, eps_w.copy())
    t_l = rng.integers(1, T + 1, size=n)
    eps_l = rng.standard_normal((n, dim))
    return PairNoise(t_w, t_l, eps_w, eps_l)


def _per_sample_mse(params, schedule: Schedule, c, x0, t, eps, weighted: bool = False) -> nd.Tensor:
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    t = np.broadcast_to(schedule.check_t(t), (x0.shape[0],))
    x_t = forward_sample(schedule, x0, t, eps)
    pred = denoise_predict(params, x_t, c, t, schedule)
    err = nd.mean(nd.square(pred - nd.Tensor(eps)), axis=1)
    if weighted:
        err = err * nd.Tensor(schedule.omega[t - 1])
    return err


def mse_loss(params, schedule: Schedule, c, x0, t, eps, weighted: bool = False) -> nd.Tensor:
    """Simplified DDPM loss, averaged over data dimensions and batch rows.

    ``weighted=True`` multiplies each row by the schedule's loss weight.
    """
    return nd.mean(_per_sample_mse(params, schedule, c, x0, t, eps, weighted))


# ---------------------------------------------------------------------------
# link function
# ---------------------------------------------------------------------------


def _check_link_args(ell, beta):
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    if np.any(np.asarray(ell) < 0) or np.any(np.isnan(ell)):
        raise ValueError("ell must be non-negative")


def _log_phi1(ell: np.ndarray) -> np.ndarray:
    ell = np.asarray(ell, dtype=np.float64)
    small = ell < SERIES_CUTOFF
    safe = np.where(small, 1.0, ell)
    # log(expm1(l)) = l + log1p(-exp(-l)) avoids overflow past l ~ 709
    log_em1 = np.where(safe > 30.0, safe + np.log1p(-np.exp(-safe)), np.log(np.expm1(np.minimum(safe, 30.0))))
    big = np.log(safe) - log_em1
    return np.where(small, -ell / 2.0 - ell * ell / 24.0, big)


def link_phi_log(ell, beta: float):
    """``log phi_beta(ell) = beta * log(ell / expm1(ell))``."""
    _check_link_args(ell, beta)
    out = beta * _log_phi1(ell)
    return float(out) if np.ndim(out) == 0 else out


def link_phi(ell, beta: float):
    """Bounded score ``(ell / (exp(ell) - 1)) ** beta`` with value 1 at ell = 0."""
    _check_link_args(ell, beta)
    out = np.exp(beta * _log_phi1(ell))
    return float(out) if np.ndim(out) == 0 else out


def amplification_factor(ell):
    """``|d phi_1 / d ell| = (ell e^ell - e^ell + 1) / (e^ell - 1)**2`` for ell > 0.

    Lies in (0, 1/2), decreasing, with limit 1/2 at 0+ (not returned).
    """
    arr = np.asarray(ell, dtype=np.float64)
    if np.any(arr <= 0) or np.any(np.isnan(arr)):
        raise ValueError("amplification_factor needs ell > 0")
    out = np.empty_like(arr)
    small = arr < 1.0
    x = arr[small]
    if x.size:
        # numerator = sum_{k>=2} (k-1) x^k / k!, denominator = expm1(x)^2
        num = np.zeros_like(x)
        term = np.ones_like(x)
        for k in range(1, 30):
            term = term * x / k
            num = num + (k - 1) * term
        out[small] = num / np.expm1(x) ** 2
    x = arr[~small]
    if x.size:
        e = np.exp(-x)
        out[~small] = (x * e - e + e * e) / (1.0 - e) ** 2
    return float(out) if out.ndim == 0 else out


def link_phi_grad(ell, beta: float):
    """Analytic ``d phi_beta / d ell`` (negative for ell > 0)."""
    _check_link_args(ell, beta)
    arr = np.asarray(ell, dtype=np.float64)
    # phi_1 ** (beta - 1) taken in log space so large beta underflows cleanly
    ratio = np.exp((beta - 1.0) * _log_phi1(arr))
    out = -beta * ratio * np.asarray(amplification_factor(arr))
    return float(out) if np.ndim(out) == 0 else out


def log_link_tensor(ell: nd.Tensor, beta: float) -> nd.Tensor:
    """Differentiable ``log phi_beta`` of a tensor of non-negative losses."""
    values = ell.values
    if np.any(values < 0):
        raise nd.DomainError("link function needs non-negative losses")
    small = (values < SERIES_CUTOFF).astype(np.float64)
    safe = ell + nd.Tensor(small)
    big = nd.log(safe) - nd.log(nd.expm1(safe))
    series = ell * -0.5 - nd.square(ell) * (1.0 / 24.0)
    mixed = series * nd.Tensor(small) + big * nd.Tensor(1.0 - small)
    return mixed * float(beta)


def _margin_terms(ell_w: nd.Tensor, ell_l: nd.Tensor, beta: float):
    phi_w = nd.exp(log_link_tensor(ell_w, beta))
    phi_l = nd.exp(log_link_tensor(ell_l, beta))
    return nd.softplus(phi_l - phi_w), phi_w, phi_l


def margin_loss(ell_w, ell_l, beta: float) -> nd.Tensor:
    """``-log sigmoid(phi(ell_w) - phi(ell_l))``, averaged if given vectors."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    terms, _, _ = _margin_terms(nd.as_tensor(ell_w), nd.as_tensor(ell_l), beta)
    return nd.mean(terms)


# ---------------------------------------------------------------------------
# pair objectives
# ---------------------------------------------------------------------------


def _resolve_noise(batch: PairBatch, schedule: Schedule, config: ObjectiveConfig, noise, rng) -> PairNoise:
    if noise is not None:
        return noise
    if rng is None:
        raise ValueError("either noise or rng must be provided")
    return draw_noise(rng, len(batch), batch.x_w.shape[1], schedule.T, config.share_noise)


def _pair_errors(params, schedule: Schedule, batch: PairBatch, noise: PairNoise):
    n = len(batch)
    x0 = np.concatenate([batch.x_w, batch.x_l])
    eps = np.concatenate([noise.eps_w, noise.eps_l])
    t = np.concatenate([noise.t_w, noise.t_l])
    c = np.concatenate([batch.c, batch.c])
    err = _per_sample_mse(params, schedule, c, x0, t, eps)
    return nd.slice_(err, 0, n), nd.slice_(err, n, 2 * n)


def _as_batch(triple) -> PairBatch:
    if isinstance(triple, PairBatch):
        return triple
    return PairBatch(triple.c, triple.x0_w, triple.x0_l)


def mapo_loss(params, schedule: Schedule, triple, config: ObjectiveConfig, noise=None, rng=None) -> PairLossBreakdown:
    """MSE on the chosen sample plus the margin loss scaled by ``1 / beta``.

    No reference model is involved.
    """
    batch = _as_batch(triple)
    noise = _resolve_noise(batch, schedule, config, noise, rng)
    ell_w, ell_l = _pair_errors(params, schedule, batch, noise)
    terms, phi_w, phi_l = _margin_terms(ell_w, ell_l, config.beta)
    mse_w = nd.mean(ell_w)
    margin = nd.mean(terms)
    total = mse_w + margin * (1.0 / config.beta)
    return PairLossBreakdown(
        total=total.item(),
        mse_w=mse_w.item(),
        mse_l=float(ell_l.values.mean()),
        margin=margin.item(),
        phi_w=float(phi_w.values.mean()),
        phi_l=float(phi_l.values.mean()),
        loss=total,
    )


def _dpo_parts(params, ref: ReferenceHandle, schedule, batch, noise):
    ell_w, ell_l = _pair_errors(params, schedule, batch, noise)
    ref_w, ref_l = _pair_errors(ref.params, schedule, batch, noise)
    delta = (ell_w - ref_w) - (ell_l - ref_l)
    return ell_w, ell_l, delta


def dpo_loss(params, ref: ReferenceHandle, schedule: Schedule, triple, config: ObjectiveConfig,
             noise=None, rng=None) -> PairLossBreakdown:
    """Per-timestep Diffusion-DPO surrogate ``softplus(beta_dpo * (dW - dL))``.

    ``dW``/``dL`` are the policy-minus-reference denoising errors on the
    chosen/rejected sample under the same (t, eps). The reference gets no
    gradient.
    """
    batch = _as_batch(triple)
    noise = _resolve_noise(batch, schedule, config, noise, rng)
    ell_w, ell_l, delta = _dpo_parts(params, ref, schedule, batch, noise)
    total = nd.mean(nd.softplus(delta * config.beta_dpo))
    return PairLossBreakdown(
        total=total.item(),
        mse_w=float(ell_w.values.mean()),
        mse_l=float(ell_l.values.mean()),
        margin=total.item(),
        phi_w=0.0,
        phi_l=0.0,
        loss=total,
    )


def implicit_reward_gap(params, ref: ReferenceHandle, schedule: Schedule, triple, beta_dpo: float,
                        noise=None, rng=None):
    """Chosen-minus-rejected implicit reward ``-beta_dpo * (dW - dL)``.

    The partition term cancels in the difference. Returns a float for a
    single triple and an array for a batch.
    """
    if not beta_dpo > 0:
        raise ValueError("beta_dpo must be positive")
    batch = _as_batch(triple)
    noise = _resolve_noise(batch, schedule, ObjectiveConfig("dpo", beta_dpo=beta_dpo), noise, rng)
    _, _, delta = _dpo_parts(params, ref, schedule, batch, noise)
    gap = -beta_dpo * delta.values
    return float(gap[0]) if gap.size == 1 else gap


def sft_loss(params, schedule: Schedule, triple, config: ObjectiveConfig | None = None,
             noise=None, rng=None) -> nd.Tensor:
    """DDPM MSE on the chosen sample only; the rejected sample is ignored."""
    batch = _as_batch(triple)
    noise = _resolve_noise(batch, schedule, config or ObjectiveConfig("sft"), noise, rng)
    return mse_loss(params, schedule, batch.c, batch.x_w, noise.t_w, noise.eps_w)


def objective_loss(params, schedule: Schedule, batch: PairBatch, config: ObjectiveConfig,
                   noise: PairNoise, ref: ReferenceHandle | None = None) -> PairLossBreakdown:
    """Dispatch on ``config.kind``."""
    if config.kind == "mapo":
        return mapo_loss(params, schedule, batch, config, noise)
    if config.kind == "dpo":
        if ref is None:
            raise ValueError("the dpo objective requires a reference model")
        return dpo_loss(params, ref, schedule, batch, config, noise)
    loss = sft_loss(params, schedule, batch, config, noise)
    v = loss.item()
    return PairLossBreakdown(total=v, mse_w=v, mse_l=0.0, margin=0.0, phi_w=0.0, phi_l=0.0, loss=loss)
