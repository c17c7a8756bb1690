"""Discrete-time variance-preserving diffusion on small vectors.

Timesteps are 1-based (``t = 1..T``). Arrays inside :class:`Schedule` are
stored 0-based, so ``schedule.alpha[t - 1]`` is the signal scale at step t.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ndgrad as nd

__all__ = [
    "DenoiserParams",
    "ReferenceHandle",
    "SamplerDivergence",
    "Schedule",
    "TracedParams",
    "ancestral_sample",
    "denoise_predict",
    "forward_sample",
    "init_denoiser",
    "make_schedule",
    "optimal_gaussian_denoiser",
    "time_embedding",
]

MAX_BETA = 0.999
MIN_SCALE = 1e-4


class SamplerDivergence(RuntimeError):
    """Ancestral sampling produced a non-finite state."""

    def __init__(self, t: int, index: int | None = None):
        where = "" if index is None else f" (sample index {index})"
        super().__init__(f"non-finite sampler state at t={t}{where}")
        self.t = t
        self.index = index


@dataclass(frozen=True)
class Schedule:
    kind: str
    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    lam: np.ndarray
    omega: np.ndarray

    def check_t(self, t) -> np.ndarray:
        t_arr = np.asarray(t)
        if t_arr.size == 0 or not np.all(t_arr == np.round(t_arr)):
            raise ValueError(f"timestep must be an integer in [1, {self.T}]")
        t_arr = t_arr.astype(np.int64)
        if np.any(t_arr < 1) or np.any(t_arr > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t}")
        return t_arr

    def alpha_at(self, t):
        return self.alpha[self.check_t(t) - 1]

    def sigma_at(self, t):
        return self.sigma[self.check_t(t) - 1]


def _schedule_from_alpha_bar(kind: str, alpha_bar: np.ndarray) -> Schedule:
    alpha = np.sqrt(alpha_bar)
    alpha = np.maximum(alpha, MIN_SCALE)
    sigma = np.sqrt(1.0 - alpha * alpha)
    sigma[0] = max(sigma[0], MIN_SCALE)
    alpha[0] = math.sqrt(1.0 - sigma[0] ** 2)
    lam = np.log(alpha**2 / sigma**2)
    T = alpha.size
    for arr in (alpha, sigma, lam):
        arr.setflags(write=False)
    omega = np.ones(T)
    omega.setflags(write=False)
    return Schedule(kind, T, alpha, sigma, lam, omega)


def make_schedule(kind: str = "cosine", T: int = 64) -> Schedule:
    """Build a variance-preserving schedule with ``alpha**2 + sigma**2 == 1``.

    ``cosine`` follows the squared-cosine cumulative signal curve with
    offset 0.008; ``linear`` integrates DDPM's linear beta ramp
    (0.1 to 20 in continuous time), which matches the 1000-step DDPM
    schedule and stays strictly monotone for short chains. Per-step betas
    are capped at 0.999.
    """
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T}")
    T = int(T)
    steps = np.arange(0, T + 1, dtype=np.float64)
    if kind == "cosine":
        s = 0.008
        f = np.cos((steps / T + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        betas = 1.0 - ab[1:] / ab[:-1]
    elif kind == "linear":
        tau = steps / T
        ab = np.exp(-(0.1 * tau + 0.5 * (20.0 - 0.1) * tau * tau))
        betas = 1.0 - ab[1:] / ab[:-1]
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    betas = np.clip(betas, 1e-8, MAX_BETA)
    return _schedule_from_alpha_bar(kind, np.cumprod(1.0 - betas))


def forward_sample(schedule: Schedule, x0, t, eps) -> np.ndarray:
    """Corrupt ``x0`` to step ``t``: ``alpha_t * x0 + sigma_t * eps``.

    ``t`` is a scalar or one timestep per row of ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} differs from x0 shape {x0.shape}")
    a = schedule.alpha_at(t)
    s = schedule.sigma_at(t)
    if a.ndim == 1 and x0.ndim == 2:
        a, s = a[:, None], s[:, None]
    return a * x0 + s * eps


def time_embedding(t, T: int, dim: int = 8) -> np.ndarray:
    """Sinusoidal features of ``t / T`` at octave-spaced frequencies."""
    tau = np.atleast_1d(np.asarray(t, dtype=np.float64)) / T
    freqs = math.pi * 2.0 ** np.arange(dim // 2)
    angles = tau[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@dataclass
class DenoiserParams:
    """MLP weights for ``[x_t | c | emb(t)] -> eps_hat``.

    Layer ``i`` is stored as ``W{i}`` of shape ``(fan_in + 1, fan_out)``; the
    last row is the bias, applied by appending a ones column to the input.
    """

    dim: int
    cond_dim: int
    hidden: tuple[int, ...]
    emb_dim: int
    weights: dict[str, np.ndarray] = field(repr=False)

    @property
    def in_dim(self) -> int:
        return self.dim + self.cond_dim + self.emb_dim

    @property
    def names(self) -> list[str]:
        return [f"W{i}" for i in range(len(self.hidden) + 1)]

    @property
    def n_params(self) -> int:
        return int(sum(w.size for w in self.weights.values()))

    def leaves(self) -> list[nd.Tensor]:
        return [nd.Tensor(self.weights[k]) for k in self.names]

    def trace(self, tape: nd.Tape) -> "TracedParams":
        return TracedParams(self, [tape.variable(self.weights[k]) for k in self.names])

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(
            self.dim, self.cond_dim, tuple(self.hidden), self.emb_dim,
            {k: np.array(v, dtype=np.float64) for k, v in self.weights.items()},
        )

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(repr((self.dim, self.cond_dim, tuple(self.hidden), self.emb_dim)).encode())
        for k in self.names:
            h.update(np.ascontiguousarray(self.weights[k], dtype="<f8").tobytes())
        return h.hexdigest()

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights[k].ravel() for k in self.names])

    def with_flat(self, vector) -> "DenoiserParams":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.size != self.n_params:
            raise ValueError(f"expected {self.n_params} values, got {vector.size}")
        out, i = {}, 0
        for k in self.names:
            shape = self.weights[k].shape
            n = int(np.prod(shape))
            out[k] = vector[i:i + n].reshape(shape).copy()
            i += n
        return DenoiserParams(self.dim, self.cond_dim, tuple(self.hidden), self.emb_dim, out)

    def architecture(self) -> dict:
        return {"dim": self.dim, "cond_dim": self.cond_dim, "hidden": list(self.hidden), "emb_dim": self.emb_dim}


class TracedParams:
    """DenoiserParams whose weights are trainable leaves on a tape."""

    def __init__(self, params: DenoiserParams, tensors: list[nd.Tensor]):
        self.params = params
        self.tensors = tensors

    def __getattr__(self, name):
        return getattr(self.params, name)

    def leaves(self) -> list[nd.Tensor]:
        return self.tensors

    def gradients(self, grads: nd.GradientMap) -> dict[str, np.ndarray]:
        return {k: grads.of(t) for k, t in zip(self.params.names, self.tensors)}


class ReferenceHandle:
    """Read-only snapshot of denoiser weights used as a frozen reference."""

    def __init__(self, params: DenoiserParams):
        snap = params.copy()
        for w in snap.weights.values():
            w.setflags(write=False)
        self._params = snap
        self._checksum = snap.checksum()

    @property
    def params(self) -> DenoiserParams:
        return self._params

    @property
    def checksum(self) -> str:
        return self._checksum

    def verify(self) -> None:
        if self._params.checksum() != self._checksum:
            raise RuntimeError("reference snapshot was mutated")


def init_denoiser(
    dim: int,
    cond_dim: int,
    hidden=(64, 64),
    emb_dim: int = 8,
    seed: int = 0,
    zero_output: bool = False,
) -> DenoiserParams:
    if dim < 1 or cond_dim < 0 or emb_dim < 2 or emb_dim % 2:
        raise ValueError("dim >= 1, cond_dim >= 0 and an even emb_dim >= 2 are required")
    rng = np.random.default_rng(seed)
    widths = [dim + cond_dim + emb_dim, *hidden, dim]
    weights = {}
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        w = np.zeros((fan_in + 1, fan_out))
        last = i == len(widths) - 2
        if not (last and zero_output):
            scale = (0.1 if last else 1.0) / math.sqrt(fan_in)
            w[:fan_in] = rng.standard_normal((fan_in, fan_out)) * scale
        weights[f"W{i}"] = w
    return DenoiserParams(dim, cond_dim, tuple(int(h) for h in hidden), emb_dim, weights)


def _mlp(leaves: list[nd.Tensor], h: nd.Tensor) -> nd.Tensor:
    ones = nd.Tensor(np.ones((h.shape[0], 1)))
    last = len(leaves) - 1
    for i, w in enumerate(leaves):
        h = nd.matmul(nd.concat([h, ones], axis=1), w)
        if i < last:
            h = h * nd.sigmoid(h)
    return h


def denoiser_inputs(params, x_t, c, t, T: int) -> np.ndarray:
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    n = x_t.shape[0]
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 1:
        c = np.broadcast_to(c, (n, c.size))
    t = np.broadcast_to(np.asarray(t), (n,))
    if x_t.shape[1] != params.dim or c.shape != (n, params.cond_dim):
        raise ValueError(
            f"denoiser expects x_t (n, {params.dim}) and c (n, {params.cond_dim}); "
            f"got {x_t.shape} and {c.shape}"
        )
    return np.concatenate([x_t, c, time_embedding(t, T, params.emb_dim)], axis=1)


def denoise_predict(params, x_t, c, t, schedule: Schedule) -> nd.Tensor:
    """Noise prediction for a batch; differentiable when ``params`` is traced."""
    t = schedule.check_t(t)
    h = nd.Tensor(denoiser_inputs(params, x_t, c, t, schedule.T))
    return _mlp(params.leaves(), h)


def optimal_gaussian_denoiser(mu, s2, schedule: Schedule, x_t, t) -> np.ndarray:
    """Bayes-optimal noise prediction when ``x0 ~ N(mu, s2 * I)``.

    ``mu`` may hold one mean per row of ``x_t``; ``s2`` a variance per row.
    """
    t = schedule.check_t(t)
    a = schedule.alpha[t - 1]
    s = schedule.sigma[t - 1]
    if np.any(s <= 0):
        raise ValueError("sigma_t must be positive")
    s2 = np.asarray(s2, dtype=np.float64)
    if np.any(s2 <= 0):
        raise ValueError("data variance must be positive")
    x_t = np.asarray(x_t, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if x_t.ndim == 2:
        a = np.broadcast_to(a, (x_t.shape[0],))[:, None]
        s = np.broadcast_to(s, (x_t.shape[0],))[:, None]
        if s2.ndim == 1:
            s2 = s2[:, None]
    posterior_mean = (a * s2 * x_t + s * s * mu) / (a * a * s2 + s * s)
    return (x_t - a * posterior_mean) / s


def ancestral_sample(params, schedule: Schedule, c, n: int, seed: int, dim: int | None = None) -> np.ndarray:
    """Draw ``n`` samples by iterating the DDPM posterior step from t = T to 1.

    ``params`` is either :class:`DenoiserParams` or a callable
    ``eps_fn(x_t, c, t) -> eps_hat`` (e.g. a wrapped analytic oracle).
    The last step returns the predicted clean sample without added noise.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(params, (DenoiserParams, TracedParams)):
        dim = params.dim
        eps_fn: Callable = lambda x, cc, t: denoise_predict(params, x, cc, t, schedule).values
    else:
        if dim is None:
            raise ValueError("dim is required when sampling with a callable")
        eps_fn = params
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 1:
        c = np.broadcast_to(c, (n, c.size))
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, dim))
    alpha, sigma = schedule.alpha, schedule.sigma
    for t in range(schedule.T, 0, -1):
        a_t, s_t = alpha[t - 1], sigma[t - 1]
        eps = eps_fn(x, c, np.full(n, t))
        x0_hat = (x - s_t * eps) / a_t
        if t == 1:
            x = x0_hat
        else:
            a_prev, s_prev = alpha[t - 2], sigma[t - 2]
            beta = 1.0 - (a_t / a_prev) ** 2
            coef_x0 = a_prev * beta / s_t**2
            coef_xt = (a_t / a_prev) * s_prev**2 / s_t**2
            var = s_prev**2 / s_t**2 * beta
            x = coef_x0 * x0_hat + coef_xt * x + math.sqrt(var) * rng.standard_normal((n, dim))
        if not np.all(np.isfinite(x)):
            raise SamplerDivergence(t)
    return x
