"""Evaluation metrics standing in for embedding- and judge-based scores."""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .diffusion import Schedule, ancestral_sample
from .tasks import TaskSpec, sample_data

__all__ = [
    "CSV_COLUMNS",
    "MetricsReport",
    "evaluate",
    "oracle_reward",
    "target_mass",
    "two_sample_distance",
    "win_rate",
]

_BLOCK = 1024


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MAPO_LAB_THREADS", "1")))
    except ValueError:
        return 1


def _mean_pairwise(a: np.ndarray, b: np.ndarray) -> float:
    """Mean Euclidean distance over all (a_i, b_j), summed block by block."""
    blocks = [(i, j) for i in range(0, len(a), _BLOCK) for j in range(0, len(b), _BLOCK)]

    def block_sum(ij):
        i, j = ij
        return float(cdist(a[i:i + _BLOCK], b[j:j + _BLOCK]).sum())

    workers = min(_threads(), len(blocks))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            sums = list(pool.map(block_sum, blocks))
    else:
        sums = [block_sum(ij) for ij in blocks]
    # fixed reduction order keeps the result independent of thread count
    total = 0.0
    for s in sums:
        total += s
    return total / (len(a) * len(b))


def two_sample_distance(A, B) -> float:
    """Energy distance ``2 E|a-b| - E|a-a'| - E|b-b'|`` (V-statistic form).

    The V-statistic includes the zero diagonal terms, which makes it
    non-negative and exactly zero for identical sets.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if len(A) < 2 or len(B) < 2:
        raise ValueError("two_sample_distance needs at least 2 points per set")
    if A.shape[1] != B.shape[1]:
        raise ValueError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    # canonical operand order makes the result exactly symmetric
    if (len(B), B.tobytes()) < (len(A), A.tobytes()):
        A, B = B, A
    ab = _mean_pairwise(A, B)
    aa = _mean_pairwise(A, A)
    bb = _mean_pairwise(B, B)
    return 2.0 * ab - aa - bb


def oracle_reward(task: TaskSpec, x, c) -> np.ndarray | float:
    """Log-density under the target mixture component selected by ``c``."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("oracle_reward needs finite samples")
    cls = task.class_of(c)
    out = task.log_density("target", x, cls if cls.size > 1 else cls[0])
    return float(out[0]) if x.ndim == 1 else out


def win_rate(task: TaskSpec, gen_a, gen_b, c) -> float:
    """Fraction of matched pairs where ``a`` out-scores ``b``; ties count 1/2."""
    gen_a = np.atleast_2d(gen_a)
    gen_b = np.atleast_2d(gen_b)
    if gen_a.shape != gen_b.shape:
        raise ValueError("win_rate needs equally many samples on both sides")
    ra = oracle_reward(task, gen_a, c)
    rb = oracle_reward(task, gen_b, c)
    return float(np.mean((ra > rb) + 0.5 * (ra == rb)))


def target_mass(task: TaskSpec, x, cls: int) -> float:
    """Share of samples within two stds of the class's target mean."""
    mu, var = task.moments("target", cls)
    dist = np.linalg.norm(np.atleast_2d(x) - mu, axis=1)
    return float(np.mean(dist <= 2.0 * np.sqrt(var)))


CSV_COLUMNS = ["mismatch", "mean_oracle_reward", "win_rate_vs_base", "target_mass", "n", "seed"]


@dataclass
class MetricsReport:
    mismatch: float
    mean_oracle_reward: float
    win_rate_vs_base: float
    target_mass: float
    n: int
    seed: int
    wall_time_s: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.win_rate_vs_base <= 1.0 or not 0.0 <= self.target_mass <= 1.0:
            raise ValueError("rates must lie in [0, 1]")
        if self.mismatch < 0:
            raise ValueError("mismatch must be non-negative")

    def csv_row(self) -> list[str]:
        """Row in :data:`CSV_COLUMNS` order; wall time is kept out for reproducibility."""
        return [repr(float(self.mismatch)), repr(float(self.mean_oracle_reward)),
                repr(float(self.win_rate_vs_base)), repr(float(self.target_mass)), str(self.n), str(self.seed)]

    def to_json(self, include_timing: bool = True) -> str:
        d = asdict(self)
        if not include_timing:
            d.pop("wall_time_s")
        return json.dumps(d, sort_keys=True)


def evaluate(params, task: TaskSpec, n: int, seed: int, schedule: Schedule, base_params=None) -> MetricsReport:
    """Sample ``n`` generations per condition and score them.

    Win rate compares against ``base_params`` generations drawn with the
    same seed (common random numbers), or against base-mixture draws when
    no base model is given. Per-condition values are averaged uniformly.
    """
    if n < 64:
        raise ValueError("evaluate needs n >= 64 samples per condition")
    start = time.perf_counter()
    mism, reward, wins, mass = [], [], [], []
    for k in range(task.cond_dim):
        c = task.one_hot(k)
        k_seed = seed + 1009 * k
        gen = ancestral_sample(params, schedule, c, n, k_seed, dim=task.dim)
        ref = sample_data(task, "target", k, n, k_seed + 1)
        if base_params is None:
            other = sample_data(task, "base", k, n, k_seed + 2)
        else:
            other = ancestral_sample(base_params, schedule, c, n, k_seed, dim=task.dim)
        mism.append(max(two_sample_distance(gen, ref), 0.0))
        reward.append(float(np.mean(oracle_reward(task, gen, k))))
        wins.append(win_rate(task, gen, other, k))
        mass.append(target_mass(task, gen, k))
    return MetricsReport(
        mismatch=float(np.mean(mism)),
        mean_oracle_reward=float(np.mean(reward)),
        win_rate_vs_base=float(np.mean(wins)),
        target_mass=float(np.mean(mass)),
        n=n,
        seed=seed,
        wall_time_s=time.perf_counter() - start,
    )
