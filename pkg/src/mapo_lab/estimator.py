"""scikit-learn style wrapper around preference alignment.

``PreferenceAligner.fit`` takes preference rows ``[c, x_w, x_l]`` (or a
:class:`~mapo_lab.tasks.Dataset`), ``predict`` draws one generation per
condition row and ``score`` returns the negative denoising MSE on the
chosen samples, so that higher is better as sklearn expects.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .diffusion import DenoiserParams, ancestral_sample, init_denoiser, make_schedule
from .metrics import MetricsReport, evaluate
from .objectives import ObjectiveConfig, mse_loss
from .tasks import PRESET_BETAS, Dataset, TaskSpec, preset
from .train import TrainConfig, train

__all__ = ["PreferenceAligner", "check_conditions", "check_preference_array", "dataset_from_array"]


def check_preference_array(X, dim: int, cond_dim: int) -> np.ndarray:
    """Validate rows laid out as ``[c (cond_dim), x_w (dim), x_l (dim)]``."""
    X = check_array(X, dtype=np.float64, ensure_2d=True, ensure_all_finite=True)
    width = cond_dim + 2 * dim
    if X.shape[1] != width:
        raise ValueError(f"expected {width} columns (c, x_w, x_l), got {X.shape[1]}")
    return X


def check_conditions(C, cond_dim: int) -> np.ndarray:
    """Accept a 1-D array of class labels or 2-D one-hot rows; return one-hot rows."""
    C = np.asarray(C)
    if C.ndim == 1:
        labels = check_array(C.reshape(-1, 1), dtype=np.float64).ravel()
        if np.any(labels != np.round(labels)) or labels.min() < 0 or labels.max() >= cond_dim:
            raise ValueError(f"class labels must be integers in [0, {cond_dim})")
        return np.eye(cond_dim)[labels.astype(np.int64)]
    C = check_array(C, dtype=np.float64)
    if C.shape[1] != cond_dim:
        raise ValueError(f"expected {cond_dim} condition columns, got {C.shape[1]}")
    if not np.all((C == 0) | (C == 1)) or not np.all(C.sum(axis=1) == 1):
        raise ValueError("conditions must be one-hot rows")
    return C


def dataset_from_array(X, task: TaskSpec, seed: int = 0) -> Dataset:
    X = check_preference_array(X, task.dim, task.cond_dim)
    c = check_conditions(X[:, :task.cond_dim], task.cond_dim)
    d = task.dim
    return Dataset(task.fingerprint(), seed, c, X[:, task.cond_dim:task.cond_dim + d],
                   X[:, task.cond_dim + d:])


class PreferenceAligner(BaseEstimator):
    """Fine-tune a small conditional denoiser with MaPO, Diffusion-DPO or SFT.

    Parameters mirror :class:`~mapo_lab.train.TrainConfig`. ``task`` is a
    preset name or a :class:`TaskSpec`; ``init_params`` is the starting
    model (and the DPO reference), a fresh denoiser when None.
    """

    def __init__(self, task="style", mismatch_level=None, objective="mapo", beta=None, beta_dpo=500.0,
                 steps=2000, batch_size=64, lr=1e-3, hidden=(64, 64), schedule="cosine", T=64, seed=0,
                 init_params=None):
        self.task = task
        self.mismatch_level = mismatch_level
        self.objective = objective
        self.beta = beta
        self.beta_dpo = beta_dpo
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.hidden = hidden
        self.schedule = schedule
        self.T = T
        self.seed = seed
        self.init_params = init_params

    def _task(self) -> TaskSpec:
        if isinstance(self.task, TaskSpec):
            return self.task if self.mismatch_level is None else self.task.at_level(self.mismatch_level)
        return preset(self.task, self.mismatch_level)

    def _beta(self) -> float:
        if self.beta is not None:
            return float(self.beta)
        name = self.task.name if isinstance(self.task, TaskSpec) else self.task
        return PRESET_BETAS.get(name, ObjectiveConfig.beta)

    def fit(self, X, y=None):
        task = self._task()
        data = X if isinstance(X, Dataset) else dataset_from_array(X, task, self.seed)
        init = self.init_params
        if init is None:
            init = init_denoiser(task.dim, task.cond_dim, tuple(self.hidden), seed=self.seed)
        elif not isinstance(init, DenoiserParams):
            raise TypeError("init_params must be DenoiserParams or None")
        config = TrainConfig(
            objective=ObjectiveConfig(self.objective, beta=self._beta(), beta_dpo=float(self.beta_dpo)),
            steps=int(self.steps),
            batch_size=int(self.batch_size),
            lr=float(self.lr),
            seed=int(self.seed),
            schedule=self.schedule,
            T=int(self.T),
        )
        result = train(config, data, init, task)
        self.task_ = task
        self.schedule_ = make_schedule(self.schedule, self.T)
        self.params_ = result.params
        self.checkpoint_ = result.checkpoint
        self.loss_curve_ = np.array([entry.total for entry in result.logs])
        self.n_features_in_ = task.cond_dim + 2 * task.dim
        return self

    def sample(self, c, n: int, seed: int = 0) -> np.ndarray:
        """``n`` generations for a single condition (label or one-hot)."""
        check_is_fitted(self, "params_")
        c = np.asarray(c)
        cond = check_conditions(c.reshape(1, -1) if c.ndim == 1 else c.reshape(1), self.task_.cond_dim)
        return ancestral_sample(self.params_, self.schedule_, cond[0], n, seed)

    def predict(self, C, seed: int = 0) -> np.ndarray:
        """One generation per condition row."""
        check_is_fitted(self, "params_")
        cond = check_conditions(C, self.task_.cond_dim)
        return ancestral_sample(self.params_, self.schedule_, cond, len(cond), seed)

    def score(self, X, y=None, seed: int = 0) -> float:
        """Negative noise-prediction MSE on the chosen samples of ``X``."""
        check_is_fitted(self, "params_")
        task = self.task_
        data = X if isinstance(X, Dataset) else dataset_from_array(X, task)
        rng = np.random.default_rng(seed)
        n = len(data)
        t = rng.integers(1, self.schedule_.T + 1, size=n)
        eps = rng.standard_normal((n, task.dim))
        return -mse_loss(self.params_, self.schedule_, data.c, data.x_w, t, eps).item()

    def evaluate(self, n: int = 512, seed: int = 7, base_params=None) -> MetricsReport:
        check_is_fitted(self, "params_")
        return evaluate(self.params_, self.task_, n, seed, self.schedule_, base_params=base_params)
