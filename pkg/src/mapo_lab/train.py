"""Deterministic minibatch training with Adam and binary checkpoints.

Randomness is counter-based: the minibatch order of epoch ``e`` comes
from ``default_rng([seed, e, 0])`` and the timesteps/noise of step ``s``
from ``default_rng([seed, s, 1])``. A checkpoint therefore only needs the
seed and the step counter to resume bit-identically.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from ._io import IntegrityError, atomic_write, crc64
from .diffusion import DenoiserParams, ReferenceHandle, init_denoiser, make_schedule
from .metrics import MetricsReport, evaluate
from .objectives import ObjectiveConfig, PairBatch, draw_noise, objective_loss
from .tasks import Dataset, TaskSpec

__all__ = [
    "AdamConfig",
    "AdamState",
    "Checkpoint",
    "FingerprintMismatch",
    "STEP_COLUMNS",
    "StepLog",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "adam_step",
    "load_checkpoint",
    "lr_at",
    "save_checkpoint",
    "train",
    "write_step_log",
]

CHECKPOINT_MAGIC = b"MAPOCK1\x00"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``checkpoint`` holds the last good state."""

    def __init__(self, step: int, checkpoint: "Checkpoint"):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.checkpoint = checkpoint


class FingerprintMismatch(ValueError):
    """Dataset, task or config fingerprints disagree."""


@dataclass(frozen=True)
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    adam: AdamConfig = field(default_factory=AdamConfig)
    seed: int = 0
    eval_every: int = 0
    eval_n: int = 256
    min_lr_frac: float = 0.1
    clip_grad: float | None = None
    schedule: str = "cosine"
    T: int = 64

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.clip_grad is not None and not self.clip_grad > 0:
            raise ValueError("clip_grad must be positive when set")

    def canonical(self) -> dict:
        d = asdict(self)
        d.pop("eval_every")
        d.pop("eval_n")
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: DenoiserParams) -> "AdamState":
        return cls(0, {k: np.zeros_like(w) for k, w in params.weights.items()},
                   {k: np.zeros_like(w) for k, w in params.weights.items()})


def adam_step(weights: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              hyper: AdamConfig = AdamConfig()) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update with optional decoupled weight decay."""
    t = state.step + 1
    b1, b2 = hyper.beta1, hyper.beta2
    new_w, new_m, new_v = {}, {}, {}
    for k, w in weights.items():
        g = grads[k]
        if g.shape != w.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, expected {w.shape}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        update = m_hat / (np.sqrt(v_hat) + hyper.eps)
        if hyper.weight_decay:
            update = update + hyper.weight_decay * w
        new_w[k] = w - lr * update
        new_m[k], new_v[k] = m, v
    return new_w, AdamState(t, new_m, new_v)


def lr_at(config: TrainConfig, step: int) -> float:
    """Cosine decay from ``lr`` to ``min_lr_frac * lr`` over the run."""
    frac = step / max(config.steps - 1, 1)
    floor = config.min_lr_frac
    return config.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0))))


@dataclass
class Checkpoint:
    params: DenoiserParams
    adam: AdamState
    step: int
    rng_state: dict
    config_fingerprint: str
    task_fingerprint: str = ""
    schedule: dict = field(default_factory=lambda: {"kind": "cosine", "T": 64})

    def to_bytes(self) -> bytes:
        header = {
            "arch": self.params.architecture(),
            "step": self.step,
            "adam_step": self.adam.step,
            "rng_state": self.rng_state,
            "config_fingerprint": self.config_fingerprint,
            "task_fingerprint": self.task_fingerprint,
            "schedule": self.schedule,
        }
        hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        names = self.params.names
        blob = np.concatenate(
            [self.params.flat()]
            + [self.adam.m[k].ravel() for k in names]
            + [self.adam.v[k].ravel() for k in names]
        ).astype("<f8").tobytes()
        payload = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(hb)) + hb + blob
        return payload + struct.pack("<Q", crc64(payload))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < 16 + 8:
            raise IntegrityError("checkpoint truncated")
        if data[:8] != CHECKPOINT_MAGIC:
            raise IntegrityError("not a checkpoint file: bad magic")
        (stored,) = struct.unpack_from("<Q", data, len(data) - 8)
        if crc64(data[:-8]) != stored:
            raise IntegrityError("checkpoint checksum mismatch")
        version, hlen = struct.unpack_from("<II", data, 8)
        if version != CHECKPOINT_VERSION:
            raise IntegrityError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(data[16:16 + hlen])
        except ValueError as exc:
            raise IntegrityError(f"unreadable checkpoint header: {exc}") from None
        arch = header["arch"]
        template = init_denoiser(arch["dim"], arch["cond_dim"], tuple(arch["hidden"]), arch["emb_dim"])
        n = template.n_params
        body = data[16 + hlen:-8]
        if len(body) != 3 * n * 8:
            raise IntegrityError("checkpoint body has the wrong length")
        values = np.frombuffer(body, dtype="<f8").astype(np.float64)
        params = template.with_flat(values[:n])
        m = template.with_flat(values[n:2 * n]).weights
        v = template.with_flat(values[2 * n:]).weights
        return cls(params, AdamState(header["adam_step"], m, v), header["step"], header["rng_state"],
                   header["config_fingerprint"], header["task_fingerprint"], header["schedule"])


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    atomic_write(path, checkpoint.to_bytes())


def load_checkpoint(path, expect_fingerprint: str | None = None) -> Checkpoint:
    ckpt = Checkpoint.from_bytes(Path(path).read_bytes())
    if expect_fingerprint is not None and ckpt.config_fingerprint != expect_fingerprint:
        raise FingerprintMismatch("checkpoint was written by a different training config")
    return ckpt


STEP_COLUMNS = ["step", "total", "mse_w", "mse_l", "margin", "phi_w", "phi_l", "grad_norm", "lr"]


@dataclass
class StepLog:
    step: int
    total: float
    mse_w: float
    mse_l: float
    margin: float
    phi_w: float
    phi_l: float
    grad_norm: float
    lr: float
    wall_time_s: float

    def row(self) -> list[str]:
        return [str(self.step)] + [repr(float(getattr(self, k))) for k in STEP_COLUMNS[1:]]


def write_step_log(logs: list[StepLog], path, timing_path=None) -> None:
    """Deterministic columns go to ``path``; wall times to ``timing_path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STEP_COLUMNS)
        for log in logs:
            w.writerow(log.row())
    if timing_path is not None:
        with open(timing_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "wall_time_s"])
            for log in logs:
                w.writerow([log.step, f"{log.wall_time_s:.6f}"])


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    logs: list[StepLog]
    reports: list[MetricsReport]

    @property
    def params(self) -> DenoiserParams:
        return self.checkpoint.params


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0]).permutation(n)


def train(
    config: TrainConfig,
    dataset: Dataset,
    init_params: DenoiserParams,
    task: TaskSpec,
    resume: Checkpoint | None = None,
    stop_after: int | None = None,
    reference: DenoiserParams | None = None,
    eval_seed: int = 10_000,
) -> TrainResult:
    """Run ``config.steps`` Adam updates on minibatches of ``dataset``.

    DPO snapshots ``reference`` (default ``init_params``) as its frozen
    reference before the first step. ``resume`` continues from a
    checkpoint of the same config; ``stop_after`` ends early at that step
    so the run can be resumed later.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if dataset.fingerprint != task.fingerprint():
        raise FingerprintMismatch("dataset was generated for a different task")
    if dataset.dim != init_params.dim or dataset.cond_dim != init_params.cond_dim:
        raise ValueError("dataset dimensions do not match the denoiser")
    fp = config.fingerprint()
    schedule = make_schedule(config.schedule, config.T)
    obj = config.objective
    ref = ReferenceHandle(reference if reference is not None else init_params) if obj.kind == "dpo" else None

    if resume is not None:
        if resume.config_fingerprint != fp:
            raise FingerprintMismatch("checkpoint was written by a different training config")
        params, adam, start = resume.params.copy(), resume.adam, resume.step
    else:
        params, adam, start = init_params.copy(), AdamState.zeros_like(init_params), 0

    def snapshot(p, a, s) -> Checkpoint:
        return Checkpoint(p.copy(), a, s, {"seed": config.seed, "step": s}, fp, task.fingerprint().hex(),
                          {"kind": config.schedule, "T": config.T})

    N = len(dataset)
    B = min(config.batch_size, N)
    per_epoch = N // B
    end = config.steps if stop_after is None else min(stop_after, config.steps)
    logs: list[StepLog] = []
    reports: list[MetricsReport] = []
    order, order_epoch = None, -1
    for step in range(start, end):
        t0 = time.perf_counter()
        epoch, pos = divmod(step, per_epoch)
        if epoch != order_epoch:
            order, order_epoch = _epoch_order(config.seed, epoch, N), epoch
        idx = order[pos * B:(pos + 1) * B]
        batch = PairBatch(dataset.c[idx], dataset.x_w[idx], dataset.x_l[idx])
        rng = np.random.default_rng([config.seed, step, 1])
        noise = draw_noise(rng, B, dataset.dim, schedule.T, obj.share_noise)
        with nd.Tape() as tape:
            traced = params.trace(tape)
            bd = objective_loss(traced, schedule, batch, obj, noise, ref)
        if not math.isfinite(bd.total):
            raise TrainingDiverged(step, snapshot(params, adam, step))
        grads = traced.gradients(nd.backward(bd.loss))
        gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if not math.isfinite(gnorm):
            raise TrainingDiverged(step, snapshot(params, adam, step))
        if config.clip_grad is not None and gnorm > config.clip_grad:
            scale = config.clip_grad / gnorm
            grads = {k: g * scale for k, g in grads.items()}
        lr = lr_at(config, step)
        new_w, adam = adam_step(params.weights, grads, adam, lr, config.adam)
        params = DenoiserParams(params.dim, params.cond_dim, params.hidden, params.emb_dim, new_w)
        logs.append(StepLog(step + 1, bd.total, bd.mse_w, bd.mse_l, bd.margin, bd.phi_w, bd.phi_l, gnorm, lr,
                            time.perf_counter() - t0))
        if config.eval_every and (step + 1) % config.eval_every == 0:
            reports.append(evaluate(params, task, config.eval_n, eval_seed, schedule))
    if ref is not None:
        ref.verify()
    return TrainResult(snapshot(params, adam, end), logs, reports)
