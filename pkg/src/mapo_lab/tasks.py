"""Synthetic conditional tasks, preference-pair synthesis and dataset files.

A task is a Gaussian mixture with one isotropic component per condition
class. Conditions are one-hot vectors; class ``k`` selects component ``k``.
The target distribution is the base mixture with every component mean
translated by ``mismatch_level * std`` along a fixed unit direction
(radially outward from the origin, or the first axis for a centred mean).
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._io import IntegrityError, atomic_write, crc64
from .diffusion import SamplerDivergence, Schedule, ancestral_sample

__all__ = [
    "Component",
    "Dataset",
    "PRESETS",
    "PreferenceTriple",
    "TaskSpec",
    "export_json",
    "import_json",
    "load_dataset",
    "preset",
    "sample_data",
    "save_dataset",
    "synthesize_preferences",
]

DATASET_MAGIC = b"MAPODS1\x00"
DATASET_VERSION = 1
_HEADER = struct.Struct("<8sIQIII32s")


@dataclass(frozen=True)
class Component:
    weight: float
    mean: tuple[float, ...]
    std: float


@dataclass(frozen=True)
class TaskSpec:
    name: str
    base_mixture: tuple[Component, ...]
    mismatch_level: float = 0.0
    dim: int = 2
    cond_dim: int = 4

    def __post_init__(self):
        comps = tuple(
            c if isinstance(c, Component) else Component(float(c[0]), tuple(map(float, c[1])), float(c[2]))
            for c in self.base_mixture
        )
        object.__setattr__(self, "base_mixture", comps)
        if not comps:
            raise ValueError("a task needs at least one mixture component")
        if abs(sum(c.weight for c in comps) - 1.0) > 1e-9:
            raise ValueError("mixture weights must sum to 1")
        if any(c.std <= 0 or c.weight < 0 for c in comps):
            raise ValueError("component stds must be positive and weights non-negative")
        if any(len(c.mean) != self.dim for c in comps):
            raise ValueError(f"component means must have dimension {self.dim}")
        if len(comps) != self.cond_dim:
            raise ValueError("one mixture component per condition class is required")
        if not self.mismatch_level >= 0:
            raise ValueError("mismatch_level must be >= 0")

    @property
    def target_mixture(self) -> tuple[Component, ...]:
        if self.mismatch_level == 0:
            return self.base_mixture
        out = []
        for c in self.base_mixture:
            mean = np.asarray(c.mean)
            norm = np.linalg.norm(mean)
            direction = mean / norm if norm > 0 else np.eye(self.dim)[0]
            shifted = mean + self.mismatch_level * c.std * direction
            out.append(Component(c.weight, tuple(float(v) for v in shifted), c.std))
        return tuple(out)

    def at_level(self, level: float) -> "TaskSpec":
        return replace(self, mismatch_level=float(level))

    def mixture(self, which: str) -> tuple[Component, ...]:
        if which == "base":
            return self.base_mixture
        if which == "target":
            return self.target_mixture
        raise ValueError(f"unknown mixture {which!r}; expected 'base' or 'target'")

    def moments(self, which: str, cls) -> tuple[np.ndarray, np.ndarray]:
        """Per-row component mean and variance for class labels ``cls``."""
        comps = self.mixture(which)
        means = np.array([c.mean for c in comps])
        var = np.array([c.std**2 for c in comps])
        cls = np.asarray(cls)
        return means[cls], var[cls]

    def one_hot(self, cls) -> np.ndarray:
        return np.eye(self.cond_dim)[np.asarray(cls)]

    def class_of(self, c) -> np.ndarray:
        """Class labels from one-hot rows (or integer labels passed through)."""
        c = np.asarray(c)
        if c.ndim == 0 or (c.ndim == 1 and np.issubdtype(c.dtype, np.integer)):
            labels = np.atleast_1d(c).astype(np.int64)
            if np.any(labels < 0) or np.any(labels >= self.cond_dim):
                raise ValueError(f"unknown condition value {c.tolist()}")
            return labels
        rows = np.atleast_2d(c.astype(np.float64))
        if rows.shape[1] != self.cond_dim:
            raise ValueError(f"condition must have {self.cond_dim} entries")
        valid = np.all((rows == 0) | (rows == 1), axis=1) & (rows.sum(axis=1) == 1)
        if not np.all(valid):
            raise ValueError(f"unknown condition value {rows[~valid][0].tolist()}")
        return rows.argmax(axis=1)

    def log_density(self, which: str, x, cls) -> np.ndarray:
        """``log p(x | c)`` under the named mixture, one value per row."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        mu, var = self.moments(which, np.broadcast_to(np.asarray(cls), (x.shape[0],)))
        comps = self.mixture(which)
        w = np.array([c.weight for c in comps])[np.broadcast_to(np.asarray(cls), (x.shape[0],))]
        sq = np.sum((x - mu) ** 2, axis=1)
        return np.log(w) - 0.5 * self.dim * np.log(2 * math.pi * var) - 0.5 * sq / var

    def canonical(self) -> dict:
        return {
            "name": self.name,
            "dim": self.dim,
            "cond_dim": self.cond_dim,
            "mismatch_level": float(self.mismatch_level),
            "base_mixture": [[c.weight, list(c.mean), c.std] for c in self.base_mixture],
        }

    def fingerprint(self) -> bytes:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(
            name=d.get("name", "custom"),
            base_mixture=tuple(Component(float(w), tuple(map(float, m)), float(s)) for w, m, s in d["base_mixture"]),
            mismatch_level=float(d.get("mismatch_level", 0.0)),
            dim=int(d.get("dim", 2)),
            cond_dim=int(d.get("cond_dim", len(d["base_mixture"]))),
        )


def _four_class_base(std: float = 0.5) -> tuple[Component, ...]:
    r = 2.0
    means = [(r, r), (-r, r), (-r, -r), (r, -r)]
    return tuple(Component(0.25, m, std) for m in means)


PRESETS: dict[str, float] = {
    "preference": 0.0,
    "culture": 0.5,
    "safety": 1.0,
    "style": 2.0,
    "personalization": 4.0,
}

# MaPO beta defaults per preset, ordered by mismatch
PRESET_BETAS: dict[str, float] = {
    "preference": 8.0,
    "culture": 32.0,
    "safety": 64.0,
    "style": 64.0,
    "personalization": 1024.0,
}


def preset(name: str, mismatch_level: float | None = None) -> TaskSpec:
    """Named task: one of :data:`PRESETS`, ``"gaussian"`` or ``"custom"``.

    ``gaussian`` is a single-condition N((1, -0.5), 0.25 I) task used for
    oracle comparisons. ``custom`` is the four-class base at any level.
    """
    if name == "gaussian":
        task = TaskSpec("gaussian", (Component(1.0, (1.0, -0.5), 0.5),), 0.0, dim=2, cond_dim=1)
    elif name in PRESETS:
        task = TaskSpec(name, _four_class_base(), PRESETS[name])
    elif name == "custom":
        task = TaskSpec("custom", _four_class_base(), 0.0)
    else:
        raise ValueError(f"unknown task preset {name!r}")
    return task if mismatch_level is None else task.at_level(mismatch_level)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _draw(task: TaskSpec, which: str, cls: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    mu, var = task.moments(which, cls)
    return mu + np.sqrt(var)[:, None] * rng.standard_normal((cls.size, task.dim))


def sample_data(task: TaskSpec, which: str, c, n: int, seed: int, return_labels: bool = False):
    """I.i.d. draws from the base or target mixture.

    ``c`` is a class label, a one-hot vector, or ``None`` to draw from the
    full mixture (component picked by weight).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    comps = task.mixture(which)
    rng = np.random.default_rng(seed)
    if c is None:
        w = np.array([comp.weight for comp in comps])
        cls = rng.choice(len(comps), size=n, p=w)
    else:
        labels = task.class_of(c)
        if labels.size != 1:
            raise ValueError("sample_data takes a single condition")
        cls = np.full(n, labels[0])
    x = _draw(task, which, cls, rng)
    return (x, cls) if return_labels else x


@dataclass(frozen=True)
class PreferenceTriple:
    c: np.ndarray
    x0_w: np.ndarray
    x0_l: np.ndarray


def _rows(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a if a.ndim == 2 else a.reshape(len(a), -1)


@dataclass(eq=False)
class Dataset:
    """Preference triples stored column-wise as three 2-D arrays."""

    fingerprint: bytes
    seed: int
    c: np.ndarray
    x_w: np.ndarray
    x_l: np.ndarray
    schema_version: int = DATASET_VERSION
    dim: int = field(init=False)
    cond_dim: int = field(init=False)

    def __post_init__(self):
        self.c, self.x_w, self.x_l = (_rows(a) for a in (self.c, self.x_w, self.x_l))
        self.cond_dim = self.c.shape[1]
        self.dim = self.x_w.shape[1]
        if not (len(self.c) == len(self.x_w) == len(self.x_l)) or self.x_l.shape[1] != self.dim:
            raise ValueError("dataset columns disagree in length or dimension")
        if not (np.all(np.isfinite(self.c)) and np.all(np.isfinite(self.x_w)) and np.all(np.isfinite(self.x_l))):
            raise ValueError("dataset contains non-finite values")

    def __eq__(self, other) -> bool:
        return isinstance(other, Dataset) and self.to_bytes() == other.to_bytes()

    @classmethod
    def empty(cls, task: TaskSpec, seed: int = 0) -> "Dataset":
        return cls(task.fingerprint(), seed, np.zeros((0, task.cond_dim)), np.zeros((0, task.dim)),
                   np.zeros((0, task.dim)))

    def __len__(self) -> int:
        return self.x_w.shape[0]

    def __getitem__(self, i) -> PreferenceTriple:
        return PreferenceTriple(self.c[i], self.x_w[i], self.x_l[i])

    @property
    def records(self) -> list[PreferenceTriple]:
        return [self[i] for i in range(len(self))]

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.fingerprint, self.seed, self.c[:n], self.x_w[:n], self.x_l[:n])

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(DATASET_MAGIC, self.schema_version, self.seed, self.dim, self.cond_dim,
                              len(self), self.fingerprint)
        body = np.concatenate([self.c, self.x_w, self.x_l], axis=1).astype("<f8").tobytes()
        payload = header + body
        return payload + struct.pack("<Q", crc64(payload))

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Dataset":
        if len(blob) < _HEADER.size + 8:
            raise IntegrityError("dataset file truncated: shorter than its header")
        magic, version, seed, dim, cond_dim, count, fp = _HEADER.unpack_from(blob)
        if magic != DATASET_MAGIC:
            raise IntegrityError("not a dataset file: bad magic")
        row = cond_dim + 2 * dim
        expected = _HEADER.size + 8 * row * count + 8
        if len(blob) < expected:
            raise IntegrityError(f"dataset file truncated: {len(blob)} of {expected} bytes")
        if len(blob) > expected:
            raise IntegrityError(f"dataset file has {len(blob) - expected} trailing bytes")
        (stored,) = struct.unpack_from("<Q", blob, expected - 8)
        if crc64(blob[: expected - 8]) != stored:
            raise IntegrityError("dataset checksum mismatch")
        if version != DATASET_VERSION:
            raise IntegrityError(f"unsupported dataset schema version {version}")
        data = np.frombuffer(blob, dtype="<f8", count=row * count, offset=_HEADER.size).reshape(count, row)
        data = data.astype(np.float64)
        return cls(fp, seed, data[:, :cond_dim], data[:, cond_dim:cond_dim + dim], data[:, cond_dim + dim:])


def save_dataset(dataset: Dataset, path) -> None:
    atomic_write(path, dataset.to_bytes())


def load_dataset(path) -> Dataset:
    return Dataset.from_bytes(Path(path).read_bytes())


def _hex_row(row) -> list[str]:
    return [np.float64(v).tobytes().hex() for v in row]


def _unhex_row(row) -> list[float]:
    return [float(np.frombuffer(bytes.fromhex(h), dtype="<f8")[0]) for h in row]


def export_json(dataset: Dataset) -> str:
    """Lossless JSON view; each f64 is its little-endian bytes in hex."""
    doc = {
        "schema_version": dataset.schema_version,
        "seed": dataset.seed,
        "fingerprint": dataset.fingerprint.hex(),
        "dim": dataset.dim,
        "cond_dim": dataset.cond_dim,
        "records": [
            {"c": _hex_row(dataset.c[i]), "x0_w": _hex_row(dataset.x_w[i]), "x0_l": _hex_row(dataset.x_l[i])}
            for i in range(len(dataset))
        ],
    }
    return json.dumps(doc, indent=1)


def import_json(text: str) -> Dataset:
    doc = json.loads(text)
    recs = doc["records"]
    dim, cond_dim = doc["dim"], doc["cond_dim"]
    c = np.array([_unhex_row(r["c"]) for r in recs]).reshape(len(recs), cond_dim)
    xw = np.array([_unhex_row(r["x0_w"]) for r in recs]).reshape(len(recs), dim)
    xl = np.array([_unhex_row(r["x0_l"]) for r in recs]).reshape(len(recs), dim)
    return Dataset(bytes.fromhex(doc["fingerprint"]), int(doc["seed"]), c, xw, xl, int(doc["schema_version"]))


# ---------------------------------------------------------------------------
# preference synthesis
# ---------------------------------------------------------------------------


def _generate_rejected(task, base_params, schedule, cls, seed) -> np.ndarray:
    out = np.empty((cls.size, task.dim))
    for k in range(task.cond_dim):
        idx = np.flatnonzero(cls == k)
        if idx.size == 0:
            continue
        try:
            out[idx] = ancestral_sample(base_params, schedule, task.one_hot(k), idx.size, seed + 7919 * k)
        except SamplerDivergence as exc:
            raise SamplerDivergence(exc.t, index=int(idx[0])) from exc
    return out


def synthesize_preferences(
    task: TaskSpec,
    base_params,
    n: int,
    seed: int,
    schedule: Schedule | None = None,
    filter_margin: float | None = 0.0,
    max_rounds: int = 200,
) -> Dataset:
    """Build ``n`` preference triples.

    Chosen samples come from the target mixture. Rejected samples are
    generations of ``base_params`` (needs ``schedule``) or, when
    ``base_params`` is None, draws from the base mixture. Pairs whose
    target log-density margin is not above ``filter_margin`` are redrawn;
    ``filter_margin=None`` keeps every pair.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if base_params is not None and schedule is None:
        raise ValueError("a schedule is required to sample rejected pairs from a model")
    root = np.random.SeedSequence(seed)
    c_rng = np.random.default_rng(root.spawn(1)[0])
    cls = c_rng.integers(task.cond_dim, size=n)
    x_w = np.empty((n, task.dim))
    x_l = np.empty((n, task.dim))
    todo = np.arange(n)
    for rnd in range(max_rounds):
        rng = np.random.default_rng([seed, rnd, 1])
        batch_cls = cls[todo]
        w = _draw(task, "target", batch_cls, rng)
        if base_params is None:
            lose = _draw(task, "base", batch_cls, rng)
        else:
            lose = _generate_rejected(task, base_params, schedule, batch_cls, int(rng.integers(2**31)))
        x_w[todo], x_l[todo] = w, lose
        if filter_margin is None:
            todo = todo[:0]
        else:
            margin = task.log_density("target", w, batch_cls) - task.log_density("target", lose, batch_cls)
            todo = todo[margin <= filter_margin]
        if todo.size == 0:
            break
    else:
        raise RuntimeError(f"could not fill {todo.size} preference pairs above margin {filter_margin}")
    return Dataset(task.fingerprint(), seed, task.one_hot(cls), x_w, x_l)
