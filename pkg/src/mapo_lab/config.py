"""Experiment configuration: one JSON document, a published schema, dotted overrides.

A user config needs only ``task.preset``; everything else is filled from
:data:`DEFAULTS`. Seeds derive from the top-level ``seed``: model init,
pretraining and alignment use it directly, preference synthesis uses
``seed + data.seed_offset`` and evaluation uses ``eval.seed``.
"""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path

import jsonschema

from .objectives import ObjectiveConfig
from .tasks import PRESET_BETAS, PRESETS, preset
from .train import AdamConfig, TrainConfig

__all__ = [
    "ConfigError",
    "DEFAULTS",
    "SCHEMA",
    "apply_override",
    "effective_beta",
    "load_config",
    "objective_config",
    "pretrain_config",
    "resolve_config",
    "shipped_presets",
    "task_from_config",
    "train_config",
]

TASK_NAMES = sorted(PRESETS) + ["custom", "gaussian"]
OBJECTIVES = ["mapo", "dpo", "sft"]
SWEEP_AXES = ["objective", "beta", "mismatch_level", "dataset_size", "seed"]


class ConfigError(ValueError):
    """Config document fails validation; ``path`` names the offending field."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}


def _obj(props: dict, required=None) -> dict:
    return {
        "type": "object",
        "properties": props,
        "required": list(props) if required is None else required,
        "additionalProperties": False,
    }


SCHEMA = _obj({
    "task": _obj({
        "preset": {"enum": TASK_NAMES},
        "mismatch_level": {"type": ["number", "null"], "minimum": 0},
    }),
    "seed": _nonneg_int,
    "model": _obj({
        "hidden": {"type": "array", "items": _pos_int, "minItems": 1},
        "emb_dim": {"type": "integer", "minimum": 2, "multipleOf": 2},
    }),
    "schedule": _obj({
        "kind": {"enum": ["cosine", "linear"]},
        "T": {"type": "integer", "minimum": 2},
    }),
    "pretrain": _obj({
        "n": _pos_int,
        "steps": _pos_int,
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "batch_size": _pos_int,
    }),
    "data": _obj({
        "n": _pos_int,
        "seed_offset": _nonneg_int,
        "filter_margin": {"type": ["number", "null"]},
        "rejected": {"enum": ["model", "mixture"]},
    }),
    "train": _obj({
        "objective": {"enum": OBJECTIVES},
        "beta": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "beta_dpo": {"type": "number", "exclusiveMinimum": 0},
        "share_noise": {"type": "boolean"},
        "steps": _pos_int,
        "batch_size": _pos_int,
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "min_lr_frac": {"type": "number", "minimum": 0, "maximum": 1},
        "adam": _obj({
            "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "eps": {"type": "number", "exclusiveMinimum": 0},
            "weight_decay": {"type": "number", "minimum": 0},
        }),
        "clip_grad": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "eval_every": _nonneg_int,
    }),
    "eval": _obj({"n": {"type": "integer", "minimum": 64}, "seed": _nonneg_int}),
    "sweep": _obj({
        "axes": {
            "type": "object",
            "propertyNames": {"enum": SWEEP_AXES},
            "properties": {
                "objective": {"type": "array", "items": {"enum": OBJECTIVES}, "minItems": 1},
                "beta": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
                "mismatch_level": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                "dataset_size": {"type": "array", "items": _pos_int, "minItems": 1},
                "seed": {"type": "array", "items": _nonneg_int, "minItems": 1},
            },
        },
    }),
})

# what a user document must contain before defaults are merged in
USER_SCHEMA = {
    "type": "object",
    "required": ["task"],
    "properties": {"task": {"type": "object", "required": ["preset"]}},
}

DEFAULTS: dict = {
    "task": {"preset": "style", "mismatch_level": None},
    "seed": 0,
    "model": {"hidden": [64, 64], "emb_dim": 8},
    "schedule": {"kind": "cosine", "T": 64},
    "pretrain": {"n": 8192, "steps": 3000, "lr": 2e-3, "batch_size": 64},
    "data": {"n": 2048, "seed_offset": 100, "filter_margin": 0.0, "rejected": "model"},
    "train": {
        "objective": "mapo",
        "beta": None,
        "beta_dpo": 500.0,
        "share_noise": True,
        "steps": 2000,
        "batch_size": 64,
        "lr": 1e-3,
        "min_lr_frac": 0.1,
        "adam": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "weight_decay": 0.0},
        "clip_grad": None,
        "eval_every": 0,
    },
    "eval": {"n": 512, "seed": 7},
    "sweep": {"axes": {}},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "axes":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _error_path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "required":
        missing = err.message.split("'")[1]
        parts.append(missing)
    elif err.validator == "additionalProperties":
        extra = err.message.split("'")[1]
        parts.append(extra)
    return ".".join(parts) or "<root>"


def _validate(doc: dict, schema: dict) -> None:
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(e.absolute_path), e.message))
    if errors:
        err = errors[0]
        raise ConfigError(err.message, _error_path(err))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except ValueError:
        return text


def apply_override(doc: dict, assignment: str) -> dict:
    """Apply ``a.b.c=value`` to a copy of ``doc``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form path=value")
    path, text = assignment.split("=", 1)
    keys = path.strip().split(".")
    if not all(keys):
        raise ConfigError(f"empty key in override path {path!r}")
    out = copy.deepcopy(doc)
    node = out
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = _parse_value(text)
    return out


def resolve_config(user: dict, overrides=()) -> dict:
    """Validate ``user``, apply overrides, merge defaults and validate the result."""
    if not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    for assignment in overrides:
        user = apply_override(user, assignment)
    _validate(user, USER_SCHEMA)
    resolved = _merge(DEFAULTS, user)
    _validate(resolved, SCHEMA)
    return resolved


def shipped_presets() -> list[str]:
    root = resources.files("mapo_lab") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_config(path, overrides=()) -> dict:
    """Read a config file; ``preset:<name>`` selects a config shipped with the package."""
    path = str(path)
    if path.startswith("preset:"):
        name = path[len("preset:"):]
        if name not in shipped_presets():
            raise ConfigError(f"no shipped preset {name!r}; choose from {shipped_presets()}")
        text = (resources.files("mapo_lab") / "presets" / f"{name}.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        user = json.loads(text)
    except ValueError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    return resolve_config(user, overrides)


def task_from_config(cfg: dict, mismatch_level: float | None = None):
    level = cfg["task"]["mismatch_level"] if mismatch_level is None else mismatch_level
    return preset(cfg["task"]["preset"], level)


def effective_beta(cfg: dict) -> float:
    beta = cfg["train"]["beta"]
    if beta is None:
        return PRESET_BETAS.get(cfg["task"]["preset"], ObjectiveConfig.beta)
    return float(beta)


def objective_config(cfg: dict, kind: str | None = None, beta: float | None = None) -> ObjectiveConfig:
    t = cfg["train"]
    return ObjectiveConfig(
        kind=kind or t["objective"],
        beta=float(beta) if beta is not None else effective_beta(cfg),
        beta_dpo=float(t["beta_dpo"]),
        share_noise=bool(t["share_noise"]),
    )


def train_config(cfg: dict, objective: ObjectiveConfig, seed: int | None = None) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        objective=objective,
        steps=t["steps"],
        batch_size=t["batch_size"],
        lr=float(t["lr"]),
        adam=AdamConfig(**{k: float(v) for k, v in t["adam"].items()}),
        seed=cfg["seed"] if seed is None else seed,
        eval_every=t["eval_every"],
        eval_n=cfg["eval"]["n"],
        min_lr_frac=float(t["min_lr_frac"]),
        clip_grad=None if t["clip_grad"] is None else float(t["clip_grad"]),
        schedule=cfg["schedule"]["kind"],
        T=cfg["schedule"]["T"],
    )


def pretrain_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    p = cfg["pretrain"]
    return TrainConfig(
        objective=ObjectiveConfig("sft"),
        steps=p["steps"],
        batch_size=p["batch_size"],
        lr=float(p["lr"]),
        seed=cfg["seed"] if seed is None else seed,
        schedule=cfg["schedule"]["kind"],
        T=cfg["schedule"]["T"],
    )
