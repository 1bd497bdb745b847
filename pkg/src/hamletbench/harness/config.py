"""Experiment configuration: JSON schema validation and fingerprinting.

Unknown keys are rejected so config typos fail before any compute is spent.
"""

from __future__ import annotations

import hashlib
import json

import jsonschema

from ..env.tasks import TASK_IDS
from ..policy import MODES

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "task": {"enum": list(TASK_IDS)},
        "tasks": {"type": "array", "items": {"enum": list(TASK_IDS)}, "minItems": 1},
        "mode": {"enum": list(MODES)},
        "seed": {"type": "integer", "minimum": 0},
        "n_demos": {"type": "integer", "minimum": 1},
        "eval_episodes": {"type": "integer", "minimum": 1},
        "horizon": {"type": "integer", "minimum": 1},
        "k": {"type": "integer", "minimum": 1},
        "n_m": {"type": "integer", "minimum": 1},
        "history": {"type": "integer", "minimum": 1},
        "mem_layers": {"type": "integer", "minimum": 1},
        "d_model": {"type": "integer", "minimum": 8},
        "heads": {"type": "integer", "minimum": 1},
        "layers": {"type": "integer", "minimum": 1},
        "ff": {"type": "integer", "minimum": 8},
        "steps": {"type": "integer", "minimum": 0},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "batch": {"type": "integer", "minimum": 1},
        "tau": {"type": "number", "exclusiveMinimum": 0},
        "freeze_backbone": {"type": "boolean"},
        "freeze_moment_tokens": {"type": "boolean"},
        "use_tcl_init": {"type": "boolean"},
        "tcl_steps": {"type": "integer", "minimum": 0},
        "tcl_batch": {"type": "integer", "minimum": 1},
        "demos": {"type": "string"},
        "heldout_demos": {"type": "string"},
        "checkpoint": {"type": "string"},
        "source_checkpoint": {"type": "string"},
        "out": {"type": "string"},
        "report": {"type": "string"},
        "t_values": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "n_timesteps": {"type": "integer", "minimum": 1},
        "profile_batch": {"type": "integer", "minimum": 1},
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_m": {"type": "array", "items": {"enum": [1, 2, 4, 8, 16]}},
                "use_tcl_init": {"type": "array", "items": {"type": "boolean"}},
                "memory": {"type": "array",
                           "items": {"enum": ["none", "concat", "rnn", "lstm",
                                              "gru", "transformer"]}},
                "history": {"type": "array", "items": {"enum": [2, 4, 8]}},
            },
        },
    },
}


class ConfigError(ValueError):
    pass


def validate_config(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load_config(path) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return validate_config(json.load(f))


def fingerprint(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
