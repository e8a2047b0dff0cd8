"""Experiment configuration: JSON schema, defaults, overrides.

A config file is one flat JSON object.  Environment and learner settings sit
at the top level next to ``algo``/``team``/``episodes``; an optional
``compare`` object turns the file into a comparison matrix.  Unknown keys are
rejected.
"""

from __future__ import annotations

import json
from dataclasses import fields, replace
from pathlib import Path

import jsonschema

from .agent import HyperParams
from .errors import CedqnError, ConfigError, IOFailure
from .gridworld import EnvConfig
from .training import ALGOS, ComparisonMatrix, RunConfig, TeamSpec, env_for_team

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}
_prob = {"type": "number", "minimum": 0, "maximum": 1}

ENV_KEYS = ("task_size", "grid_width", "grid_height", "max_active_boxes", "box_weight_range",
            "max_steps_per_episode", "step_penalty", "lift_reward", "main_task_bonus")
HYPER_KEYS = tuple(f.name for f in fields(HyperParams))

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "cedqn experiment config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "algo": {"enum": list(ALGOS)},
        "team": {
            "oneOf": [
                {"type": "integer", "enum": [1, 2, 3, 4]},
                {"type": "object", "additionalProperties": False,
                 "required": ["standard", "disturbance"],
                 "properties": {"standard": {"type": "integer", "minimum": 0},
                                "disturbance": {"type": "integer", "minimum": 0}}},
            ]
        },
        "episodes": _pos_int,
        "seed": {"type": "integer", "minimum": 0},
        "eval_epsilon": _prob,
        "eval_trials": _pos_int,
        # environment
        "task_size": _pos_int,
        "grid_width": _pos_int,
        "grid_height": _pos_int,
        "max_active_boxes": _pos_int,
        "box_weight_range": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                             "minItems": 2, "maxItems": 2},
        "max_steps_per_episode": {"type": ["integer", "null"], "minimum": 1},
        "step_penalty": _num,
        "lift_reward": _num,
        "main_task_bonus": _num,
        # learner
        "gamma": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "epsilon_start": _prob,
        "epsilon_end": _prob,
        "epsilon_decay_steps": {"type": "integer", "minimum": 0},
        "batch_size": _pos_int,
        "buffer_capacity": _pos_int,
        "target_sync_interval": _pos_int,
        "q_lr": {"type": "number", "exclusiveMinimum": 0},
        "comm_lr": {"type": "number", "exclusiveMinimum": 0},
        "comm_threshold": _num,
        "q_hidden": {"type": "array", "items": _pos_int, "minItems": 1},
        "comm_hidden": {"type": "array", "items": _pos_int, "minItems": 1},
        "baseline_decay": _prob,
        "clip_norm": {"type": "number", "exclusiveMinimum": 0},
        "compare": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "algos": {"type": "array", "items": {"enum": list(ALGOS)}, "minItems": 1},
                "teams": {"type": "array", "items": {"enum": [1, 2, 3, 4]}, "minItems": 1},
                "task_sizes": {"type": "array", "items": _pos_int, "minItems": 1},
                "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0},
                          "minItems": 1},
                "trials": _pos_int,
            },
        },
    },
}

_VALIDATOR = jsonschema.Draft202012Validator(SCHEMA)


def _field_name(error):
    return ".".join(str(p) for p in error.absolute_path) or "<root>"


def validate(data):
    """Raise :class:`ConfigError` naming the first offending field."""
    errors = sorted(_VALIDATOR.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise ConfigError(f"config field '{_field_name(err)}': {err.message}")


def team_from_json(value):
    if isinstance(value, dict):
        return TeamSpec.from_counts(value["standard"], value["disturbance"])
    return TeamSpec.from_id(value)


def build(data, overrides=None):
    """Validated dict (plus CLI overrides) -> ``RunConfig`` or ``ComparisonMatrix``."""
    data = dict(data)
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    validate(data)
    team = team_from_json(data.get("team", 1))
    env_kwargs = {k: data[k] for k in ENV_KEYS if k in data}
    if "box_weight_range" in env_kwargs:
        env_kwargs["box_weight_range"] = tuple(env_kwargs["box_weight_range"])
    hyper_kwargs = {k: data[k] for k in HYPER_KEYS if k in data}
    try:
        env = EnvConfig(capacities=team.capacities(), seed=data.get("seed", 0), **env_kwargs)
        hyper = HyperParams(**hyper_kwargs)
        run = RunConfig(algo=data.get("algo", "cedqn"), team=team, env=env, hyper=hyper,
                        episodes=data.get("episodes", 3000), seed=data.get("seed", 0),
                        eval_epsilon=data.get("eval_epsilon", 0.05),
                        eval_trials=data.get("eval_trials", 10))
    except CedqnError as exc:
        raise ConfigError(str(exc)) from None
    if "compare" not in data:
        return run
    c = data["compare"]
    return ComparisonMatrix(
        base=run,
        algos=tuple(c.get("algos", ALGOS)),
        teams=tuple(c.get("teams", (1, 2, 3, 4))),
        task_sizes=tuple(c.get("task_sizes", (20, 40, 60, 80, 100))),
        seeds=tuple(c.get("seeds", (0, 1, 2, 3, 4))),
        trials=c.get("trials", run.eval_trials),
    )


def load_config(path, overrides=None):
    path = Path(path)
    if not path.is_file():
        raise IOFailure(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return build(data, overrides)


def resolved_dict(config):
    """Full provenance of a resolved config, defaults included."""
    if isinstance(config, ComparisonMatrix):
        return {"compare": {"algos": list(config.algos), "teams": list(config.teams),
                            "task_sizes": list(config.task_sizes), "seeds": list(config.seeds),
                            "trials": config.trials},
                "base": config.base.to_dict()}
    return config.to_dict()


def with_task_size(config, task_size):
    return replace(config, env=env_for_team(config.env, config.team, task_size))


def schema_json():
    return json.dumps(SCHEMA, indent=2)
