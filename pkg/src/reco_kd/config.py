"""JSON run configuration: schema, validation, and object construction.

A config is one JSON object with optional sections; each command reads the
sections it needs. Validation walks a declarative table, rejects unknown keys,
and reports failures with dotted paths ("train.lr0"). CONFIG_SCHEMA is the
same table rendered as a JSON-Schema document, so the published schema cannot
drift from the validator.
"""

from __future__ import annotations

import json

from .errors import ConfigError
from .losses import DistillConfig
from .models import NetworkPlan, derive_student_plan
from .training import TrainConfig

_INT = ("integer", int)
_NUM = ("number", (int, float))
_STR = ("string", str)
_BOOL = ("boolean", bool)
_INTS = ("array[integer]", "ints")
_SPECS = ("array[object]", "specs")

# section -> key -> (schema type name, python check)
_SECTIONS = {
    "data": {
        "dir": _STR,
        "num_cases": _INT,
        "shape": _INTS,
        "class_specs": _SPECS,
        "noise_sigma": _NUM,
        "modalities": _INT,
        "seed": _INT,
    },
    "plan": {
        "channels": _INTS,
        "width_factor": _INT,
        "c_min": _INT,
        "residual_encoder": _BOOL,
        "input_modalities": _INT,
        "num_classes": _INT,
        "convs_per_stage": _INT,
        "strides": _INTS,
    },
    "student": {
        "width_factor": _INT,
        "c_min": _INT,
    },
    "train": {
        "epochs": _INT,
        "batch_size": _INT,
        "lr0": _NUM,
        "momentum": _NUM,
        "weight_decay": _NUM,
        "poly_power": _NUM,
        "seed": _INT,
        "patch_size": _INTS,
        "checkpoint_every": _INT,
        "clip_norm": _NUM,
    },
    "distill": {
        "temperature": _NUM,
        "gamma": _NUM,
        "lam": _NUM,
        "stages": _INTS,
        "ca_stages": _INTS,
        "sard_fg": _BOOL,
        "sard_bg": _BOOL,
        "mask_align": _BOOL,
        "msca": _BOOL,
        "split_region_sum": _BOOL,
    },
    "ablate": {
        "matrix": ("array[object]", "matrix"),
    },
}

_TOP_STRINGS = {"teacher_checkpoint": _STR, "checkpoint": _STR}

_SPEC_KEYS = {"target_fraction": _NUM, "shape_kind": _STR}


def _render_type(entry) -> dict:
    name = entry[0]
    if name.startswith("array["):
        inner = name[len("array[") : -1]
        if inner == "object":
            return {"type": "array", "items": {"type": "object"}}
        return {"type": "array", "items": {"type": inner}}
    return {"type": name}


def _build_schema() -> dict:
    props = {}
    for section, keys in _SECTIONS.items():
        props[section] = {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: _render_type(t) for k, t in keys.items()},
        }
    props["data"]["properties"]["class_specs"]["items"] = {
        "type": "object",
        "additionalProperties": False,
        "properties": {k: _render_type(t) for k, t in _SPEC_KEYS.items()},
        "required": ["target_fraction"],
    }
    props["ablate"]["properties"]["matrix"]["items"] = dict(props["distill"])
    for key, entry in _TOP_STRINGS.items():
        props[key] = _render_type(entry)
    return {
        "$schema": "http://json-schema.org/draft-07/schema#",
        "title": "reco-kd run configuration",
        "type": "object",
        "additionalProperties": False,
        "properties": props,
    }


CONFIG_SCHEMA = _build_schema()


def _check_value(path: str, value, entry) -> None:
    name, check = entry
    if check == "ints":
        ok = isinstance(value, list) and all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        )
        if not ok:
            raise ConfigError(f"expected a list of integers, got {value!r}", path=path)
        return
    if check in ("specs", "matrix"):
        if not isinstance(value, list) or not all(isinstance(v, dict) for v in value):
            raise ConfigError(f"expected a list of objects, got {value!r}", path=path)
        table = _SPEC_KEYS if check == "specs" else _SECTIONS["distill"]
        for i, item in enumerate(value):
            _check_section(f"{path}[{i}]", item, table)
            if check == "specs" and "target_fraction" not in item:
                raise ConfigError("missing target_fraction", path=f"{path}[{i}]")
        return
    if isinstance(value, bool) and check is not bool:
        raise ConfigError(f"expected {name}, got boolean {value!r}", path=path)
    if not isinstance(value, check):
        raise ConfigError(f"expected {name}, got {value!r}", path=path)


def _check_section(prefix: str, section: dict, table: dict) -> None:
    for key, value in section.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in table:
            raise ConfigError(f"unknown key (known: {', '.join(sorted(table))})", path=path)
        _check_value(path, value, table[key])


def validate_config(config) -> dict:
    """Type-check a raw config dict; unknown keys are errors.

    Value-range rules live with the objects built from each section, so this
    pass is purely structural. Returns the config unchanged.
    """
    if not isinstance(config, dict):
        raise ConfigError(f"config must be a JSON object, got {type(config).__name__}", path="")
    for key, value in config.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section must be an object, got {value!r}", path=key)
            _check_section(key, value, _SECTIONS[key])
        elif key in _TOP_STRINGS:
            _check_value(key, value, _TOP_STRINGS[key])
        else:
            known = sorted(list(_SECTIONS) + list(_TOP_STRINGS))
            raise ConfigError(f"unknown key (known: {', '.join(known)})", path=key)
    data = config.get("data", {})
    if "dir" in data:
        others = sorted(set(data) - {"dir"})
        if others:
            raise ConfigError(
                f"dir-based data takes no synthesis keys, got {', '.join(others)}",
                path="data",
            )
    return config


def load_config(path) -> dict:
    """Read and validate a config file; manifests reload through their snapshot."""
    try:
        with open(path) as fh:
            blob = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}", path="") from exc
    if isinstance(blob, dict) and "command" in blob and "config" in blob:
        blob = blob["config"]  # a RunManifest: rerun from its snapshot
    return validate_config(blob)


def _parse_override_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text  # bare strings need no quoting on the command line


def apply_overrides(config: dict, overrides) -> dict:
    """Apply key=value entries at dotted paths, then revalidate."""
    out = json.loads(json.dumps(config))  # deep copy, JSON types only
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value", path="")
        dotted, _, raw = item.partition("=")
        keys = dotted.split(".")
        node = out
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError("path crosses a non-object value", path=dotted)
        node[keys[-1]] = _parse_override_value(raw)
    return validate_config(out)


# -- section constructors --


def build_plan(config: dict) -> NetworkPlan:
    section = dict(config.get("plan", {}))
    if "channels" in section:
        section["channels"] = tuple(section["channels"])
    if "strides" in section:
        section["strides"] = tuple(section["strides"])
    try:
        return NetworkPlan(**section)
    except TypeError as exc:
        raise ConfigError(str(exc), path="plan") from exc


def build_student_plan(config: dict, teacher_plan: NetworkPlan) -> NetworkPlan:
    section = config.get("student", {})
    return derive_student_plan(
        teacher_plan,
        section.get("width_factor", 1),
        c_min=section.get("c_min"),
    )


def build_train_config(config: dict, seed=None) -> TrainConfig:
    section = dict(config.get("train", {}))
    if seed is not None:
        section["seed"] = int(seed)
    if "patch_size" in section:
        section["patch_size"] = tuple(section["patch_size"])
    return TrainConfig(**section)


def build_distill_config(section: dict) -> DistillConfig:
    section = dict(section)
    if "stages" in section:
        section["stages"] = tuple(section["stages"])
    if "ca_stages" in section:
        section["ca_stages"] = tuple(section["ca_stages"])
    return DistillConfig(**section)
