"""JSON run configuration: defaults, strict validation, dotted overrides.

The default config document doubles as the schema: unknown keys anywhere
are rejected, missing keys inherit defaults.  Every document carries a
required "version" field so stale configs fail loudly.
"""

from __future__ import annotations

import copy
import json

CONFIG_VERSION = 1


class ConfigError(Exception):
    pass


def default_config() -> dict:
    return {
        "version": CONFIG_VERSION,
        "seed": 0,
        "workers": 1,
        "paths": {
            "corpus_dir": "corpus",
            "checkpoint_dir": "checkpoints",
            "output_dir": "out",
        },
        "data": {
            "n_volumes": 12,
            "shapes": [[32, 32, 32], [64, 64, 32]],
            "spacings": [[1.0, 1.0, 1.0], [1.0, 1.0, 2.0], [0.8, 0.8, 1.5]],
            "snap_base": 8,
            "lesion_fraction": 0.5,
        },
        "codec": {
            "spatial_factor": 4,
            "channels": 4,
            "hidden": [8, 16],
            "epochs": 30,
            "lr": 1e-3,
        },
        "model": {
            "levels": 2,
            "base_channels": 16,
            "d_t": 8,
            "d_s": 8,
            "vocab_size": 6,
        },
        "trainer": {
            "stages": [
                {"stage": "pretrain", "epochs": 40, "lr": 1e-3, "power": 1.0},
                {"stage": "main", "epochs": 30, "lr": 1e-3, "power": 1.0},
                {"stage": "finetune", "epochs": 10, "lr": 1e-4, "power": 1.0},
            ],
            "capacity": {"8x8x8": 16, "16x16x8": 4, "32x32x32": 1},
            "controlnet": {"epochs": 40, "lr": 5e-4, "roi_weight": 100.0},
        },
        "contrast": {
            "delta": 2.0,
            "dilation_radius": 1,
            "mode": "full_output",
            "auto_voxel_threshold": 4096,
            "lambda_early": 0.01,
            "lambda_late": 0.001,
        },
        "quality": {
            "tracked_labels": [1, 2, 3, 4, 5],
            "min_voxels": 8,
        },
        "fid": {
            "extractor": "random_conv",
            "feature_dim": 64,
            "extractor_seed": 0,
            "fraction": 0.5,
        },
        "sample": {
            "steps": 30,
            "count": 6,
        },
    }


# sections whose keys are data, not schema, so unknown keys are fine there
_OPEN_DICTS = {("trainer", "capacity")}
# list-of-dict entries validated against a fixed key set
_STAGE_KEYS = {"stage", "epochs", "lr", "power"}


def _check_keys(cfg, ref, path=()):
    if isinstance(ref, dict):
        if not isinstance(cfg, dict):
            raise ConfigError(f"config key {'.'.join(path) or '<root>'} must be a mapping")
        if path in _OPEN_DICTS:
            return
        unknown = sorted(set(cfg) - set(ref))
        if unknown:
            where = ".".join(path) or "<root>"
            raise ConfigError(f"unknown config keys under {where}: {unknown}")
        for key, val in cfg.items():
            _check_keys(val, ref[key], path + (key,))
    elif path == ("trainer", "stages"):
        for i, stage in enumerate(cfg):
            unknown = sorted(set(stage) - _STAGE_KEYS)
            if unknown:
                raise ConfigError(f"unknown keys in trainer.stages[{i}]: {unknown}")


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_types(val, ref, path=()):
    """Values must match the default document's types (int may widen to float)."""
    where = ".".join(path) or "<root>"
    if path == ("trainer", "stages"):
        if not isinstance(val, list):
            raise ConfigError(f"{where} must be a list of stage mappings")
        for i, stage in enumerate(val):
            if not isinstance(stage, dict):
                raise ConfigError(f"{where}[{i}] must be a mapping")
            if "stage" in stage and not isinstance(stage["stage"], str):
                raise ConfigError(f"{where}[{i}].stage must be a string")
            if "epochs" in stage and not _is_int(stage["epochs"]):
                raise ConfigError(f"{where}[{i}].epochs must be an integer")
            for key in ("lr", "power"):
                if key in stage and not _is_num(stage[key]):
                    raise ConfigError(f"{where}[{i}].{key} must be a number")
        return
    if path in _OPEN_DICTS:
        if not isinstance(val, dict):
            raise ConfigError(f"{where} must be a mapping")
        for k, v in val.items():
            if not _is_int(v):
                raise ConfigError(f"{where}.{k} must be an integer, got {v!r}")
        return
    if isinstance(ref, dict):
        for k in ref:
            if isinstance(val, dict) and k in val:
                _check_types(val[k], ref[k], path + (k,))
    elif _is_int(ref):
        if not _is_int(val):
            raise ConfigError(f"{where} must be an integer, got {val!r}")
    elif isinstance(ref, float):
        if not _is_num(val):
            raise ConfigError(f"{where} must be a number, got {val!r}")
    elif isinstance(ref, str):
        if not isinstance(val, str):
            raise ConfigError(f"{where} must be a string, got {val!r}")
    elif isinstance(ref, list):
        if not isinstance(val, list):
            raise ConfigError(f"{where} must be a list, got {val!r}")
        if ref:
            for i, item in enumerate(val):
                _check_types(item, ref[0], path + (str(i),))


def _merge_defaults(cfg: dict, ref: dict, path=()) -> dict:
    out = {}
    for key, ref_val in ref.items():
        if key not in cfg:
            out[key] = copy.deepcopy(ref_val)
        elif isinstance(ref_val, dict) and path + (key,) not in _OPEN_DICTS:
            out[key] = _merge_defaults(cfg[key], ref_val, path + (key,))
        else:
            out[key] = copy.deepcopy(cfg[key])
    return out


def validate_config(cfg: dict) -> dict:
    """Reject unknown keys, require the version field, fill in defaults."""
    if not isinstance(cfg, dict):
        raise ConfigError("config document must be a JSON object")
    if "version" not in cfg:
        raise ConfigError('config document missing required "version" field')
    if cfg["version"] != CONFIG_VERSION:
        raise ConfigError(f"config version {cfg['version']} unsupported (expected {CONFIG_VERSION})")
    ref = default_config()
    _check_keys(cfg, ref)
    merged = _merge_defaults(cfg, ref)
    _check_types(merged, ref)
    if merged["sample"]["steps"] < 1:
        raise ConfigError("sample.steps must be >= 1")
    if merged["seed"] < 0:
        raise ConfigError("seed must be >= 0")
    if merged["workers"] < 1:
        raise ConfigError("workers must be >= 1")
    for key in merged["trainer"]["capacity"]:
        parts = key.split("x")
        if len(parts) != 3 or not all(p.isdigit() and int(p) > 0 for p in parts):
            raise ConfigError(f'trainer.capacity key {key!r} must look like "DxHxW"')
    return merged


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return validate_config(doc)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply repeatable --set dotted.path=value flags onto a validated config."""
    out = copy.deepcopy(cfg)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like dotted.path=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        node = out
        for k in keys[:-1]:
            if isinstance(node, list):
                node = node[int(k)]
            elif isinstance(node, dict) and k in node:
                node = node[k]
            else:
                raise ConfigError(f"override path {dotted!r}: no such key {k!r}")
        leaf = keys[-1]
        if isinstance(node, list):
            node[int(leaf)] = _parse_value(raw)
        elif isinstance(node, dict) and (leaf in node or _path_is_open(keys[:-1])):
            node[leaf] = _parse_value(raw)
        else:
            raise ConfigError(f"override path {dotted!r}: no such key {leaf!r}")
    return validate_config(out)


def _path_is_open(parts) -> bool:
    return tuple(parts) in _OPEN_DICTS


def capacity_table_from_config(cfg: dict) -> dict:
    return {tuple(int(p) for p in key.split("x")): int(v)
            for key, v in cfg["trainer"]["capacity"].items()}


def echo_config(cfg: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
