"""JSON run configuration shared by every subcommand.

A run config is one document with a top-level ``seed`` and the sections
``data``, ``model``, ``pretrain``, ``finetune``, ``eval`` and ``attn``. Files
are merged over :data:`DEFAULTS`; unknown keys are errors. ``SBSSL_SEED``
overrides the file's seed, and command-line flags override both.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, fields

from .corruption import CorruptionSpec
from .data import AugmentConfig, SynthSpec
from .encoder import EncoderConfig, preset_fields
from .finetune import FinetuneConfig
from .pretrain import PretrainConfig

SEED_ENV = "SBSSL_SEED"


class ConfigError(ValueError):
    pass


def _dataclass_defaults(cls, drop=()):
    return {f.name: copy.deepcopy(getattr(cls(), f.name)) for f in fields(cls) if f.name not in drop}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


DEFAULTS = _jsonable({
    "seed": 0,
    "data": {
        "root": "data",
        "plane": "sagittal",
        "train_split": "train",
        "valid_split": "valid",
        "synth": _dataclass_defaults(SynthSpec, drop=("seed",)),
    },
    "model": {"preset": None, **_dataclass_defaults(EncoderConfig)},
    "pretrain": {
        **_dataclass_defaults(PretrainConfig, drop=("seed", "corruption", "augment")),
        "corruption": _dataclass_defaults(CorruptionSpec, drop=("seed",)),
        "augment": _dataclass_defaults(AugmentConfig),
        "out": "runs/pretrain",
        "resume": None,
        "checkpoint_every": 10,
        "triptych_every": 10,
        "triptych_count": 4,
    },
    "finetune": {
        **_dataclass_defaults(FinetuneConfig, drop=("seed", "augment", "member")),
        "augment": _dataclass_defaults(AugmentConfig),
        "checkpoint": None,
        "scratch": False,
        "ensemble": 5,
        "out": "runs/finetune",
    },
    "eval": {"models": [], "split": "valid", "threshold": 0.5, "out": "runs/eval"},
    "attn": {
        "model": None, "split": "valid", "exam": None, "slice": None, "mid": False,
        "layer": None, "alpha": 0.5, "out": "runs/attn",
    },
})

# keys whose value may be any JSON type (default is None or a free-form list)
_FREE = {("pretrain", "blocks"), ("pretrain", "resume"), ("pretrain", "slices_per_exam"),
         ("model", "preset"), ("finetune", "checkpoint"), ("eval", "models"),
         ("attn", "model"), ("attn", "exam"), ("attn", "slice"), ("attn", "layer")}


def _check_type(path, default, value):
    if tuple(path[-2:]) in _FREE or default is None:
        return
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, (int, float)):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok and isinstance(default, int) and not isinstance(value, int):
            ok = float(value).is_integer()
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list) and len(value) == len(default)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{'.'.join(path)}: expected {type(default).__name__} like {default!r}, got {value!r}")


def merge(base, update, path=()):
    """Recursively overlay ``update`` on ``base``; unknown keys raise ConfigError."""
    if not isinstance(update, dict):
        raise ConfigError(f"{'.'.join(path) or 'config'} must be an object")
    out = copy.deepcopy(base)
    for key, value in update.items():
        here = path + (key,)
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(here)!r}")
        if isinstance(base[key], dict):
            out[key] = merge(base[key], value, here)
        else:
            _check_type(here, base[key], value)
            out[key] = value
    return out


def _apply_preset(cfg, user):
    name = cfg["model"]["preset"]
    if name is None:
        return cfg
    try:
        fixed = preset_fields(name)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from None
    explicit = set((user.get("model") or {}).keys())
    cfg["model"].update({k: v for k, v in fixed.items() if k not in explicit})
    return cfg


def resolve(user=None, overrides=(), env=None):
    """Defaults <- user document <- $SBSSL_SEED <- ``overrides`` (``(dotted.key, value)`` pairs)."""
    user = user or {}
    cfg = _apply_preset(merge(DEFAULTS, user), user)
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "") != "":
        try:
            cfg["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    for key, value in overrides:
        cfg = merge(cfg, _nest(key.split("."), value))
    validate(cfg)
    return cfg


def _nest(parts, value):
    return {parts[0]: value} if len(parts) == 1 else {parts[0]: _nest(parts[1:], value)}


def parse_override(text):
    """``section.key=value`` with the value read as JSON when it parses, else as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None


def dump(cfg, path):
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def validate(cfg):
    """Build every section once so value errors surface as ConfigError before any work starts."""
    try:
        encoder_config(cfg)
        synth_spec(cfg)
        pretrain_config(cfg)
        finetune_config(cfg)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


# -- section builders ---------------------------------------------------------

def _augment(d):
    d = dict(d)
    for k in ("crop_scale", "blur_sigma", "sharpness_range", "contrast_range"):
        d[k] = tuple(d[k])
    return AugmentConfig(**d)


def encoder_config(cfg):
    m = {k: v for k, v in cfg["model"].items() if k != "preset"}
    return EncoderConfig(**m)


def synth_spec(cfg):
    return SynthSpec(**cfg["data"]["synth"], seed=cfg["seed"])


def pretrain_config(cfg):
    p = cfg["pretrain"]
    own = {f.name for f in fields(PretrainConfig)} - {"seed", "corruption", "augment"}
    kw = {k: p[k] for k in own}
    if kw["blocks"] is not None:
        kw["blocks"] = tuple(kw["blocks"])
    return PretrainConfig(**kw, corruption=CorruptionSpec(**p["corruption"]),
                          augment=_augment(p["augment"]), seed=cfg["seed"])


def finetune_config(cfg, member=0):
    f = cfg["finetune"]
    own = {x.name for x in fields(FinetuneConfig)} - {"seed", "augment", "member"}
    return FinetuneConfig(**{k: f[k] for k in own}, augment=_augment(f["augment"]),
                          seed=cfg["seed"], member=member)


def to_dict(obj):
    return _jsonable(asdict(obj))
