"""Experiment configuration: one file with sections mirroring the module
configs, loadable from INI (key = value sections) or JSON. Run manifests
are the JSON form of a fully resolved config, so any manifest can be fed
back through --config to reproduce its run.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

from .consistency import ConsistencyWeights
from .detector import DetectorConfig
from .perturb import PerturbConfig
from .scenes import SceneSpec
from .trainer import TrainerConfig


class ConfigError(ValueError):
    """Invalid configuration file or option combination."""


PERTURBATION_FLAGS = {
    "flip-x": "enable_flip_x",
    "flip-y": "enable_flip_y",
    "rotation": "enable_rotation",
    "scaling": "enable_scaling",
    "subsample-independence": "independent_subsample",
}

CONSISTENCY_FLAGS = {
    "center": "lambda_center",
    "class": "lambda_class",
    "size": "lambda_size",
}


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    consistency: ConsistencyWeights = field(default_factory=ConsistencyWeights)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    train_scenes: int = 200
    val_scenes: int = 60
    dataset_seed: int = 7
    ratio: float = 0.1
    ratios: tuple = (0.1, 0.3, 1.0)
    seeds: tuple = (0, 1, 2)
    mode: str = "sess"

    def __post_init__(self):
        for r in (self.ratio, *self.ratios):
            if not 0.0 < r <= 1.0:
                raise ConfigError(f"label ratio {r} outside (0, 1]")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.mode not in ("sess", "baseline"):
            raise ConfigError(f"unknown mode {self.mode!r}")


_SECTIONS = {
    "scene": SceneSpec,
    "detector": DetectorConfig,
    "perturb": PerturbConfig,
    "consistency": ConsistencyWeights,
    "trainer": TrainerConfig,
}
_TOP_FIELDS = ("train_scenes", "val_scenes", "dataset_seed", "ratio",
               "ratios", "seeds", "mode")


def _parse_value(text: str, ftype):
    text = text.strip()
    origin = typing.get_origin(ftype)
    if ftype is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if ftype is int:
        return int(text)
    if ftype is float:
        return float(text)
    if ftype is str:
        return text
    if origin is tuple or ftype is tuple:
        if ";" in text:  # tuple of number triples, e.g. class sizes
            return tuple(tuple(float(x) for x in part.split())
                         for part in text.split(";") if part.strip())
        parts = [p for p in text.replace(",", " ").split() if p]
        out = []
        for p in parts:
            try:
                out.append(int(p))
            except ValueError:
                out.append(float(p))
        return tuple(out)
    raise ConfigError(f"cannot parse a value of type {ftype}")


def _build_section(cls, values: dict):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown option {key!r} for [{cls.__name__}]")
        if isinstance(raw, str):
            kwargs[key] = _parse_value(raw, hints[key])
        elif isinstance(raw, list):
            kwargs[key] = tuple(tuple(v) if isinstance(v, list) else v for v in raw)
        else:
            kwargs[key] = raw
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [{cls.__name__}] section: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _build_section(cls, dict(data[name]))
    hints = typing.get_type_hints(ExperimentConfig)
    for key in _TOP_FIELDS:
        if key in data:
            raw = data[key]
            if isinstance(raw, str):
                kwargs[key] = _parse_value(raw, hints[key])
            elif isinstance(raw, list):
                kwargs[key] = tuple(raw)
            else:
                kwargs[key] = raw
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def plain(obj):
        out = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            out[f.name] = [list(x) if isinstance(x, tuple) else x for x in v] \
                if isinstance(v, tuple) else v
        return out

    data = {name: plain(getattr(cfg, name)) for name in _SECTIONS}
    for key in _TOP_FIELDS:
        v = getattr(cfg, key)
        data[key] = list(v) if isinstance(v, tuple) else v
    return data


def load_config(path) -> ExperimentConfig:
    """Load an experiment config from an INI or JSON file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json" or text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from None
        # run manifests nest the config under "config"
        return config_from_dict(data.get("config", data))
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    data: dict = {}
    for section in parser.sections():
        if section in _SECTIONS:
            data[section] = dict(parser.items(section))
        elif section == "experiment":
            data.update(dict(parser.items(section)))
        else:
            raise ConfigError(f"{path}: unknown section [{section}]")
    return config_from_dict(data)


def apply_disables(cfg: ExperimentConfig, perturbations=(), consistency=()) -> ExperimentConfig:
    """Turn off individual perturbations / consistency terms by name."""
    p_kwargs = {}
    for name in perturbations:
        if name == "all":
            p_kwargs.update({v: False for v in PERTURBATION_FLAGS.values()})
            continue
        if name not in PERTURBATION_FLAGS:
            raise ConfigError(f"unknown perturbation {name!r}")
        p_kwargs[PERTURBATION_FLAGS[name]] = False
    c_kwargs = {}
    for name in consistency:
        if name not in CONSISTENCY_FLAGS:
            raise ConfigError(f"unknown consistency term {name!r}")
        c_kwargs[CONSISTENCY_FLAGS[name]] = 0.0
    out = cfg
    if p_kwargs:
        out = replace(out, perturb=replace(cfg.perturb, **p_kwargs))
    if c_kwargs:
        out = replace(out, consistency=replace(cfg.consistency, **c_kwargs))
    return out
