"""Experiment configuration files.

A config is an INI-style text file with flat ``key = value`` pairs grouped in
sections::

    [model]
    kind = parameterized
    d_x = 10

    [data]
    T = 300
    n_train = 4

    [method]
    method = adenkf-t
    L = 20

Unknown sections or keys are rejected.  :func:`config_hash` digests the
normalized content; every CSV written by the CLI carries it.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import MISSING, dataclass, field, fields
from pathlib import Path

from .models import ProblemConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    name: str = "data"
    T: int = 300
    n_train: int = 4
    n_test: int = 1
    seed: int = 0


@dataclass
class EvalConfig:
    N: int = 50
    method: str = "enkf"
    attractor_points: int = 500
    burn: int = 1000
    every: int = 10
    seed: int = 0


@dataclass
class RateConfig:
    Ns: tuple = (50, 100, 200, 400, 800, 1600, 3200)
    P: int = 50
    T: int = 10
    point: str = "truth"
    taper_radius: float | None = None
    compare_taper: bool = True
    seed: int = 0


@dataclass
class ExperimentConfig:
    kind: str = "parameterized"
    model: ProblemConfig = field(default_factory=ProblemConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    rate: RateConfig = field(default_factory=RateConfig)
    checkpoint_every: int = 1
    text: str = ""

    @property
    def hash(self) -> str:
        return config_hash(self.text)


_SECTIONS = {
    "model": ProblemConfig,
    "data": DataConfig,
    "method": TrainConfig,
    "filter": TrainConfig,
    "eval": EvalConfig,
    "rate": RateConfig,
}


def _parse_value(raw: str, default):
    s = raw.strip()
    if s.lower() in ("none", ""):
        return None
    if isinstance(default, bool):
        if s.lower() in ("1", "true", "yes", "on"):
            return True
        if s.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        return tuple(_parse_scalar(p) for p in s.split(","))
    if isinstance(default, int):
        return int(s)
    if isinstance(default, float):
        return float(s)
    return _parse_scalar(s)


def _parse_scalar(s: str):
    s = s.strip()
    if "," in s:
        return tuple(_parse_scalar(p) for p in s.split(","))
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    if s.lower() in ("none", ""):
        return None
    return s


def normalized_text(parser: configparser.ConfigParser) -> str:
    out = []
    for sec in sorted(parser.sections()):
        out.append(f"[{sec}]")
        for key in sorted(parser[sec]):
            out.append(f"{key} = {parser[sec][key].strip()}")
    return "\n".join(out) + "\n"


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    values: dict[str, dict] = {k: {} for k in ("model", "data", "train", "eval",
                                               "rate")}
    kind = "parameterized"
    checkpoint_every = 1
    for sec in parser.sections():
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        cls = _SECTIONS[sec]
        defaults = {f.name: _default_of(cls, f) for f in fields(cls)}
        target = "train" if sec in ("method", "filter") else sec
        for key, raw in parser[sec].items():
            if sec == "model" and key == "kind":
                kind = raw.strip()
                continue
            if sec == "method" and key == "checkpoint_every":
                checkpoint_every = int(raw)
                continue
            if key not in defaults:
                raise ConfigError(f"unknown key '{key}' in [{sec}]")
            try:
                val = _parse_value(raw, defaults[key])
            except ValueError as exc:
                raise ConfigError(f"[{sec}] {key}: {exc}") from exc
            values[target][key] = val
    try:
        model_defaults = (ProblemConfig(d_x=20, obs_var=0.5, init_var=4.0)
                          if kind == "linear" else ProblemConfig())
        model = ProblemConfig(**{**model_defaults.__dict__, **values["model"]})
        cfg = ExperimentConfig(
            kind=kind, model=model, data=DataConfig(**values["data"]),
            train=TrainConfig(**values["train"]), eval=EvalConfig(**values["eval"]),
            rate=RateConfig(**values["rate"]), checkpoint_every=checkpoint_every,
            text=normalized_text(parser))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    from .models import KINDS
    if cfg.kind.replace("_", "-") not in KINDS:
        raise ConfigError(f"unknown model kind {cfg.kind!r}")
    return cfg


def _default_of(cls, f):
    return f.default if f.default is not MISSING else f.default_factory()


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {path} not found")
    return parse_config(p.read_text())
