"""Run configuration: nested dataclasses loaded from JSON with strict key checking."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass
from pathlib import Path

from .diffusion import TrainConfig
from .errors import ConfigError
from .scenes import SceneConfig
from .wiring import DenoiserConfig


@dataclass(frozen=True)
class DataConfig:
    n: int = 5000
    root_seed: int = 0
    split: str = "train"
    scene: SceneConfig = SceneConfig()
    certify: bool = True


@dataclass(frozen=True)
class TrainRunConfig:
    model: DenoiserConfig = DenoiserConfig()
    base: TrainConfig = TrainConfig(steps=6000, seed=1)
    gsa: TrainConfig = TrainConfig(steps=8000, lr=3e-3, seed=2, weighting="output")


@dataclass(frozen=True)
class SweepConfig:
    gammas: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    modes: tuple[str, ...] = ("sequential", "parallel")
    n_scenes: int = 200
    eval_seed: int = 7
    sampler_steps: int = 50
    iou_threshold: float = 0.5
    dropped: bool = False
    drop_fraction: float = 0.5
    batch_size: int = 100
    jobs: int = 1
    scene: SceneConfig = SceneConfig()


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = DataConfig()
    train: TrainRunConfig = TrainRunConfig()
    sweep: SweepConfig = SweepConfig()


def _coerce(tp, value, where: str, default=None):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object")
        return from_dict(tp, value, where, default)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        (inner, _ellipsis) = typing.get_args(tp)
        return tuple(_coerce(inner, v, f"{where}[{i}]") for i, v in enumerate(value))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data: dict, where: str = "", default=None):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys by name.

    Keys missing from ``data`` keep their values from ``default`` (``cls()``
    when not given), so partial files only override what they mention.
    """
    default = cls() if default is None else default
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join((where + '.' if where else '') + k for k in unknown)}")
    kwargs = {
        k: _coerce(hints[k], v, f"{where}.{k}" if where else k, getattr(default, k)) for k, v in data.items()
    }
    try:
        return dataclasses.replace(default, **kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where or cls.__name__}: {exc}") from None


def to_dict(obj) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(obj)))


def load_config(path: Path | None, cls=RunConfig):
    if path is None:
        return cls()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(cls, data)


def replace_path(obj, dotted: str, value):
    """Copy of nested frozen dataclass ``obj`` with ``dotted`` field set to ``value``."""
    head, _, rest = dotted.partition(".")
    if head not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {dotted}")
    if rest:
        return dataclasses.replace(obj, **{head: replace_path(getattr(obj, head), rest, value)})
    try:
        return dataclasses.replace(obj, **{head: value})
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{dotted}: {exc}") from None


def write_resolved(path: Path, payload: dict):
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
