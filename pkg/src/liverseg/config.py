"""Run configuration: one JSON document holding phantom, training, adaptation and path settings."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional

from .cotta import AdaptConfig
from .mean_teacher import TrainConfig
from .phantom import DomainStyle, PhantomSpec

CONFIG_VERSION = "1"


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    manifest: Optional[str] = None
    student: Optional[str] = None
    teacher: Optional[str] = None
    mapper: Optional[str] = None
    predictions: Optional[str] = None


def _build(cls, raw: Any, section: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section!r} settings: {e}") from e


def _plain(d: Dict[str, Any]) -> Dict[str, Any]:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass
class RunConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    version: str = CONFIG_VERSION

    def with_seed(self, seed: int) -> "RunConfig":
        """Apply one seed to every stage."""
        if seed < 0 or seed >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.phantom.seed = seed
        self.train.seed = seed
        self.adapt.seed = seed
        return self

    def to_dict(self) -> dict:
        ph = _plain(asdict(self.phantom))
        ph["styles"] = [asdict(s) for s in self.phantom.styles] if self.phantom.styles is not None else None
        return {
            "version": self.version,
            "phantom": ph,
            "train": _plain(self.train.to_dict()),
            "adapt": _plain(asdict(self.adapt)),
            "paths": asdict(self.paths),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(raw) - {"version", "phantom", "train", "adapt", "paths"})
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
        version = str(raw.get("version", CONFIG_VERSION))
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {version!r} (expected {CONFIG_VERSION!r})")
        ph = dict(raw.get("phantom") or {})
        if ph.get("styles") is not None:
            try:
                ph["styles"] = [DomainStyle(**s) for s in ph["styles"]]
            except (TypeError, ValueError) as e:
                raise ConfigError(f"invalid phantom styles: {e}") from e
        return cls(
            phantom=_build(PhantomSpec, ph, "phantom"),
            train=_build(TrainConfig, raw.get("train"), "train"),
            adapt=_build(AdaptConfig, raw.get("adapt"), "adapt"),
            paths=_build(PathsConfig, raw.get("paths"), "paths"),
            version=version,
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON ({e})") from e
        return cls.from_dict(raw)
