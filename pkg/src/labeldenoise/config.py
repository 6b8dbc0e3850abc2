"""Flat ``key = value`` run configuration with command-line overrides.

Every key maps onto one field of SceneConfig, DapConfig, TrainConfig,
LossWeights or the run paths.  ``seed`` is the single root seed and feeds
scene generation, perturbation and training.  Tuples are written as
comma-separated lists.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Optional

from .dap import DapConfig
from .errors import ConfigError
from .losses import LossWeights
from .synth import SceneConfig
from .toymodel import TrainConfig

_SKIP = {"calib", "seed", "dap", "weights"}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _section_keys() -> dict[str, tuple[str, object]]:
    keys: dict[str, tuple[str, object]] = {}
    for section, cls in (("scene", SceneConfig), ("dap", DapConfig), ("train", TrainConfig), ("weights", LossWeights)):
        default = cls()
        for f in fields(cls):
            if f.name not in _SKIP:
                keys[f.name] = (section, getattr(default, f.name))
    for name in ("data", "out", "checkpoint"):
        keys[name] = ("paths", "")
    keys["seed"] = ("root", 0)
    return keys


KEYS = _section_keys()


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` strings; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"{source}:{n}: empty key")
        if k in out:
            raise ConfigError(f"{source}:{n}: duplicate key {k!r}")
        out[k] = v
    return out


def parse_overrides(args: Iterable[str]) -> dict[str, str]:
    """``--key=value`` or ``--key value`` pairs left over by argparse."""
    args = list(args)
    out: dict[str, str] = {}
    i = 0
    while i < len(args):
        a = args[i]
        if not a.startswith("--") or len(a) < 3:
            raise ConfigError(f"unexpected argument {a!r}")
        if "=" in a:
            k, v = a[2:].split("=", 1)
            i += 1
        elif i + 1 < len(args):
            k, v = a[2:], args[i + 1]
            i += 2
        else:
            raise ConfigError(f"missing value for {a}")
        out[k.replace("-", "_")] = v
    return out


def _convert(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, enum.Enum):
            return type(default)(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], str):
                return tuple(items)
            return tuple(float(s) for s in items)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    data: str = ""
    out: str = ""
    checkpoint: str = ""

    @property
    def dap(self) -> DapConfig:
        return self.train.dap

    @property
    def weights(self) -> LossWeights:
        return self.train.weights

    def values(self) -> dict[str, object]:
        out = {}
        for k, (section, _) in KEYS.items():
            src = {
                "scene": self.scene,
                "dap": self.train.dap,
                "train": self.train,
                "weights": self.train.weights,
            }.get(section, self)
            out[k] = getattr(src, k)
        return out

    def to_text(self, keys: Optional[Iterable[str]] = None) -> str:
        vals = self.values()
        lines = []
        for k in keys or vals:
            v = vals[k]
            if isinstance(v, enum.Enum):
                v = v.value
            elif isinstance(v, bool):
                v = str(v).lower()
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k} = {v}\n")
        return "".join(lines)


def build_run_config(values: dict[str, str], base: Optional[RunConfig] = None) -> RunConfig:
    """Apply raw string ``values`` over ``base`` (defaults when None)."""
    base = base or RunConfig()
    parts: dict[str, dict] = {"scene": {}, "dap": {}, "train": {}, "weights": {}, "paths": {}, "root": {}}
    current = base.values()
    for k, raw in values.items():
        if k not in KEYS:
            raise ConfigError(f"unknown config key {k!r}")
        section, _ = KEYS[k]
        parts[section][k] = _convert(k, raw, current[k])
    seed = parts["root"].get("seed", base.seed)
    try:
        scene = replace(base.scene, seed=seed, **parts["scene"])
        dap = replace(base.train.dap, seed=seed, **parts["dap"])
        weights = replace(base.train.weights, **parts["weights"])
        train = replace(base.train, seed=seed, dap=dap, weights=weights, **parts["train"])
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None
    return replace(base, scene=scene, train=train, seed=seed, **parts["paths"])


def load_run_config(path=None, overrides: Optional[dict[str, str]] = None, base: Optional[RunConfig] = None) -> RunConfig:
    values: dict[str, str] = {}
    if path:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        values.update(parse_config_text(text, str(path)))
    values.update(overrides or {})
    return build_run_config(values, base)
