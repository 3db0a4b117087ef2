"""Flat dotted-key run configuration.

Sources, lowest to highest precedence: built-in defaults, profile, config
file (``key=value`` lines, ``#`` comments), environment, command-line flags.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

ENV_SEED = "GROWTHCAST_SEED"
ENV_FID_MODEL = "GROWTHCAST_FID_MODEL"
CONFIG_FILE_NAME = "run_config.txt"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "workers": 1,
    "profile": "cauliflower",
    "pair.horizon": 3,
    "pair.threshold": 0.02,
    "pair.stage_unit": "week",
    "pair.clean": True,
    "model.input_size": 256,
    "model.base_channels": 64,
    "model.dropout_rate": 0.5,
    "disc.patch_levels": 3,
    "disc.base_channels": 64,
    "train.lambda_l1": 100.0,
    "train.learning_rate": 1e-4,
    "train.batch_size": 1,
    "train.epochs": 160,
    "train.checkpoint_every": 0,
    "augment.random_crop": True,
    "augment.flips": "horizontal,vertical",
    "augment.rotations": "0,180",
    "predict.stochastic": True,
    "segment.backend": "baseline",
    "segment.command": "",
    "segment.min_area": 50,
    "segment.center_fraction": 1 / 3,
    "fid.model_source": "",
    "synth.n_plants": 40,
    "synth.stages": 6,
    "synth.image_size": 64,
    "synth.jitter_m": 0.004,
    "synth.harvest_prob": 0.1,
    "synth.emergence_prob": 0.05,
}

PROFILES: dict[str, dict[str, Any]] = {
    "cauliflower": {"train.epochs": 160, "pair.horizon": 3, "pair.stage_unit": "week"},
    "rosette": {"train.epochs": 40, "pair.horizon": 17, "pair.stage_unit": "day"},
    # Desk-scale: 64 px, narrow networks, no crop so plant scale stays fixed.
    "synthetic": {
        "train.epochs": 20,
        "pair.horizon": 3,
        "model.input_size": 64,
        "model.base_channels": 16,
        "disc.base_channels": 16,
        "augment.random_crop": False,
        "synth.n_plants": 120,
        "synth.stages": 6,
        "synth.image_size": 64,
        "fid.model_source": "random-projection:dim=64,size=32,seed=0",
    },
}


def _coerce(key: str, value: Any) -> Any:
    default = DEFAULTS[key]
    if isinstance(value, type(default)) and not (isinstance(default, (int, float)) and isinstance(value, bool)):
        return value
    text = str(value).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {type(default).__name__}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, Any] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def to_text(self) -> str:
        lines = []
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{key}={v}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / CONFIG_FILE_NAME
        path.write_text(self.to_text())
        return path

    def with_overrides(self, **flags) -> "RunConfig":
        return resolve_config(flags=flags, base=self)


def resolve_config(
    config_file: str | Path | None = None,
    env: Mapping[str, str] | None = None,
    flags: Mapping[str, Any] | None = None,
    profile: str | None = None,
    base: RunConfig | None = None,
) -> RunConfig:
    """Merge defaults < profile < file < environment < flags.

    ``flags`` with value None are ignored, so unset CLI options fall
    through to lower-precedence sources.
    """
    env = os.environ if env is None else env
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    file_values = {}
    if config_file is not None:
        path = Path(config_file)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        file_values = parse_config_text(path.read_text(), str(path))
    env_values = {}
    if env.get(ENV_SEED):
        env_values["seed"] = env[ENV_SEED]
    if env.get(ENV_FID_MODEL):
        env_values["fid.model_source"] = env[ENV_FID_MODEL]

    profile = flags.get("profile") or env_values.get("profile") or file_values.get("profile") or profile
    if profile is None:
        profile = base["profile"] if base is not None else DEFAULTS["profile"]
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")

    values = dict(DEFAULTS) if base is None else dict(base.values)
    if base is None or base["profile"] != profile:
        values.update(PROFILES[profile])
    values["profile"] = profile
    for layer in (file_values, env_values, flags):
        for key, v in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, v)
    return RunConfig(values)
