"""Run configuration: defaults, presets, key=value files and seed fan-out."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .model import INIT_SCHEMES, MODES

# Sub-seeds are SeedSequence(master, spawn_key=(index,)), so changing how many
# draws one stage makes never perturbs another stage.
SEED_STREAMS = {"split": 0, "init": 1, "sampling": 2}

PRESETS = {
    # the settings reported for the LightGCN baseline
    "lightgcn": {"mode": "lightgcn", "K": 3, "d": 64, "learning_rate": 1e-3, "batch_size": 1024},
    "hetrofair": {"mode": "hetrofair", "K": 4, "d": 128, "learning_rate": 5e-4, "batch_size": 2048},
    "fair_attention": {"mode": "fair_attention", "K": 2, "d": 128, "learning_rate": 5e-4, "batch_size": 2048},
}


class ConfigError(ValueError):
    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class RunConfig:
    data: str = ""
    fmt: str = "tsv"
    columns: str = "user,item"
    k_core: int = 10
    ratios: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    mode: str = "hetrofair"
    K: int = 4
    d: int = 128
    delta: float | None = None
    learning_rate: float = 5e-4
    reg_beta: float = 1e-4
    batch_size: int = 2048
    max_epochs: int = 1000
    patience: int = 15
    eval_every: int = 1
    optimizer: str = "adam"
    N: int = 20
    init: str = "xavier"
    w_init: str = "xavier"
    norm_exponent: float = 0.5
    fraction: float = 0.2
    output: str = "runs/default"
    threads: int = 1
    deterministic: bool = True

    def validate(self, need_data: bool = True, need_delta: bool = True) -> None:
        errors = []
        if need_data and not self.data:
            errors.append("data path is required")
        if self.fmt not in ("csv", "tsv"):
            errors.append(f"fmt must be csv or tsv, got {self.fmt!r}")
        if self.k_core < 1:
            errors.append("k_core must be >= 1")
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios) or abs(sum(self.ratios) - 1) > 1e-9:
            errors.append(f"ratios must be three non-negative numbers summing to 1, got {self.ratios}")
        if self.mode not in MODES:
            errors.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.K < 1:
            errors.append("K must be >= 1")
        if self.d < 1:
            errors.append("d must be >= 1")
        if self.delta is None:
            if need_delta and self.mode != "lightgcn":
                errors.append(f"delta is required for mode {self.mode}")
        elif not 0 < self.delta <= 1:
            errors.append(f"delta must lie in (0, 1], got {self.delta}")
        if not self.learning_rate >= 0:
            errors.append("learning_rate must be >= 0")
        if not self.reg_beta >= 0:
            errors.append("reg_beta must be >= 0")
        for name in ("batch_size", "max_epochs", "patience", "eval_every", "N", "threads"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            errors.append(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        for name in ("init", "w_init"):
            if getattr(self, name) not in INIT_SCHEMES:
                errors.append(f"{name} must be one of {INIT_SCHEMES}")
        if not 0 < self.fraction <= 1:
            errors.append("fraction must lie in (0, 1]")
        if errors:
            raise ConfigError(errors)

    @property
    def effective_delta(self) -> float:
        return 1.0 if self.delta is None else float(self.delta)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "ratios":
                v = ",".join(repr(float(r)) for r in v)
            elif v is None:
                v = ""
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(name: str, raw: str):
    if name not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {name!r}")
    raw = raw.strip()
    try:
        if name == "ratios":
            return tuple(float(x) for x in raw.split(","))
        if name == "delta":
            return float(raw) if raw else None
        if name in ("deterministic",):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        default = getattr(RunConfig, name)
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def read_config_file(path: str | Path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = coerce(key.strip(), value)
    return out


def resolve(overrides: dict | None = None, config_file: str | Path | None = None, preset: str | None = None) -> RunConfig:
    """Precedence: explicit overrides > config file > preset > defaults."""
    values: dict = {}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        values.update(PRESETS[preset])
    if config_file:
        values.update(read_config_file(config_file))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values)


def sub_seed(master: int, stream: str) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=master, spawn_key=(SEED_STREAMS[stream],))


def sub_seed_int(master: int, stream: str) -> int:
    return int(sub_seed(master, stream).generate_state(1, dtype=np.uint32)[0])


def run_id(config: RunConfig, input_hash: str) -> str:
    """Stable id from the settings that affect results (not the output location)."""
    text = "".join(line + "\n" for line in config.to_text().splitlines()
                   if not line.startswith(("output=", "threads=", "data=")))
    h = hashlib.sha256((text + input_hash).encode())
    return h.hexdigest()[:12]


def hash_files(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(str(p) for p in paths):
        h.update(Path(p).name.encode())
        h.update(Path(p).read_bytes())
    return h.hexdigest()
