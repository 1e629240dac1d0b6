"""Dataclass configs and the flat key=value run-config file format.

A run config file is plain text: one `key = value` per line, `#` comments,
unknown keys rejected. Every key has a default, so an empty file is the
default desk-scale setup. `RunConfig.canonical()` renders a sorted,
normalized dump whose sha256 is the config hash stamped into every output
file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

TOOL_VERSION = "0.1.0"


def _default_d_reduce(d_model: int) -> int:
    # reduced trimmer width: d_model/12 rounded up, floor of 4
    return max(4, math.ceil(d_model / 12))


@dataclass(frozen=True)
class ModelConfig:
    """Backbone and trimmer hyperparameters."""

    d_model: int = 64
    d_reduce: int = 8          # trimmer bottleneck width
    n_heads: int = 4
    d_ff: int = 256
    n_uni_layers: int = 2      # per uni-modal encoder
    n_cross_layers: int = 2
    n_visual_tokens: int = 65  # grid cells + CLS
    n_text_tokens: int = 12    # words + CLS
    vocab_size: int = 32
    patch_dim: int = 17
    n_classes: int = 2
    # trimmer placement, by site group
    trim_visual_tokens: bool = True
    trim_text_uni_tokens: bool = False
    trim_cross_tokens: bool = True
    trim_uni_heads: bool = False
    trim_cross_heads: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_visual_tokens < 2 or self.n_text_tokens < 2:
            raise ValueError("need CLS plus at least one content token per stream")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @staticmethod
    def with_default_reduce(**kw) -> "ModelConfig":
        if "d_reduce" not in kw:
            kw["d_reduce"] = _default_d_reduce(kw.get("d_model", 64))
        return ModelConfig(**kw)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization, budgets, and schedule."""

    steps: int = 2500
    batch_size: int = 8
    learning_rate: float = 1e-3
    warmup_fraction: float = 0.1
    beta1: float = 0.9          # first-moment EMA; 0 disables momentum entirely
    beta2: float = 0.99
    adam_eps: float = 1e-8
    gamma_t_target: float = 0.5
    gamma_h_target: float = 0.5
    lambda_sd: float = 1.0
    lambda_cost: float = 20.0
    curriculum_fraction: float = 0.6
    tau: float = 1.0
    tau_final: float = 0.0      # 0 disables annealing (tau stays fixed)
    straight_through: bool = False
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.curriculum_fraction <= 1.0):
            raise ValueError("curriculum_fraction must be in (0, 1]")
        for name in ("gamma_t_target", "gamma_h_target"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class DataConfig:
    """Synthetic grid-task generation parameters."""

    data_seed: int = 7
    grid_size: int = 8
    train_size: int = 20000
    val_size: int = 500
    test_size: int = 2000
    difficulty_min: int = 1
    difficulty_max: int = 6
    noise_sigma: float = 0.05
    templates: str = "exists_c,exists_s"  # comma list of query kinds

    def __post_init__(self):
        if self.difficulty_min < 1 or self.difficulty_max < self.difficulty_min:
            raise ValueError("need 1 <= difficulty_min <= difficulty_max")
        if self.difficulty_max > self.grid_size * self.grid_size:
            raise ValueError("more objects than grid cells")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.model.n_visual_tokens != self.data.grid_size ** 2 + 1:
            raise ValueError(
                f"n_visual_tokens={self.model.n_visual_tokens} must equal "
                f"grid_size^2+1={self.data.grid_size ** 2 + 1}"
            )

    # -- flat key space -----------------------------------------------------

    def _sections(self):
        return {"model": self.model, "train": self.train, "data": self.data}

    def flat(self) -> dict:
        out = {}
        for section in self._sections().values():
            for f in fields(section):
                out[f.name] = getattr(section, f.name)
        out["out_dir"] = self.out_dir
        return out

    def canonical(self) -> str:
        lines = []
        for k, v in sorted(self.flat().items()):
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:16]

    def replace(self, **kw) -> "RunConfig":
        """Rebuild with flat-key overrides (e.g. gamma_t_target=1.0)."""
        merged = self.flat()
        unknown = set(kw) - set(merged)
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        merged.update(kw)
        return _from_flat(merged)


def _coerce(name: str, raw: str, typ):
    raw = raw.strip()
    if typ is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError as exc:
        raise ValueError(f"{name}: expected {typ.__name__}, got {raw!r}") from exc


def _from_flat(values: dict) -> RunConfig:
    sections = {}
    for sec_name, sec_type in (("model", ModelConfig), ("train", TrainConfig), ("data", DataConfig)):
        kw = {f.name: values[f.name] for f in fields(sec_type)}
        sections[sec_name] = sec_type(**kw)
    return RunConfig(out_dir=values["out_dir"], **sections)


def parse_config_text(text: str) -> RunConfig:
    """Parse key=value lines into a RunConfig; unknown keys are rejected."""
    defaults = RunConfig().flat()
    types = {k: type(v) for k, v in defaults.items()}
    values = dict(defaults)
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in defaults:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in seen:
            raise ValueError(f"line {lineno}: duplicate config key {key!r}")
        seen.add(key)
        values[key] = raw if types[key] is str else _coerce(key, raw, types[key])
    return _from_flat(values)


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(d: dict) -> RunConfig:
    return RunConfig(
        model=ModelConfig(**d["model"]),
        train=TrainConfig(**d["train"]),
        data=DataConfig(**d["data"]),
        out_dir=d.get("out_dir", "runs/default"),
    )
