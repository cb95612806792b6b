"""Experiment configuration as a sectioned key/value (INI) file, and seed splitting."""

from __future__ import annotations

import configparser
import io
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .core import GenAdvError, NormBudget, budget_from_255_units, norm_name, parse_norm


class ConfigError(GenAdvError, ValueError):
    pass


SEED_NAMES = ("data", "victim", "pattern", "init", "shuffle", "target-sampling")


def sub_seed(global_seed: int, name: str) -> int:
    """Named sub-seed derived from the global seed (stable across runs and platforms)."""
    ss = np.random.SeedSequence([int(global_seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0] & 0x7FFFFFFF)


def seed_table(global_seed: int) -> dict[str, int]:
    return {name: sub_seed(global_seed, name) for name in SEED_NAMES}


@dataclass
class DatasetSection:
    source: str = "shapes10"  # shapes10 | cifar10 | segmentation | archive
    path: str = ""
    n: int = 8000

    def __post_init__(self):
        if self.source not in ("shapes10", "cifar10", "segmentation", "archive"):
            raise ConfigError(f"unknown dataset source {self.source!r}")
        if self.source in ("cifar10", "archive") and not self.path:
            raise ConfigError(f"dataset source {self.source} needs a path")


@dataclass
class VictimSection:
    arch: str = "cnn_small"
    id: str = ""
    epochs: int = 4
    batch_size: int = 128
    lr: float = 1e-3


@dataclass
class AttackSection:
    mode: str = "image_dependent"
    loss: str = "nontargeted_ce"
    target: str = ""  # class index, or path to a .npy label map
    kappa: float = 0.0
    norm: str = "inf"
    epsilon_255: float = 10.0
    victims: str = "cnn_small"  # id[:lambda], comma separated
    generator: str = "resnet"
    base_filters: int = 32
    depth: int = 0  # 0 selects the architecture default
    epochs: int = 2
    batch_size: int = 32
    max_steps: int = 0
    lr: float = 2e-4
    val_limit: int = 1000


@dataclass
class EvaluateSection:
    split: str = "test"
    limit: int = 0
    sigmas: str = "0.5,0.75,1,1.25"
    transfer_victims: str = ""
    transfer_artifacts: str = ""
    timing_images: int = 100
    timing_repeats: int = 3
    baseline: str = "ll"
    baseline_steps: int = 100
    viz_samples: int = 4


SECTIONS = {
    "dataset": DatasetSection,
    "victim": VictimSection,
    "attack": AttackSection,
    "evaluate": EvaluateSection,
}


def _coerce(cls, section: str, raw: dict):
    kinds = {f.name: f.type for f in fields(cls)}
    unknown = set(raw) - set(kinds)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    out = {}
    for key, text in raw.items():
        kind = kinds[key]
        try:
            out[key] = int(text) if kind == "int" else float(text) if kind == "float" else text.strip()
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc
    return cls(**out)


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    victim: VictimSection = field(default_factory=VictimSection)
    attack: AttackSection = field(default_factory=AttackSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        unknown = set(parser.sections()) - set(SECTIONS) - {"experiment"}
        if unknown:
            raise ConfigError(f"unknown sections: {sorted(unknown)}")
        exp = dict(parser["experiment"]) if parser.has_section("experiment") else {}
        extra = set(exp) - {"seed", "out"}
        if extra:
            raise ConfigError(f"unknown keys in [experiment]: {sorted(extra)}")
        try:
            seed = int(exp.get("seed", 0))
        except ValueError as exc:
            raise ConfigError(f"[experiment] seed: {exc}") from exc
        kwargs = {
            name: _coerce(sec_cls, name, dict(parser[name]) if parser.has_section(name) else {})
            for name, sec_cls in SECTIONS.items()
        }
        return cls(seed=seed, out=exp.get("out", cls.out), **kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"no config file at {path}")
        return cls.from_text(path.read_text())

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
        parser["experiment"] = {"seed": str(self.seed), "out": self.out}
        for name in SECTIONS:
            section = getattr(self, name)
            parser[name] = {f.name: str(getattr(section, f.name)) for f in fields(section)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_text())

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """Copy with per-section field overrides, e.g. ``attack={"norm": "2"}``."""
        cfg = replace(self)
        for name, values in sections.items():
            if name in ("seed", "out"):
                setattr(cfg, name, values)
            else:
                setattr(cfg, name, replace(getattr(cfg, name), **values))
        return cfg

    @property
    def seeds(self) -> dict[str, int]:
        return seed_table(self.seed)

    def budget(self, n_pixels: int) -> NormBudget:
        return budget_from_255_units(self.attack.norm, self.attack.epsilon_255, n_pixels)

    def victim_weights(self) -> list[tuple[str, Optional[float]]]:
        pairs = []
        for item in self.attack.victims.split(","):
            item = item.strip()
            if not item:
                continue
            vid, _, lam = item.partition(":")
            pairs.append((vid.strip(), float(lam) if lam else None))
        if not pairs:
            raise ConfigError("[attack] victims is empty")
        return pairs

    def sigmas(self) -> list[float]:
        return parse_sigmas(self.evaluate.sigmas)


def parse_sigmas(text: str) -> list[float]:
    try:
        values = [float(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad sigma list {text!r}") from exc
    if not values or any(v < 0 for v in values):
        raise ConfigError(f"sigmas must be a non-empty list of non-negative numbers, got {text!r}")
    return values


def budget_units(budget: NormBudget, n_pixels: int) -> dict:
    """A budget in canonical [0, 1] units and in 0-255 units, for reports."""
    return {
        "norm": norm_name(budget.p),
        "epsilon": budget.epsilon,
        "epsilon_255": budget.epsilon_255(n_pixels),
        "n_pixels": n_pixels,
    }


def validate_norm(text: str) -> str:
    return norm_name(parse_norm(text))
