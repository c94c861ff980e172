"""Run configuration: dataclasses plus a flat INI round-trip.

Every field has a default.  Unknown sections or keys are rejected so that a
typo in an ablation config fails loudly instead of silently using a default.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field

from .bagdata import BagDataset, SplitSpec, generate_gaussian_bags, generate_image_bags, load_patch_directory
from .coupling import CouplingConfig
from .embedder import AugmentSpec, EmbedderArch

DATASET_KINDS = ("gaussian", "image", "directory")
COUPLING_MODES = ("teacher-student", "naive")


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    kind: str = "gaussian"
    path: str = ""
    n_bags: int = 286  # 200/29/57 after a 0.7/0.1/0.2 split
    k_min: int = 10
    k_max: int = 30
    dim: int = 16
    separation: float = 3.0
    witness_rate: float = 0.2
    positive_ratio: float = 0.5
    channels: int = 3
    patch_size: int = 16
    seed: int = 0
    train_frac: float = 0.7
    val_frac: float = 0.1
    test_frac: float = 0.2
    split_seed: int = 0

    @property
    def split(self) -> SplitSpec:
        return SplitSpec(self.train_frac, self.val_frac, self.test_frac, self.split_seed)


@dataclass
class ModelConfig:
    preset: str = "desk"
    aggregator: str = "attention"
    seed: int = 0


@dataclass
class StageOneConfig:
    learning_rate: float = 2e-4
    epochs: int = 50
    batch_size_bags: int = 1
    seed: int = 0
    attn_dim: int = 32
    head_widths: tuple = (32,)
    select_on_val: bool = True

    def __post_init__(self):
        if self.learning_rate < 0 or self.epochs < 0 or self.batch_size_bags < 1:
            raise ConfigError("stage one needs lr >= 0, epochs >= 0, batch_size_bags >= 1")


@dataclass
class ICMILConfig:
    iterations: float = 1.0
    warm_start: bool = True
    coupling_mode: str = "teacher-student"
    half_iteration_eval: bool = False

    def __post_init__(self):
        if self.iterations < 0 or abs(self.iterations * 2 - round(self.iterations * 2)) > 1e-9:
            raise ConfigError(f"iterations must be a non-negative multiple of 0.5, got {self.iterations}")
        if self.coupling_mode not in COUPLING_MODES:
            raise ConfigError(f"coupling_mode must be one of {COUPLING_MODES}")


@dataclass
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage_one: StageOneConfig = field(default_factory=StageOneConfig)
    coupling: CouplingConfig = field(default_factory=CouplingConfig)
    augment: AugmentSpec = field(default_factory=lambda: AugmentSpec(noise_sigma=0.1))
    icmil: ICMILConfig = field(default_factory=ICMILConfig)
    seed: int = 0
    out: str = "runs"

    def __post_init__(self):
        # the coupling block carries the augmentation spec it trains with
        self.coupling.augment = self.augment
        from .aggregator import AGGREGATOR_KINDS

        if self.model.aggregator not in AGGREGATOR_KINDS:
            raise ConfigError(
                f"unknown aggregator {self.model.aggregator!r}; valid kinds: {', '.join(AGGREGATOR_KINDS)}"
            )
        if self.dataset.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset kind must be one of {DATASET_KINDS}")
        if self.model.preset not in ("desk", "paper"):
            raise ConfigError("model preset must be 'desk' or 'paper'")

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with every component seed set to ``seed``."""
        cfg = from_ini(to_ini(self))
        cfg.seed = seed
        cfg.dataset.seed = seed
        cfg.dataset.split_seed = seed
        cfg.model.seed = seed
        cfg.stage_one.seed = seed
        cfg.coupling.seed = seed
        return cfg

    def embedder_arch(self, patch_shape) -> EmbedderArch:
        if self.model.preset == "paper":
            return EmbedderArch.paper(patch_shape) if len(patch_shape) == 3 else EmbedderArch(patch_shape, (), 512)
        return EmbedderArch.desk(patch_shape)

    def hash(self) -> str:
        return hashlib.sha256(to_ini(self).encode()).hexdigest()[:16]


_SECTIONS = ("dataset", "model", "stage_one", "coupling", "augment", "icmil")
_RUN_KEYS = ("seed", "out")
_SKIP = {("coupling", "augment")}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, default, key: str):
    try:
        if isinstance(default, bool):
            lowered = text.strip().lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def to_ini(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser()
    parser["run"] = {key: _format(getattr(cfg, key)) for key in _RUN_KEYS}
    for section in _SECTIONS:
        block = getattr(cfg, section)
        parser[section] = {
            f.name: _format(getattr(block, f.name))
            for f in dataclasses.fields(block)
            if (section, f.name) not in _SKIP
        }
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def from_ini(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse INI text on top of ``base`` (defaults when omitted)."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    base = base or RunConfig()
    blocks = {s: dataclasses.asdict(getattr(base, s)) for s in _SECTIONS}
    run = {key: getattr(base, key) for key in _RUN_KEYS}
    for section in parser.sections():
        if section == "run":
            target = run
        elif section in blocks:
            target = blocks[section]
        else:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser[section].items():
            if key not in target or (section, key) in _SKIP:
                raise ConfigError(f"unknown config key {section}.{key}")
            target[key] = _parse(value, target[key], f"{section}.{key}")
    blocks["coupling"].pop("augment", None)
    blocks["stage_one"]["head_widths"] = tuple(blocks["stage_one"]["head_widths"])
    try:
        return RunConfig(
            dataset=DatasetConfig(**blocks["dataset"]),
            model=ModelConfig(**blocks["model"]),
            stage_one=StageOneConfig(**blocks["stage_one"]),
            coupling=CouplingConfig(**blocks["coupling"]),
            augment=AugmentSpec(**blocks["augment"]),
            icmil=ICMILConfig(**blocks["icmil"]),
            **run,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def preset(name: str) -> RunConfig:
    """``desk`` runs in minutes on one CPU; ``paper`` records the published hyperparameters.

    The paper preset (200 epochs, 10000 coupling iterations of 100 patches,
    1024 -> 512 embeddings) is documentation; it is not meant to run here.
    """
    if name == "desk":
        return RunConfig()
    if name == "paper":
        return RunConfig(
            model=ModelConfig(preset="paper"),
            stage_one=StageOneConfig(learning_rate=2e-4, epochs=200, batch_size_bags=1),
            coupling=CouplingConfig(alpha=0.5, learning_rate=1e-5, iterations=10000, batch_size=100),
            augment=AugmentSpec(),
        )
    raise ConfigError(f"unknown preset {name!r}; valid presets: desk, paper")


def build_dataset(cfg: DatasetConfig) -> BagDataset:
    if cfg.kind == "gaussian":
        return generate_gaussian_bags(
            cfg.n_bags, (cfg.k_min, cfg.k_max), cfg.dim, cfg.separation, cfg.seed,
            positive_ratio=cfg.positive_ratio, witness_rate=cfg.witness_rate,
        )
    if cfg.kind == "image":
        return generate_image_bags(
            cfg.n_bags, (cfg.k_min, cfg.k_max), cfg.positive_ratio, cfg.witness_rate,
            (cfg.channels, cfg.patch_size, cfg.patch_size), cfg.seed,
        )
    if not cfg.path:
        raise ConfigError("dataset kind 'directory' needs dataset.path")
    return load_patch_directory(cfg.path)
