"""Experiment configuration: one validated document with a section per stage"""

from dataclasses import dataclass, field, replace
import hashlib
import json
import logging
from typing import Optional

from . import ConfigValueError
from .config_reader import ConfigReader
from .finetune import FinetuneConfig
from .metrics import OVERLAPS
from .models import CONTRASTS, ModelBase, PhantomSpec
from .network import ARCHITECTURES, ModelConfig, preset
from .phantom import kernel_group
from .pretrain import PretrainConfig
from .report import ACCURACY_OVER, GROUP_COLUMNS


@dataclass
class DataConfig(ModelBase):
    """Synthetic cohort layout"""

    # pylint: disable-msg=too-many-instance-attributes

    root: str = "data"
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    n_cases: int = 24
    test_fraction: float = 0.25
    contrasts: tuple = CONTRASTS
    kernels: tuple = ("smooth", "medium", "sharp")
    thicknesses: tuple = (2.5, 5.0)
    contrast_boost: float = 150.0
    paired_cases: int = 4
    paired_kernels: tuple = ("sharp", "smooth")
    wild_cases: int = 12

    def __post_init__(self):
        self.contrasts = tuple(self.contrasts)
        self.kernels = tuple(self.kernels)
        self.thicknesses = tuple(float(t) for t in self.thicknesses)
        self.paired_kernels = tuple(self.paired_kernels)
        self.test_fraction = float(self.test_fraction)
        self.contrast_boost = float(self.contrast_boost)
        if isinstance(self.phantom, dict):
            self.phantom = PhantomSpec.from_dict(self.phantom)
        for kernel in self.kernels + self.paired_kernels:
            kernel_group(kernel, field="kernels")
        for contrast in self.contrasts:
            if contrast not in CONTRASTS:
                raise ConfigValueError("contrasts", contrast, f"must be one of {CONTRASTS}")
        if not (self.contrasts and self.kernels and self.thicknesses):
            raise ConfigValueError("data", "acquisition grid", "needs at least one value per axis")
        if self.n_cases < 1 or self.paired_cases < 0 or self.wild_cases < 0:
            raise ConfigValueError("n_cases", self.n_cases, "case counts must be positive")
        if not 0 <= self.test_fraction < 1:
            raise ConfigValueError("test_fraction", self.test_fraction, "must be in [0, 1)")
        if self.paired_cases and len(self.paired_kernels) < 2:
            raise ConfigValueError("paired_kernels", self.paired_kernels, "need two kernels")


@dataclass
class ModelSection(ModelBase):
    """Architecture preset plus field overrides"""

    arch: str = "swin"
    scale: str = "desk"
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigValueError("arch", self.arch, f"must be one of {sorted(ARCHITECTURES)}")
        self.overrides = dict(self.overrides)

    def model_config(self) -> ModelConfig:
        return preset(self.arch, self.scale, **self.overrides)


@dataclass
class EvalConfig(ModelBase):
    tau: float = 0.5
    overlap: str = "dice"
    group_keys: tuple = ("contrast", "kernel_group", "slice_thickness")
    accuracy_over: str = "detected_by_any"
    window_overlap: float = 0.5
    split: str = "test"

    def __post_init__(self):
        self.tau = float(self.tau)
        self.window_overlap = float(self.window_overlap)
        self.group_keys = tuple(self.group_keys)
        if self.overlap not in OVERLAPS:
            raise ConfigValueError("overlap", self.overlap, f"must be one of {OVERLAPS}")
        if self.accuracy_over not in ACCURACY_OVER:
            raise ConfigValueError(
                "accuracy_over", self.accuracy_over, f"must be one of {ACCURACY_OVER}"
            )
        unknown = [key for key in self.group_keys if key not in GROUP_COLUMNS]
        if unknown:
            raise ConfigValueError("group_keys", unknown, f"must be among {sorted(GROUP_COLUMNS)}")
        if not 0 < self.tau <= 1:
            raise ConfigValueError("tau", self.tau, "must be in (0, 1]")


@dataclass
class CKAConfig(ModelBase):
    taps: Optional[list] = None
    batch_size: int = 4
    pooling: str = "mean"
    subgroup: dict = field(default_factory=dict)
    split: str = "test"


@dataclass
class RunsConfig(ModelBase):
    root: str = "runs"


@dataclass
class MatrixConfig(ModelBase):
    """Architectures and training strategies enumerated by the matrix command"""

    archs: tuple = ("cnn", "vit", "swin")
    strategies: tuple = ("scratch", "self", "wild")
    two_stage_archs: tuple = ("swin",)

    def __post_init__(self):
        self.archs = tuple(self.archs)
        self.strategies = tuple(self.strategies)
        self.two_stage_archs = tuple(self.two_stage_archs)
        for arch in self.archs + self.two_stage_archs:
            if arch not in ARCHITECTURES:
                raise ConfigValueError("archs", arch, f"must be one of {sorted(ARCHITECTURES)}")
        for strategy in self.strategies:
            if strategy not in ("scratch", "self", "wild"):
                raise ConfigValueError("strategies", strategy, "must be scratch, self or wild")


@dataclass
class ExperimentConfig(ModelBase):
    """Every setting of an experiment"""

    # pylint: disable-msg=too-many-instance-attributes

    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    cka: CKAConfig = field(default_factory=CKAConfig)
    runs: RunsConfig = field(default_factory=RunsConfig)
    matrix: MatrixConfig = field(default_factory=MatrixConfig)

    def with_seed(self, seed: Optional[int]) -> "ExperimentConfig":
        return self if seed is None else replace(self, seed=int(seed))

    def with_arch(self, arch: str) -> "ExperimentConfig":
        return replace(self, model=replace(self.model, arch=arch))


def load_experiment(file=None, overrides=(), raw=False) -> ExperimentConfig:
    """Read, override and validate an experiment config; no file means all defaults

    :raises ConfigException: On unreadable files, unknown keys or invalid values
    """
    reader = ConfigReader(file, raw, overrides)
    config = ExperimentConfig.from_dict(reader.config.to_dict())
    config.model.model_config()
    logging.debug("Experiment config %s", config_hash(config.to_dict())[:12])
    return config


def config_hash(payload) -> str:
    """SHA-256 of the canonical JSON form of a config or a part of it"""
    if isinstance(payload, ModelBase):
        payload = payload.to_dict()
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
