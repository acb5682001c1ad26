""" ctpretrain data models """

from dataclasses import MISSING, asdict, dataclass, field, fields
import typing
from typing import Optional

import numpy as np

from . import ConfigValueError, InputException, check_fields

CONTRASTS = ("contrast", "non_contrast")
KERNEL_GROUPS = ("recon1", "recon2", "recon3")


class ModelBase:
    """Common class of every config section and record"""

    @classmethod
    def mandatory_fields(cls):
        """Mandatory fields have no default and *must* be passed into the dataclass' constructor"""
        return {
            field.name
            for field in fields(cls)
            if field.default is MISSING and field.default_factory is MISSING
        }

    @classmethod
    def optional_fields(cls):
        """Optional fields have defaults and *may* be passed into the dataclass' constructor"""
        return {
            field.name
            for field in fields(cls)
            if field.default is not MISSING or field.default_factory is not MISSING
        }

    @classmethod
    def supported_fields(cls):
        """Supported fields are any field that is present in the data model"""
        return {field.name for field in fields(cls)}

    @classmethod
    def from_dict(cls, config):
        """Build from a mapping, rejecting unknown and missing keys

        Nested ModelBase fields are built recursively from nested mappings.
        """
        check_fields(config, cls.mandatory_fields(), cls.optional_fields())
        hints = typing.get_type_hints(cls)
        kwargs = {}
        for key, value in config.items():
            hint = hints.get(key)
            if isinstance(hint, type) and issubclass(hint, ModelBase) and not isinstance(
                value, hint
            ):
                value = hint.from_dict(value)
            kwargs[key] = value
        return cls(**kwargs)

    def to_dict(self):
        """Plain python representation, safe for yaml and json dumping"""
        return _plain(asdict(self))


def _plain(value):
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def _triple(name, value, cast=float):
    value = tuple(cast(item) for item in value)
    if len(value) != 3:
        raise ConfigValueError(name, value, "expected three values")
    return value


@dataclass(unsafe_hash=True, order=True)
class ScanMeta(ModelBase):
    """Acquisition metadata of a scan"""

    contrast: str = "non_contrast"
    kernel_group: str = "recon2"
    slice_thickness_mm: float = 2.5
    source_id: str = ""

    def __post_init__(self):
        if self.contrast not in CONTRASTS:
            raise ConfigValueError("contrast", self.contrast, f"must be one of {CONTRASTS}")
        if self.kernel_group not in KERNEL_GROUPS:
            raise ConfigValueError(
                "kernel_group", self.kernel_group, f"must be one of {KERNEL_GROUPS}"
            )
        if self.slice_thickness_mm <= 0:
            raise ConfigValueError(
                "slice_thickness_mm", self.slice_thickness_mm, "must be positive"
            )
        self.slice_thickness_mm = float(self.slice_thickness_mm)

    def matches(self, cohort_filter) -> bool:
        """Equality filter over metadata fields, e.g. {"contrast": "contrast"}"""
        for key, value in (cohort_filter or {}).items():
            if key not in self.supported_fields():
                raise ConfigValueError("cohort_filter", key, "not a ScanMeta field")
            if getattr(self, key) != value:
                return False
        return True


@dataclass(eq=False)
class Volume3D:
    """3D scalar grid with physical spacing and acquisition metadata

    ``intensity`` is ``"hu"`` for raw scanner values and ``"unit"`` once windowed to [0, 1].
    """

    data: np.ndarray
    spacing: tuple
    meta: ScanMeta = field(default_factory=ScanMeta)
    intensity: str = "hu"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise InputException(f"Volume must be 3D, got shape {self.data.shape}")
        self.spacing = _triple("spacing", self.spacing)
        if min(self.spacing) <= 0:
            raise ConfigValueError("spacing", self.spacing, "all components must be positive")
        if self.intensity not in ("hu", "unit"):
            raise ConfigValueError("intensity", self.intensity, "must be 'hu' or 'unit'")

    @property
    def shape(self):
        return tuple(self.data.shape)

    def replace(self, **changes):
        """Copy with some fields replaced"""
        values = {
            "data": self.data,
            "spacing": self.spacing,
            "meta": self.meta,
            "intensity": self.intensity,
        }
        values.update(changes)
        return Volume3D(**values)


@dataclass(eq=False)
class SegMask:
    """Labelled 3D grid, 0 is background and k >= 1 a lesion id"""

    labels: np.ndarray
    spacing: tuple

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise InputException(f"Mask must be 3D, got shape {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            if not np.array_equal(self.labels, np.round(self.labels)):
                raise InputException("Mask labels must be integers")
        self.labels = self.labels.astype(np.int16)
        self.spacing = _triple("spacing", self.spacing)
        if min(self.spacing) <= 0:
            raise ConfigValueError("spacing", self.spacing, "all components must be positive")

    @property
    def shape(self):
        return tuple(self.labels.shape)

    @property
    def binary(self) -> np.ndarray:
        return self.labels > 0

    @property
    def n_lesions(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0

    def check_aligned(self, vol: Volume3D):
        """:raises InputException: If shape or spacing differ from the volume"""
        if self.shape != vol.shape or not np.allclose(self.spacing, vol.spacing):
            raise InputException(
                f"Mask {self.shape}@{self.spacing} doesn't match volume {vol.shape}@{vol.spacing}"
            )

    def is_contiguous(self) -> bool:
        values = np.unique(np.concatenate([[0], self.labels.ravel()]))
        return bool(np.array_equal(values, np.arange(values.max() + 1)))


@dataclass
class IntensityParams(ModelBase):
    """HU mean and standard deviation per tissue class"""

    background_mean: float = -400.0
    background_std: float = 50.0
    lesion_mean: float = 0.0
    lesion_std: float = 30.0
    vessel_mean: float = 100.0
    vessel_std: float = 30.0


@dataclass
class PhantomSpec(ModelBase):
    """Recipe for a synthetic CT-like phantom"""

    grid_shape: tuple = (64, 64, 40)
    spacing_mm: tuple = (1.5, 1.5, 2.5)
    n_lesions: int = 8
    lesion_radius_range_mm: tuple = (4.0, 9.0)
    background_texture_scale: float = 6.0
    n_vessels: int = 4
    vessel_radius_mm: float = 2.0
    max_retries: int = 200
    intensity_params: IntensityParams = field(default_factory=IntensityParams)

    def __post_init__(self):
        self.grid_shape = _triple("grid_shape", self.grid_shape, int)
        self.spacing_mm = _triple("spacing_mm", self.spacing_mm)
        self.lesion_radius_range_mm = tuple(float(r) for r in self.lesion_radius_range_mm)
        if min(self.grid_shape) <= 0:
            raise ConfigValueError("grid_shape", self.grid_shape, "must be positive")
        if min(self.spacing_mm) <= 0:
            raise ConfigValueError("spacing_mm", self.spacing_mm, "must be positive")
        if self.n_lesions < 0:
            raise ConfigValueError("n_lesions", self.n_lesions, "must be >= 0")
        low, high = self.lesion_radius_range_mm
        if not 0 < low <= high:
            raise ConfigValueError(
                "lesion_radius_range_mm", self.lesion_radius_range_mm, "need 0 < min <= max"
            )
        if isinstance(self.intensity_params, dict):
            self.intensity_params = IntensityParams.from_dict(self.intensity_params)


@dataclass(frozen=True)
class ModelTag(ModelBase):
    """Identifies the model behind an evaluation record"""

    arch: str
    training_strategy: str = "scratch"
    pretext_task: str = "none"

    @property
    def label(self) -> str:
        return f"{self.arch}/{self.training_strategy}/{self.pretext_task}"


@dataclass
class EvalRecord(ModelBase):
    """Per-lesion evaluation result"""

    # pylint: disable-msg=too-many-instance-attributes

    case_id: str
    lesion_id: int
    dsc: float
    hd95_mm: Optional[float]
    detected: bool
    lesion_volume_cc: float
    meta: ScanMeta
    model_tag: ModelTag
