"""Block-wise 3D masking and student/teacher view construction"""

from dataclasses import dataclass
import math
from typing import Tuple

from einops import reduce, repeat
import numpy as np

from . import ConfigValueError, InputException
from .models import ModelBase, Volume3D
from .preprocessing import crop_or_pad, random_crop

DEFAULT_BLOCK_SIZE = (8, 8, 8)


@dataclass
class MaskSpec:
    """Which blocks of a block grid are masked"""

    block_size: Tuple[int, int, int]
    grid_shape: Tuple[int, int, int]
    masked_flags: np.ndarray
    ratio: float

    @property
    def n_masked(self) -> int:
        return int(self.masked_flags.sum())

    @property
    def view_shape(self):
        return tuple(g * b for g, b in zip(self.grid_shape, self.block_size))

    def voxel_mask(self) -> np.ndarray:
        """Boolean mask at voxel resolution"""
        bx, by, bz = self.block_size
        return repeat(self.masked_flags, "x y z -> (x a) (y b) (z c)", a=bx, b=by, c=bz)

    def flipped(self, axes) -> "MaskSpec":
        return MaskSpec(
            self.block_size, self.grid_shape, np.flip(self.masked_flags, axes).copy(), self.ratio
        )


@dataclass
class ViewPair:
    """Masked student view plus the clean teacher views and reconstruction target"""

    student_view: Volume3D
    teacher_view_aligned: Volume3D
    teacher_view_global: Volume3D
    mask: MaskSpec
    recon_target: Volume3D


@dataclass
class AugmentConfig(ModelBase):
    """Online augmentations applied to each crop"""

    enabled: bool = True
    flip_prob: float = 0.5
    intensity_jitter: float = 0.05

    def __post_init__(self):
        if not 0 <= self.flip_prob <= 1:
            raise ConfigValueError("flip_prob", self.flip_prob, "must be in [0, 1]")
        if self.intensity_jitter < 0:
            raise ConfigValueError("intensity_jitter", self.intensity_jitter, "must be >= 0")


def block_grid(view_shape, block_size) -> Tuple[int, int, int]:
    """:raises ConfigValueError: If the block size doesn't divide the view"""
    if any(size % block for size, block in zip(view_shape, block_size)):
        raise ConfigValueError(
            "block_size", tuple(block_size), f"must divide the view shape {tuple(view_shape)}"
        )
    return tuple(size // block for size, block in zip(view_shape, block_size))


def sample_block_mask(
    grid_shape, ratio: float, seed: int, block_size=DEFAULT_BLOCK_SIZE
) -> MaskSpec:
    """Mask exactly round(ratio * blocks) blocks chosen uniformly at random"""
    if not 0 <= ratio <= 1:
        raise ConfigValueError("mask_ratio", ratio, "must be in [0, 1]")
    grid_shape = tuple(int(g) for g in grid_shape)
    total = math.prod(grid_shape)
    count = int(math.floor(ratio * total + 0.5))
    rng = np.random.default_rng(seed)
    flags = np.zeros(total, dtype=bool)
    flags[rng.choice(total, size=count, replace=False)] = True
    return MaskSpec(tuple(block_size), grid_shape, flags.reshape(grid_shape), float(ratio))


def apply_block_mask(vol: Volume3D, mask: MaskSpec, fill: float = 0.0) -> Volume3D:
    if mask.view_shape != vol.shape:
        raise InputException(f"Mask covers {mask.view_shape}, volume is {vol.shape}")
    return vol.replace(data=np.where(mask.voxel_mask(), np.float32(fill), vol.data))


def _augment(vol: Volume3D, augment: AugmentConfig, rng) -> Volume3D:
    flips = rng.random(3) < augment.flip_prob
    jitter = rng.uniform(-augment.intensity_jitter, augment.intensity_jitter)
    if not augment.enabled:
        return vol
    data = vol.data
    axes = tuple(int(axis) for axis in np.flatnonzero(flips))
    if axes:
        data = np.flip(data, axes)
    if jitter:
        data = np.clip(data + jitter, 0.0, 1.0)
    return vol.replace(data=np.ascontiguousarray(data, dtype=np.float32))


def make_views(
    vol: Volume3D,
    crop_shape,
    ratio: float,
    augment: AugmentConfig,
    seed: int,
    block_size=DEFAULT_BLOCK_SIZE,
) -> ViewPair:
    """Two random augmented crops; the student gets the first one block-masked"""
    crop_shape = tuple(int(c) for c in crop_shape)
    grid = block_grid(crop_shape, block_size)
    padded = tuple(max(size, crop) for size, crop in zip(vol.shape, crop_shape))
    if padded != vol.shape:
        vol = crop_or_pad(vol, padded)

    crop_a, crop_b, augment_seed, mask_seed = np.random.SeedSequence(seed).generate_state(4)
    rng = np.random.default_rng(augment_seed)
    view_a, _ = random_crop(vol, None, crop_shape, int(crop_a))
    view_b, _ = random_crop(vol, None, crop_shape, int(crop_b))
    view_a = _augment(view_a, augment, rng)
    view_b = _augment(view_b, augment, rng)

    mask = sample_block_mask(grid, ratio, int(mask_seed), block_size)
    return ViewPair(
        student_view=apply_block_mask(view_a, mask, 0.0),
        teacher_view_aligned=view_a,
        teacher_view_global=view_b,
        mask=mask,
        recon_target=view_a,
    )


def token_mask_from_blocks(mask: MaskSpec, token_grid) -> np.ndarray:
    """Token-level mask on a feature grid; a token is masked if half its voxels are"""
    if any(t <= 0 or s % t for s, t in zip(mask.view_shape, token_grid)):
        raise InputException(f"Token grid {tuple(token_grid)} doesn't tile {mask.view_shape}")
    ax, ay, az = (s // t for s, t in zip(mask.view_shape, token_grid))
    coverage = reduce(
        mask.voxel_mask().astype(np.float32), "(x a) (y b) (z c) -> x y z", "mean", a=ax, b=ay, c=az
    )
    return coverage >= 0.5
