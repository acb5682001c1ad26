"""CT-style preprocessing: HU windowing, resampling, cropping and padding"""

import logging
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from . import ConfigValueError, InputException
from .models import SegMask, Volume3D

HU_WINDOW = (-500.0, 500.0)


def _check_spacing(name, spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or min(spacing) <= 0:
        raise ConfigValueError(name, spacing, "need three positive values")
    return spacing


def window_hu(data: np.ndarray, window=HU_WINDOW) -> np.ndarray:
    """Clip to the HU window and map it affinely onto [0, 1]"""
    low, high = window
    return ((np.clip(data, low, high) - low) / (high - low)).astype(np.float32)


def resampled_shape(shape, spacing, target_spacing) -> Tuple[int, int, int]:
    """Grid shape keeping the physical extent at the target spacing"""
    return tuple(
        max(1, int(round(size * current / target)))
        for size, current, target in zip(shape, spacing, target_spacing)
    )


def _zoom(array: np.ndarray, shape, order: int) -> np.ndarray:
    factors = [new / old for new, old in zip(shape, array.shape)]
    zoomed = ndimage.zoom(array, factors, order=order, mode="nearest", grid_mode=True)
    if zoomed.shape != tuple(shape):
        zoomed = crop_or_pad_array(zoomed, shape, 0)
    return zoomed


def resample_volume(vol: Volume3D, target_spacing, shape=None) -> Volume3D:
    """Trilinear resampling to target_spacing (or to an explicit grid shape)"""
    target_spacing = _check_spacing("target_spacing", target_spacing)
    shape = tuple(shape) if shape else resampled_shape(vol.shape, vol.spacing, target_spacing)
    if shape == vol.shape and np.allclose(vol.spacing, target_spacing):
        return vol
    data = _zoom(vol.data, shape, order=1)
    if vol.intensity == "unit":
        data = np.clip(data, 0.0, 1.0)
    return vol.replace(data=data.astype(np.float32), spacing=target_spacing)


def resample_mask(mask: SegMask, target_spacing, shape=None) -> SegMask:
    """Nearest-neighbour resampling of a label grid"""
    target_spacing = _check_spacing("target_spacing", target_spacing)
    shape = tuple(shape) if shape else resampled_shape(mask.shape, mask.spacing, target_spacing)
    if shape == mask.shape and np.allclose(mask.spacing, target_spacing):
        return mask
    return SegMask(_zoom(mask.labels, shape, order=0), target_spacing)


def crop_or_pad_array(array: np.ndarray, shape, fill=0.0) -> np.ndarray:
    """Symmetric constant padding up to shape, then a centre crop down to it"""
    pad = []
    for size, target in zip(array.shape, shape):
        deficit = max(0, target - size)
        pad.append((deficit // 2, deficit - deficit // 2))
    if any(before or after for before, after in pad):
        array = np.pad(array, pad, mode="constant", constant_values=fill)
    slices = tuple(
        slice((size - target) // 2, (size - target) // 2 + target)
        for size, target in zip(array.shape, shape)
    )
    return array[slices]


def crop_or_pad(
    item: Union[Volume3D, SegMask], shape, fill=0.0
) -> Union[Volume3D, SegMask]:
    """Centre crop or pad a volume or mask; masks are always padded with background"""
    shape = tuple(int(s) for s in shape)
    if isinstance(item, SegMask):
        return SegMask(crop_or_pad_array(item.labels, shape, 0), item.spacing)
    return item.replace(data=crop_or_pad_array(item.data, shape, fill))


def preprocess_volume(
    vol: Volume3D, target_spacing, crop_or_pad_shape: Optional[tuple] = None
) -> Volume3D:
    """Window HU to [0, 1], resample to target_spacing and optionally crop/pad

    Already windowed volumes at the target spacing pass through unchanged.
    """
    target_spacing = _check_spacing("target_spacing", target_spacing)
    if vol.data.size == 0:
        raise InputException("Cannot preprocess an empty volume")
    if vol.intensity == "hu":
        vol = vol.replace(data=window_hu(vol.data), intensity="unit")
    vol = resample_volume(vol, target_spacing)
    if crop_or_pad_shape is not None:
        vol = crop_or_pad(vol, crop_or_pad_shape)
    logging.debug("Preprocessed volume to %s at %s mm", vol.shape, vol.spacing)
    return vol


def preprocess_pair(
    vol: Volume3D, mask: Optional[SegMask], target_spacing, crop_or_pad_shape=None
):
    """Preprocess a volume and bring its mask onto the same grid"""
    out = preprocess_volume(vol, target_spacing, crop_or_pad_shape)
    if mask is None:
        return out, None
    mask.check_aligned(vol)
    mask = resample_mask(mask, out.spacing, resampled_shape(vol.shape, vol.spacing, out.spacing))
    if crop_or_pad_shape is not None:
        mask = crop_or_pad(mask, crop_or_pad_shape)
    return out, mask


def crop_offsets(shape, crop_shape, seed: int) -> Tuple[int, int, int]:
    """Seeded crop origin inside a grid"""
    if any(crop > size for crop, size in zip(crop_shape, shape)):
        raise InputException(f"Crop {tuple(crop_shape)} is larger than volume {tuple(shape)}")
    rng = np.random.default_rng(seed)
    return tuple(int(rng.integers(0, size - crop + 1)) for size, crop in zip(shape, crop_shape))


def random_crop(vol: Volume3D, mask: Optional[SegMask], crop_shape, seed: int):
    """Crop volume and mask with identical seeded offsets"""
    crop_shape = tuple(int(c) for c in crop_shape)
    if mask is not None:
        mask.check_aligned(vol)
    offsets = crop_offsets(vol.shape, crop_shape, seed)
    window = tuple(slice(o, o + c) for o, c in zip(offsets, crop_shape))
    cropped = vol.replace(data=vol.data[window])
    if mask is None:
        return cropped, None
    return cropped, SegMask(mask.labels[window], mask.spacing)


def lesion_volumes_cc(mask: SegMask) -> Dict[int, float]:
    """Volume of every labelled lesion in cubic centimetres"""
    voxel_cc = float(np.prod(mask.spacing)) / 1000.0
    labels, counts = np.unique(mask.labels[mask.labels > 0], return_counts=True)
    return {int(label): float(count) * voxel_cc for label, count in zip(labels, counts)}
