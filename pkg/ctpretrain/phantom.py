"""Synthetic CT-like phantoms and simulated acquisition shifts"""

from dataclasses import dataclass, replace
import logging
from typing import Optional

from einops import reduce
import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from . import ConfigValueError, GenerationException
from .models import ModelBase, PhantomSpec, ScanMeta, SegMask, Volume3D

KERNEL_GROUPS = {"smooth": "recon1", "medium": "recon2", "sharp": "recon3"}
NEIGHBOURHOOD = ndimage.generate_binary_structure(3, 3)


def _texture(rng, shape, spacing, scale_mm):
    noise = rng.standard_normal(shape)
    sigma = [scale_mm / s for s in spacing]
    smooth = ndimage.gaussian_filter(noise, sigma, mode="wrap")
    return smooth / (smooth.std() + 1e-12)


def _vessel_mask(rng, spec: PhantomSpec) -> np.ndarray:
    """Tubes of fixed radius around random polyline centerlines"""
    shape = np.array(spec.grid_shape)
    centerline = np.zeros(spec.grid_shape, dtype=bool)
    for _ in range(spec.n_vessels):
        points = rng.uniform(0, shape - 1, size=(4, 3))
        for start, end in zip(points[:-1], points[1:]):
            steps = int(np.ceil(np.abs(end - start).max() * 2)) + 1
            path = np.linspace(start, end, steps).round().astype(int)
            centerline[tuple(path.T)] = True
    if not centerline.any():
        return centerline
    distance = ndimage.distance_transform_edt(~centerline, sampling=spec.spacing_mm)
    return distance <= spec.vessel_radius_mm


def _ellipsoid(rng, spec: PhantomSpec):
    """Random ellipsoid as (bounding-box slices, boolean footprint) or None"""
    spacing = np.array(spec.spacing_mm)
    shape = np.array(spec.grid_shape)
    radii = rng.uniform(*spec.lesion_radius_range_mm, size=3)
    quat = rng.standard_normal(4)
    rotation = Rotation.from_quat(quat / np.linalg.norm(quat)).as_matrix()

    extent = np.ceil(radii.max() / spacing).astype(int) + 1
    if np.any(2 * extent + 1 > shape):
        return None
    center = np.array([rng.uniform(e, s - 1 - e) for e, s in zip(extent, shape)])
    low = np.floor(center - extent).astype(int)
    high = np.ceil(center + extent).astype(int) + 1
    grid = np.stack(
        np.meshgrid(*[np.arange(l, h) for l, h in zip(low, high)], indexing="ij"), axis=-1
    )
    local = ((grid - center) * spacing) @ rotation
    inside = ((local / radii) ** 2).sum(axis=-1) <= 1.0
    if not inside.any():
        return None
    return tuple(slice(l, h) for l, h in zip(low, high)), inside


def generate_phantom(spec: PhantomSpec, seed: int):
    """Render a phantom volume in HU with its lesion label mask

    Lesions are non-overlapping ellipsoids separated by at least one voxel,
    labelled 1..n_lesions.

    :raises GenerationException: If a lesion can't be placed within spec.max_retries attempts
    """
    rng = np.random.default_rng(seed)
    params = spec.intensity_params
    shape = spec.grid_shape

    data = params.background_mean + params.background_std * _texture(
        rng, shape, spec.spacing_mm, spec.background_texture_scale
    )
    vessels = _vessel_mask(rng, spec)
    data[vessels] = rng.normal(params.vessel_mean, params.vessel_std) + 0.2 * params.vessel_std * (
        rng.standard_normal(int(vessels.sum()))
    )

    labels = np.zeros(shape, dtype=np.int16)
    occupied = np.zeros(shape, dtype=bool)
    for index in range(spec.n_lesions):
        for _ in range(spec.max_retries):
            candidate = _ellipsoid(rng, spec)
            if candidate is None:
                continue
            window, inside = candidate
            footprint = np.zeros(shape, dtype=bool)
            footprint[window] = inside
            if (ndimage.binary_dilation(footprint, NEIGHBOURHOOD) & occupied).any():
                continue
            occupied |= footprint
            labels[footprint] = index + 1
            data[footprint] = rng.normal(params.lesion_mean, params.lesion_std) + (
                0.2 * params.lesion_std * rng.standard_normal(int(footprint.sum()))
            )
            break
        else:
            raise GenerationException(index, spec.n_lesions)

    meta = ScanMeta(slice_thickness_mm=spec.spacing_mm[2], source_id=f"phantom-{seed}")
    logging.debug("Generated phantom seed=%d with %d lesions", seed, spec.n_lesions)
    return (
        Volume3D(data.astype(np.float32), spec.spacing_mm, meta, "hu"),
        SegMask(labels, spec.spacing_mm),
    )


@dataclass
class AcquisitionShift(ModelBase):
    """Simulated reconstruction kernel, slice thickness and contrast enhancement"""

    kernel: str = "medium"
    slice_thickness_mm: Optional[float] = None
    contrast_boost: float = 0.0
    smooth_sigma: float = 1.5
    medium_sigma: float = 0.75
    sharp_amount: float = 1.0
    sharp_radius: float = 1.0
    enhancement_threshold_hu: float = 60.0


def kernel_group(kernel: str, field: str = "kernel") -> str:
    """Reconstruction group of a kernel name

    :raises ConfigValueError: For unknown kernels, naming ``field``
    """
    if kernel not in KERNEL_GROUPS:
        raise ConfigValueError(field, kernel, f"must be one of {sorted(KERNEL_GROUPS)}")
    return KERNEL_GROUPS[kernel]


def _apply_kernel(data: np.ndarray, shift: AcquisitionShift) -> np.ndarray:
    if shift.kernel == "sharp":
        if shift.sharp_radius <= 0 or shift.sharp_amount == 0:
            return data
        blurred = ndimage.gaussian_filter(data, shift.sharp_radius, mode="nearest")
        return data + shift.sharp_amount * (data - blurred)
    sigma = shift.smooth_sigma if shift.kernel == "smooth" else shift.medium_sigma
    if sigma <= 0:
        return data
    return ndimage.gaussian_filter(data, sigma, mode="nearest")


def _thicken(data: np.ndarray, factor: int) -> np.ndarray:
    """Average z-slabs of ``factor`` slices and interpolate back to the original grid"""
    depth = data.shape[2]
    padded_depth = -(-depth // factor) * factor
    if padded_depth != depth:
        data = np.pad(data, ((0, 0), (0, 0), (0, padded_depth - depth)), mode="edge")
    slabs = reduce(data, "x y (z k) -> x y z", "mean", k=factor)
    restored = ndimage.zoom(slabs, (1, 1, factor), order=1, mode="nearest", grid_mode=True)
    return restored[:, :, :depth]


def apply_acquisition_shift(vol: Volume3D, shift: AcquisitionShift) -> Volume3D:
    """Re-render a volume as if acquired with another kernel, thickness and contrast

    Works on raw HU and on windowed volumes; paired masks stay valid as the grid
    never changes.
    """
    group = kernel_group(shift.kernel)
    data = vol.data.astype(np.float64)
    unit = vol.intensity == "unit"

    if shift.contrast_boost:
        threshold, offset = shift.enhancement_threshold_hu, shift.contrast_boost
        if unit:
            threshold, offset = (threshold + 500.0) / 1000.0, offset / 1000.0
        data = np.where(data > threshold, data + offset, data)

    data = _apply_kernel(data, shift)

    thickness = vol.meta.slice_thickness_mm
    if shift.slice_thickness_mm is not None:
        if shift.slice_thickness_mm <= 0:
            raise ConfigValueError(
                "slice_thickness_mm", shift.slice_thickness_mm, "must be positive"
            )
        factor = max(1, int(round(shift.slice_thickness_mm / vol.spacing[2])))
        if factor > 1:
            data = _thicken(data, factor)
        thickness = float(shift.slice_thickness_mm)

    if unit:
        data = np.clip(data, 0.0, 1.0)
    meta = replace(
        vol.meta,
        kernel_group=group,
        slice_thickness_mm=thickness,
        contrast="contrast" if shift.contrast_boost > 0 else "non_contrast",
    )
    return vol.replace(data=data.astype(np.float32), meta=meta)
