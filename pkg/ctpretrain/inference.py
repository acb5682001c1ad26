"""Sliding-window inference with Gaussian-weighted blending"""

import itertools
import logging
import math
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter
import torch
import torch.nn.functional as F

from . import ConfigValueError
from .checkpoint import Checkpoint
from .models import SegMask, Volume3D
from .network import SegmentationModel, forward_segment
from .preprocessing import crop_or_pad_array, preprocess_volume, resample_mask


def gaussian_importance_map(window, sigma_scale: float = 1.0 / 8) -> np.ndarray:
    """Gaussian peaked at the window centre, max 1 and strictly positive everywhere"""
    window = tuple(int(w) for w in window)
    impulse = np.zeros(window)
    impulse[tuple(w // 2 for w in window)] = 1
    sigmas = [w * sigma_scale for w in window]
    importance = gaussian_filter(impulse, sigmas, 0, mode="constant", cval=0)
    importance = (importance / importance.max()).astype(np.float32)
    importance[importance == 0] = importance[importance != 0].min()
    return importance


def compute_steps(image_size, window, overlap: float = 0.5) -> List[List[int]]:
    """Window origins per axis; the last window always ends on the image edge"""
    if not 0 <= overlap < 1:
        raise ConfigValueError("overlap", overlap, "must be in [0, 1)")
    steps = []
    for size, width in zip(image_size, window):
        target_step = width * (1 - overlap)
        num_steps = int(math.ceil((size - width) / target_step)) + 1
        if num_steps > 1:
            actual = (size - width) / (num_steps - 1)
            steps.append([int(round(actual * i)) for i in range(num_steps)])
        else:
            steps.append([0])
    return steps


def blend_patches(
    patches: Sequence[np.ndarray], starts: Sequence[Tuple[int, ...]], out_shape, importance
) -> np.ndarray:
    """Importance-weighted average of overlapping (C, *window) patches

    Works for any number of spatial axes; every output position must be covered.
    """
    channels = patches[0].shape[0]
    out_shape = tuple(int(s) for s in out_shape)
    summed = np.zeros((channels,) + out_shape, dtype=np.float64)
    weights = np.zeros(out_shape, dtype=np.float64)
    for patch, start in zip(patches, starts):
        region = tuple(slice(s, s + w) for s, w in zip(start, patch.shape[1:]))
        summed[(slice(None),) + region] += patch * importance
        weights[region] += importance
    return (summed / weights).astype(np.float32)


def sliding_window_probabilities(model: SegmentationModel, data: np.ndarray, overlap: float = 0.5):
    """Class probabilities (C, D, H, W) of a volume tiled with the model's input window

    Volumes smaller than the window are padded first and cropped back afterwards.
    """
    window = model.config.input_shape
    original = data.shape
    padded = tuple(max(size, width) for size, width in zip(original, window))
    if padded != original:
        logging.warning(
            "Volume %s is smaller than window %s, padding to %s", original, window, padded
        )
        data = crop_or_pad_array(data, padded, 0.0)

    importance = gaussian_importance_map(window)
    patches, starts = [], []
    for start in itertools.product(*compute_steps(padded, window, overlap)):
        region = tuple(slice(s, s + w) for s, w in zip(start, window))
        logits = forward_segment(model, np.ascontiguousarray(data[region]))
        patches.append(F.softmax(logits, dim=1)[0].cpu().numpy())
        starts.append(start)
    probabilities = blend_patches(patches, starts, padded, importance)
    if padded != original:
        probabilities = np.stack([crop_or_pad_array(p, original, 0.0) for p in probabilities])
    return probabilities


def infer_volume(
    model: Union[Checkpoint, SegmentationModel],
    vol: Volume3D,
    target_spacing: Optional[tuple] = None,
    overlap: float = 0.5,
) -> SegMask:
    """Binary lesion mask for a volume

    Without ``target_spacing`` the volume is taken as already preprocessed and the mask
    shares its grid; otherwise it is preprocessed and the mask mapped back to ``vol``'s grid.
    """
    if isinstance(model, Checkpoint):
        model = model.build()
    model.eval()
    work = vol if target_spacing is None else preprocess_volume(vol, target_spacing)
    with torch.no_grad():
        probabilities = sliding_window_probabilities(model, work.data, overlap)
    labels = (probabilities.argmax(axis=0) > 0).astype(np.int16)
    mask = SegMask(labels, work.spacing)
    if target_spacing is not None:
        mask = resample_mask(mask, vol.spacing, vol.shape)
    return mask
