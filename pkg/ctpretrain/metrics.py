"""Overlap, surface-distance and detection metrics plus paired tests"""

from dataclasses import dataclass
import logging
from typing import List, Optional

import numpy as np
from scipy import ndimage, stats

from . import ConfigValueError, InputException
from .models import EvalRecord, ModelTag, ScanMeta, SegMask
from .preprocessing import lesion_volumes_cc

OVERLAPS = ("dice", "iou")
FACE_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)
FULL_CONNECTIVITY = ndimage.generate_binary_structure(3, 3)


def _binary(mask) -> np.ndarray:
    if isinstance(mask, SegMask):
        return mask.binary
    return np.asarray(mask) > 0


def _pair(a, b):
    a, b = _binary(a), _binary(b)
    if a.shape != b.shape:
        raise InputException(f"Mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(a, b) -> float:
    """2|A∩B| / (|A| + |B|), 1.0 when both are empty"""
    a, b = _pair(a, b)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def iou(a, b) -> float:
    a, b = _pair(a, b)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def boundary(mask) -> np.ndarray:
    """Foreground voxels with at least one face-adjacent background neighbour"""
    mask = _binary(mask)
    return mask ^ ndimage.binary_erosion(mask, FACE_CONNECTIVITY, border_value=0)


def surface_distances(a, b, spacing) -> np.ndarray:
    """Distance in mm from every boundary voxel of a to the nearest boundary voxel of b"""
    border_a, border_b = boundary(a), boundary(b)
    distance_to_b = ndimage.distance_transform_edt(~border_b, sampling=spacing)
    return distance_to_b[border_a]


def hd95(a, b, spacing=None) -> Optional[float]:
    """95th percentile of the symmetric boundary distances in mm; None if a side is empty"""
    if spacing is None:
        spacing = a.spacing if isinstance(a, SegMask) else (1.0, 1.0, 1.0)
    a, b = _pair(a, b)
    if not a.any() or not b.any():
        return None
    distances = np.hstack([surface_distances(a, b, spacing), surface_distances(b, a, spacing)])
    return float(np.percentile(distances, 95))


@dataclass
class LesionResult:
    """Per-lesion outcome of matching a prediction against the ground truth"""

    lesion_id: int
    dsc: float
    hd95_mm: Optional[float]
    detected: bool
    lesion_volume_cc: float
    overlap: float

    def to_record(self, case_id: str, meta: ScanMeta, model_tag: ModelTag) -> EvalRecord:
        return EvalRecord(
            case_id=case_id,
            lesion_id=self.lesion_id,
            dsc=self.dsc,
            hd95_mm=self.hd95_mm,
            detected=self.detected,
            lesion_volume_cc=self.lesion_volume_cc,
            meta=meta,
            model_tag=model_tag,
        )


def match_and_detect(
    pred, gt: SegMask, tau: float = 0.5, overlap: str = "dice"
) -> List[LesionResult]:
    """Greedy one-to-one matching of predicted components to labelled lesions

    Pairs are taken in order of descending overlap; a lesion counts as detected when its
    matched overlap reaches ``tau``. Unmatched lesions get DSC 0 and no HD95.
    """
    if overlap not in OVERLAPS:
        raise ConfigValueError("overlap", overlap, f"must be one of {OVERLAPS}")
    measure = dice if overlap == "dice" else iou
    pred_binary, _ = _pair(pred, gt.labels)
    components, n_components = ndimage.label(pred_binary, structure=FULL_CONNECTIVITY)
    volumes = lesion_volumes_cc(gt)
    lesion_ids = sorted(volumes)

    candidates = []
    for lesion_id in lesion_ids:
        lesion = gt.labels == lesion_id
        for component in np.unique(components[lesion]):
            if component == 0:
                continue
            score = measure(lesion, components == component)
            candidates.append((-score, lesion_id, int(component)))
    matched = {}
    used = set()
    for neg_score, lesion_id, component in sorted(candidates):
        if lesion_id in matched or component in used:
            continue
        matched[lesion_id] = (component, -neg_score)
        used.add(component)

    results = []
    for lesion_id in lesion_ids:
        if lesion_id not in matched:
            results.append(LesionResult(lesion_id, 0.0, None, False, volumes[lesion_id], 0.0))
            continue
        component, score = matched[lesion_id]
        lesion = gt.labels == lesion_id
        predicted = components == component
        results.append(
            LesionResult(
                lesion_id,
                dice(lesion, predicted),
                hd95(lesion, predicted, gt.spacing),
                score >= tau,
                volumes[lesion_id],
                score,
            )
        )
    logging.debug(
        "Matched %d of %d lesions against %d components",
        len(matched),
        len(lesion_ids),
        n_components,
    )
    return results


def detection_rate(results) -> Optional[float]:
    """Fraction of detected lesions, None without lesions"""
    results = list(results)
    if not results:
        return None
    return sum(1 for result in results if result.detected) / len(results)


def wilcoxon_signed_rank(x, y) -> float:
    """Two-sided paired Wilcoxon signed-rank p-value

    Zero differences are dropped. The exact null distribution is used for up to 25
    untied differences, the normal approximation otherwise.

    :raises InputException: On unequal lengths or fewer than 5 non-zero differences
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InputException(f"Paired samples differ in length: {len(x)} vs {len(y)}")
    differences = x - y
    differences = differences[differences != 0]
    if differences.size == 0:
        logging.warning("All %d paired differences are zero, p set to 1", len(x))
        return 1.0
    if differences.size < 5:
        raise InputException(
            f"Wilcoxon test needs at least 5 non-zero differences, got {differences.size}"
        )
    tied = np.unique(np.abs(differences)).size < differences.size
    method = "exact" if differences.size <= 25 and not tied else "approx"
    result = stats.wilcoxon(differences, alternative="two-sided", method=method, correction=False)
    return float(result.pvalue)
