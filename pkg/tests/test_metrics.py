""" Basic functionality tests for segmentation and detection metrics """

from unittest.mock import patch

import numpy as np
import pytest
from scipy import ndimage
from scipy.spatial.distance import cdist

from ctpretrain import ConfigValueError, InputException
from ctpretrain.metrics import (
    boundary,
    detection_rate,
    dice,
    hd95,
    iou,
    match_and_detect,
    wilcoxon_signed_rank,
)
from ctpretrain.models import ModelTag, ScanMeta, SegMask


def cube(start, size=4, shape=(20, 12, 12)):
    mask = np.zeros(shape, dtype=bool)
    mask[start : start + size, 2 : 2 + size, 2 : 2 + size] = True
    return mask


@pytest.fixture(name="two_lesions")
def fixture_two_lesions():
    """Two separate 4^3 lesions on a unit grid"""
    labels = np.zeros((20, 12, 12), dtype=np.int16)
    labels[cube(2)] = 1
    labels[cube(12)] = 2
    return SegMask(labels, (1.0, 1.0, 1.0))


def test_dice_iou():
    """Half-overlapping cubes"""
    a, b = cube(2), cube(4)
    assert dice(a, b) == pytest.approx(0.5)
    assert iou(a, b) == pytest.approx(1 / 3)
    assert dice(a, a) == 1.0


def test_dice_empty():
    """Two empty masks agree perfectly, one empty mask not at all"""
    empty = np.zeros((4, 4, 4))
    assert dice(empty, empty) == 1.0
    assert iou(empty, empty) == 1.0
    assert dice(empty, cube(0, 2, (4, 4, 4))) == 0.0


def test_dice_shape_mismatch():
    """Masks must share their grid"""
    with pytest.raises(InputException):
        dice(np.zeros((4, 4, 4)), np.zeros((4, 4, 5)))


def test_boundary():
    """A 4^3 cube has 56 boundary voxels"""
    assert int(boundary(cube(2)).sum()) == 56


def test_hd95():
    """Identical masks are 0 mm apart, a one-slice shift is one spacing apart"""
    a = cube(2)
    assert hd95(a, a) == 0.0
    assert hd95(a, cube(3), (2.0, 1.0, 1.0)) == pytest.approx(2.0)
    assert hd95(a, np.zeros_like(a)) is None
    assert hd95(SegMask(a.astype(np.int16), (3.0, 1.0, 1.0)), cube(3)) == pytest.approx(3.0)


SPACING = (1.5, 1.5, 2.0)


@pytest.fixture(name="random_pairs")
def fixture_random_pairs():
    """Fifty pairs of correlated blobby 16^3 masks"""
    rng = np.random.default_rng(11)
    pairs = []
    for _ in range(50):
        base = ndimage.gaussian_filter(rng.normal(size=(16, 16, 16)), 1.5)
        other = base + 0.5 * ndimage.gaussian_filter(rng.normal(size=(16, 16, 16)), 1.5)
        pairs.append((base > np.percentile(base, 70), other > np.percentile(other, 70)))
    return pairs


def brute_boundary(mask):
    padded = np.pad(mask, 1)
    inside = padded[1:-1, 1:-1, 1:-1]
    neighbours = [
        padded[2:, 1:-1, 1:-1],
        padded[:-2, 1:-1, 1:-1],
        padded[1:-1, 2:, 1:-1],
        padded[1:-1, :-2, 1:-1],
        padded[1:-1, 1:-1, 2:],
        padded[1:-1, 1:-1, :-2],
    ]
    return inside & ~np.logical_and.reduce(neighbours)


def brute_hd95(a, b, spacing):
    points_a = np.argwhere(brute_boundary(a)) * np.asarray(spacing)
    points_b = np.argwhere(brute_boundary(b)) * np.asarray(spacing)
    distances = cdist(points_a, points_b)
    return np.percentile(np.hstack([distances.min(axis=1), distances.min(axis=0)]), 95)


def test_dice_brute_force(random_pairs):
    """Dice matches a voxel-by-voxel count of the overlap"""
    for a, b in random_pairs:
        voxels_a = set(map(tuple, np.argwhere(a)))
        voxels_b = set(map(tuple, np.argwhere(b)))
        expected = 2 * len(voxels_a & voxels_b) / (len(voxels_a) + len(voxels_b))
        assert dice(a, b) == pytest.approx(expected)


def test_hd95_brute_force(random_pairs):
    """HD95 matches all-pairs distances between the two boundaries"""
    for a, b in random_pairs:
        assert np.array_equal(boundary(a), brute_boundary(a))
        assert hd95(a, b, SPACING) == pytest.approx(brute_hd95(a, b, SPACING), rel=1e-6)
        assert hd95(a, b, SPACING) == pytest.approx(hd95(b, a, SPACING))


def test_detection_rate_eight_lesions():
    """Six exact hits, one half-overlap at tau and one miss give 7 of 8"""
    labels = np.zeros((40, 20, 12), dtype=np.int16)
    pred = np.zeros(labels.shape, dtype=bool)
    corners = [(x, y) for y in (2, 12) for x in (2, 12, 22, 32)]
    for lesion_id, (x, y) in enumerate(corners, start=1):
        labels[x : x + 4, y : y + 4, 4:8] = lesion_id
        if lesion_id == 7:
            pred[x + 2 : x + 6, y : y + 4, 4:8] = True
        elif lesion_id != 8:
            pred[x : x + 4, y : y + 4, 4:8] = True
    results = match_and_detect(pred, SegMask(labels, SPACING), tau=0.5)
    assert len(results) == 8
    assert detection_rate(results) == 0.875
    assert results[6].dsc == 0.5 and results[6].detected
    assert not results[7].detected
    assert all(result.dsc == 1.0 for result in results[:6])


def test_match_and_detect(two_lesions):
    """One lesion found exactly, the other missed"""
    results = match_and_detect(cube(2), two_lesions)
    assert [r.lesion_id for r in results] == [1, 2]
    found, missed = results
    assert found.detected and found.dsc == 1.0 and found.hd95_mm == 0.0
    assert found.lesion_volume_cc == pytest.approx(0.064)
    assert not missed.detected and missed.dsc == 0.0 and missed.hd95_mm is None
    assert detection_rate(results) == 0.5


def test_match_tau(two_lesions):
    """Detection needs the overlap to reach tau"""
    pred = cube(2) | cube(4)
    assert match_and_detect(pred, two_lesions, tau=0.5)[0].detected
    assert not match_and_detect(pred, two_lesions, tau=0.85)[0].detected
    iou_result = match_and_detect(pred, two_lesions, tau=0.5, overlap="iou")[0]
    assert iou_result.overlap == pytest.approx(64 / 96)
    assert iou_result.detected


def test_match_one_to_one(two_lesions):
    """A component spanning both lesions is matched to one of them only"""
    pred = np.zeros((20, 12, 12), dtype=bool)
    pred[2:16, 2:6, 2:6] = True
    results = match_and_detect(pred, two_lesions, tau=0.1)
    assert sum(r.detected for r in results) == 1


def test_match_bad_overlap(two_lesions):
    """Only dice and iou are known overlaps"""
    with pytest.raises(ConfigValueError):
        match_and_detect(cube(2), two_lesions, overlap="jaccard")


def test_to_record(two_lesions):
    """Results become evaluation records"""
    result = match_and_detect(cube(2), two_lesions)[0]
    record = result.to_record("case001", ScanMeta(), ModelTag("cnn"))
    assert record.case_id == "case001"
    assert record.lesion_id == 1
    assert record.model_tag.arch == "cnn"


def test_detection_rate_empty():
    """No lesions, no rate"""
    assert detection_rate([]) is None


def test_wilcoxon_exact():
    """Six positive differences give the smallest exact two-sided p"""
    assert wilcoxon_signed_rank([1, 2, 3, 4, 5, 6], [0] * 6) == pytest.approx(2 / 64)


def test_wilcoxon_symmetric():
    """Swapping the samples keeps the p-value"""
    x = [0.8, 0.7, 0.9, 0.65, 0.72, 0.81, 0.6]
    y = [0.7, 0.72, 0.85, 0.5, 0.7, 0.8, 0.61]
    assert wilcoxon_signed_rank(x, y) == pytest.approx(wilcoxon_signed_rank(y, x))


def test_wilcoxon_zero_differences():
    """Identical samples give p = 1 with a warning"""
    with patch("logging.warning") as warning:
        assert wilcoxon_signed_rank([0.5] * 6, [0.5] * 6) == 1.0
    warning.assert_called_once()


@pytest.mark.parametrize(
    "x, y",
    [
        ([1, 2, 3], [0, 0]),
        ([1, 2, 3, 4], [0, 0, 0, 0]),
        ([1, 2, 3, 4, 5, 6], [1, 2, 0, 0, 5, 0]),
    ],
)
def test_wilcoxon_too_few(x, y):
    """Unequal lengths and fewer than five non-zero differences are rejected"""
    with pytest.raises(InputException):
        wilcoxon_signed_rank(x, y)
