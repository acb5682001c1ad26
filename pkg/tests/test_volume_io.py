""" Basic functionality tests for volume and manifest io """

import numpy as np
import pytest

from ctpretrain import InputException, ResolutionException
from ctpretrain.models import ScanMeta, SegMask, Volume3D
from ctpretrain.volume_io import (
    Cohort,
    CohortEntry,
    file_hash,
    load_mask,
    load_volume,
    read_manifest,
    save_mask,
    save_volume,
    sidecar_path,
    write_manifest,
)


@pytest.fixture(name="volume")
def fixture_volume():
    """Small HU volume with metadata"""
    data = np.random.default_rng(1).normal(0.0, 100.0, size=(6, 5, 4))
    return Volume3D(data, (1.5, 1.5, 2.5), ScanMeta("contrast", "recon1", 5.0, "phantom-9"))


@pytest.fixture(name="mask")
def fixture_mask():
    """Two-lesion mask"""
    labels = np.zeros((6, 5, 4), dtype=np.int16)
    labels[1:3, 1:3, 1:3] = 1
    labels[5, 4, 3] = 2
    return SegMask(labels, (1.5, 1.5, 2.5))


@pytest.mark.parametrize("name", ["case.nii", "case.nii.gz", "case.raw"])
def test_volume_round_trip(tmp_path, volume, name):
    """Data, spacing and metadata survive every supported format"""
    save_volume(volume, tmp_path / name)
    loaded = load_volume(tmp_path / name)
    assert np.array_equal(loaded.data, volume.data)
    assert loaded.spacing == volume.spacing
    assert loaded.meta == volume.meta
    assert loaded.intensity == "hu"


def test_mask_round_trip(tmp_path, mask):
    """Labels and spacing survive NIfTI storage"""
    save_mask(mask, tmp_path / "mask.nii")
    loaded = load_mask(tmp_path / "mask.nii")
    assert np.array_equal(loaded.labels, mask.labels)
    assert loaded.spacing == mask.spacing


def test_sidecar_path():
    """Sidecars sit next to the volume with a .json suffix"""
    assert sidecar_path("a/case.nii.gz").name == "case.json"
    assert sidecar_path("a/case.raw").name == "case.json"


def test_unsupported_format(tmp_path, volume):
    """Unknown suffixes are input errors"""
    with pytest.raises(InputException):
        save_volume(volume, tmp_path / "case.png")


def test_missing_volume(tmp_path):
    """Missing files can't be resolved"""
    with pytest.raises(ResolutionException):
        load_volume(tmp_path / "nothing.nii")


def test_byte_identical_rewrite(tmp_path, volume):
    """Writing the same volume twice gives the same bytes"""
    save_volume(volume, tmp_path / "a.nii")
    save_volume(volume, tmp_path / "b.nii")
    assert file_hash(tmp_path / "a.nii") == file_hash(tmp_path / "b.nii")


def test_manifest_round_trip(tmp_path, volume, mask):
    """Cohort manifests keep paths relative to their folder"""
    save_volume(volume, tmp_path / "volumes" / "case000.nii")
    save_mask(mask, tmp_path / "masks" / "case000.nii")
    save_volume(volume, tmp_path / "volumes" / "wild000.nii")
    entries = [
        CohortEntry("case000", "volumes/case000.nii", "masks/case000.nii", volume.meta, "train"),
        CohortEntry("wild000", "volumes/wild000.nii", "", volume.meta, "wild"),
    ]
    write_manifest(entries, tmp_path / "cohort.json")
    cohort = read_manifest(tmp_path / "cohort.json")
    assert len(cohort) == 2
    assert cohort.root == tmp_path
    vol, loaded_mask = cohort.load(cohort.entries[0])
    assert loaded_mask.n_lesions == 2
    assert vol.meta.source_id == "phantom-9"
    _, no_mask = cohort.load(cohort.entries[1])
    assert no_mask is None


def test_cohort_filter(volume):
    """Filters combine split and metadata equality"""
    entries = [
        CohortEntry("a", "a.nii", meta=ScanMeta("contrast", "recon1"), split="train"),
        CohortEntry("b", "b.nii", meta=ScanMeta("contrast", "recon3"), split="train"),
        CohortEntry("c", "c.nii", meta=ScanMeta("non_contrast", "recon1"), split="test"),
    ]
    cohort = Cohort(entries)
    assert [e.case_id for e in cohort.filter(split="train")] == ["a", "b"]
    assert [e.case_id for e in cohort.filter(cohort_filter={"kernel_group": "recon1"})] == [
        "a",
        "c",
    ]
    assert len(cohort.filter(split="train", cohort_filter={"contrast": "non_contrast"})) == 0
    assert volume.meta.matches({"contrast": "contrast"})


def test_load_preprocessed(tmp_path, volume, mask):
    """Loading onto the working grid windows and resamples both items"""
    save_volume(volume, tmp_path / "v.nii")
    save_mask(mask, tmp_path / "m.nii")
    cohort = Cohort([CohortEntry("v", "v.nii", "m.nii", volume.meta)], tmp_path)
    vol, loaded_mask = cohort.load_preprocessed(cohort.entries[0], (1.5, 1.5, 1.25))
    assert vol.intensity == "unit"
    assert vol.shape == (6, 5, 8)
    loaded_mask.check_aligned(vol)


def test_missing_manifest(tmp_path):
    """A missing manifest is a resolution error"""
    with pytest.raises(ResolutionException):
        read_manifest(tmp_path / "cohort.json")
