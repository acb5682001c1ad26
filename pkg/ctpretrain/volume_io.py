"""Reading and writing volumes, masks and cohort manifests"""

from dataclasses import dataclass, field
import hashlib
import json
import logging
from pathlib import Path
from typing import List

import nibabel as nib
import numpy as np

from . import InputException, ResolutionException
from .models import ModelBase, ScanMeta, SegMask, Volume3D
from .preprocessing import preprocess_pair

NIFTI_SUFFIXES = (".nii", ".nii.gz")
RAW_SUFFIX = ".raw"


def _is_nifti(path: Path) -> bool:
    return path.name.endswith(NIFTI_SUFFIXES)


def sidecar_path(path) -> Path:
    """JSON sidecar next to a volume file: ``case.nii`` -> ``case.json``"""
    path = Path(path)
    name = path.name
    for suffix in NIFTI_SUFFIXES + (RAW_SUFFIX,):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return path.with_name(name + ".json")


def _write_json(path: Path, payload):
    with open(path, "w", encoding="utf-8") as out:
        json.dump(payload, out, indent=2, sort_keys=True)
        out.write("\n")


def _read_json(path: Path):
    if not path.is_file():
        raise ResolutionException(str(path), "sidecar missing")
    with open(path, "r", encoding="utf-8") as sidecar:
        return json.load(sidecar)


def _save_array(path: Path, array: np.ndarray, spacing, dtype: str, sidecar: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    if _is_nifti(path):
        image = nib.Nifti1Image(array.astype(dtype), np.diag(list(spacing) + [1.0]))
        image.header.set_zooms(spacing)
        nib.save(image, str(path))
    elif path.suffix == RAW_SUFFIX:
        array.astype(dtype).tofile(path)
        sidecar = dict(sidecar, shape=list(array.shape), dtype=dtype)
    else:
        raise InputException(f"Unsupported volume format: {path}")
    _write_json(sidecar_path(path), sidecar)


def _load_array(path: Path):
    if not path.is_file():
        raise ResolutionException(str(path))
    sidecar = _read_json(sidecar_path(path))
    if _is_nifti(path):
        image = nib.load(str(path))
        array = np.asarray(image.dataobj)
        spacing = tuple(float(z) for z in image.header.get_zooms()[:3])
    elif path.suffix == RAW_SUFFIX:
        array = np.fromfile(path, dtype=sidecar["dtype"]).reshape(sidecar["shape"])
        spacing = tuple(sidecar["spacing"])
    else:
        raise InputException(f"Unsupported volume format: {path}")
    return array, spacing, sidecar


def save_volume(vol: Volume3D, path):
    """Write a volume as NIfTI-1 (``.nii``/``.nii.gz``) or raw float32 (``.raw``)"""
    path = Path(path)
    sidecar = {
        "spacing": list(vol.spacing),
        "meta": vol.meta.to_dict(),
        "intensity": vol.intensity,
    }
    _save_array(path, vol.data, vol.spacing, "<f4", sidecar)
    logging.debug("Saved volume %s shape=%s", path, vol.shape)


def load_volume(path) -> Volume3D:
    array, spacing, sidecar = _load_array(Path(path))
    return Volume3D(
        array.astype(np.float32),
        spacing,
        ScanMeta.from_dict(sidecar["meta"]),
        sidecar.get("intensity", "hu"),
    )


def save_mask(mask: SegMask, path):
    path = Path(path)
    _save_array(path, mask.labels, mask.spacing, "<i2", {"spacing": list(mask.spacing)})


def load_mask(path) -> SegMask:
    array, spacing, _ = _load_array(Path(path))
    return SegMask(array.astype(np.int16), spacing)


@dataclass
class CohortEntry(ModelBase):
    """One case of a cohort manifest; paths are relative to the manifest"""

    case_id: str
    volume: str
    mask: str = ""
    meta: ScanMeta = field(default_factory=ScanMeta)
    split: str = "train"


class Cohort:
    """Cohort manifest loaded from disk"""

    def __init__(self, entries: List[CohortEntry], root="."):
        self.entries = list(entries)
        self.root = Path(root)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def filter(self, split=None, cohort_filter=None) -> "Cohort":
        """Subset by split name and ScanMeta equality filter"""
        entries = [
            entry
            for entry in self.entries
            if (split is None or entry.split == split) and entry.meta.matches(cohort_filter)
        ]
        logging.info(
            "Cohort filter split=%s %s kept %d of %d cases",
            split,
            dict(cohort_filter or {}),
            len(entries),
            len(self.entries),
        )
        return Cohort(entries, self.root)

    def load(self, entry: CohortEntry):
        """Load the volume and mask (or None) of an entry"""
        vol = load_volume(self.root / entry.volume)
        mask = load_mask(self.root / entry.mask) if entry.mask else None
        return vol, mask

    def load_preprocessed(self, entry: CohortEntry, target_spacing, shape=None):
        """Load an entry and bring volume and mask onto the working grid"""
        return preprocess_pair(*self.load(entry), target_spacing, shape)


def write_manifest(entries: List[CohortEntry], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_json(path, [entry.to_dict() for entry in entries])
    logging.info("Wrote cohort manifest %s with %d cases", path, len(entries))


def read_manifest(path) -> Cohort:
    path = Path(path)
    if not path.is_file():
        raise ResolutionException(str(path), "cohort manifest missing")
    with open(path, "r", encoding="utf-8") as manifest:
        entries = [CohortEntry.from_dict(item) for item in json.load(manifest)]
    return Cohort(entries, path.parent)


def file_hash(path) -> str:
    """SHA-256 of a file's bytes"""
    digest = hashlib.sha256()
    with open(path, "rb") as content:
        for chunk in iter(lambda: content.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
