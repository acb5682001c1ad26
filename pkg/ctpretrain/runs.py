"""Content-addressed run directories with immutable manifests"""

from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime, timezone
import json
import logging
import os
from pathlib import Path
from typing import List, Optional

import yaml

from . import IntegrityException, ResolutionException, RunLockedException
from .checkpoint import LINEAGES
from .experiment import config_hash
from .models import ModelBase

MANIFEST = "manifest.json"
LOCK = ".lock"
KINDS = ("pretrain", "finetune", "evaluate", "cka")


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest(ModelBase):
    """Record of one finished run"""

    # pylint: disable-msg=too-many-instance-attributes

    run_id: str
    kind: str
    config_hash: str
    seed: int = 0
    lineage: str = "scratch"
    parent_runs: list = field(default_factory=list)
    dataset_hash: str = ""
    checkpoint_id: Optional[str] = None
    metrics: dict = field(default_factory=dict)
    created_at: str = ""
    finished_at: str = ""
    files: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise IntegrityException(f"Unknown run kind '{self.kind}' in run {self.run_id}")
        if self.lineage not in LINEAGES + ("none",):
            raise IntegrityException(f"Unknown lineage '{self.lineage}' in run {self.run_id}")


class RunStore:
    """Runs live under ``root/<kind>-<hash[:12]>-s<seed>/``"""

    def __init__(self, root):
        self.root = Path(root)

    @staticmethod
    def run_id(kind: str, payload, seed: int) -> str:
        """Id derived from the kind, the hash of everything that determines the run, and the seed"""
        return f"{kind}-{config_hash(payload)[:12]}-s{seed}"

    def run_dir(self, run_id: str) -> Path:
        return self.root / run_id

    def is_complete(self, run_id: str) -> bool:
        return (self.run_dir(run_id) / MANIFEST).is_file()

    def resolve(self, reference) -> RunManifest:
        """Manifest of a run given by id or by directory

        :raises ResolutionException: If no finished run matches
        """
        if reference is None:
            raise ResolutionException("None", "no run given")
        path = Path(reference)
        run_dir = path if path.is_dir() else self.run_dir(str(reference))
        manifest_path = run_dir / MANIFEST
        if not manifest_path.is_file():
            raise ResolutionException(str(reference), f"no manifest under {manifest_path.parent}")
        with open(manifest_path, "r", encoding="utf-8") as source:
            manifest = RunManifest.from_dict(json.load(source))
        logging.debug("Resolved %s to %s", reference, manifest_path.parent)
        return manifest

    def path_of(self, manifest: RunManifest, name: str) -> Path:
        """Absolute path of a file recorded in a manifest"""
        if name not in manifest.files:
            raise ResolutionException(f"{manifest.run_id}:{name}", "file not recorded")
        return self.run_dir(manifest.run_id) / manifest.files[name]

    def lineage_chain(self, reference) -> List[RunManifest]:
        """The run followed by its first parent, that parent's first parent, and so on"""
        chain = [self.resolve(reference)]
        seen = {chain[0].run_id}
        while chain[-1].parent_runs:
            parent = chain[-1].parent_runs[0]
            if parent in seen:
                raise IntegrityException(f"Cycle in lineage of {chain[0].run_id} at {parent}")
            seen.add(parent)
            chain.append(self.resolve(parent))
        return chain

    def list_runs(self, kind: Optional[str] = None) -> List[RunManifest]:
        if not self.root.is_dir():
            return []
        manifests = [
            self.resolve(path)
            for path in sorted(self.root.iterdir())
            if (path / MANIFEST).is_file()
        ]
        return [manifest for manifest in manifests if kind is None or manifest.kind == kind]

    @contextmanager
    def lock(self, run_id: str):
        """Exclusive writer lock on a run directory

        :raises RunLockedException: If another writer holds the lock
        """
        run_dir = self.run_dir(run_id)
        run_dir.mkdir(parents=True, exist_ok=True)
        lock_path = run_dir / LOCK
        try:
            handle = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise RunLockedException(run_dir) from exc
        try:
            os.write(handle, str(os.getpid()).encode("ascii"))
            os.close(handle)
            yield run_dir
        finally:
            lock_path.unlink(missing_ok=True)

    def write_config(self, run_id: str, config: dict) -> Path:
        path = self.run_dir(run_id) / "config.yml"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as output:
            yaml.safe_dump(config, output, sort_keys=True)
        return path

    def write_manifest(self, manifest: RunManifest, force: bool = False) -> Path:
        """Write a manifest once

        :raises IntegrityException: If the run already has one and ``force`` isn't set
        """
        path = self.run_dir(manifest.run_id) / MANIFEST
        if path.exists() and not force:
            raise IntegrityException(f"Run {manifest.run_id} already has a manifest")
        path.parent.mkdir(parents=True, exist_ok=True)
        manifest.finished_at = manifest.finished_at or utc_now()
        with open(path, "w", encoding="utf-8") as output:
            json.dump(manifest.to_dict(), output, indent=2, sort_keys=True)
        logging.info(
            "Run %s finished (%s, lineage %s)", manifest.run_id, manifest.kind, manifest.lineage
        )
        return path
