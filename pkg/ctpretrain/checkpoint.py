"""Versioned checkpoint container"""

from dataclasses import dataclass, field
import logging
from pathlib import Path
import random
from typing import Dict, Optional
import uuid

import numpy as np
import torch

from . import IntegrityException, ResolutionException
from .models import ModelTag
from .network import ModelConfig, SegmentationModel, build_model

FORMAT = "ctpretrain-checkpoint"
VERSION = 1
LINEAGES = ("scratch", "self", "wild", "wild_then_self")


def capture_rng_state() -> Dict:
    return {
        "python": random.getstate(),
        "numpy": np.random.get_state(),
        "torch": torch.get_rng_state(),
    }


def restore_rng_state(state: Dict):
    random.setstate(state["python"])
    np.random.set_state(state["numpy"])
    torch.set_rng_state(state["torch"])


@dataclass
class Checkpoint:
    """Weights plus everything needed to resume or trace a model"""

    # pylint: disable-msg=too-many-instance-attributes

    model_config: ModelConfig
    model_state: Dict
    epoch: int = 0
    lineage: str = "scratch"
    pretext: str = "none"
    parent_id: Optional[str] = None
    optimizer_state: Optional[Dict] = None
    scheduler_state: Optional[Dict] = None
    teacher_state: Optional[Dict] = None
    rng_state: Dict = field(default_factory=capture_rng_state)
    metadata: Dict = field(default_factory=dict)
    checkpoint_id: str = field(default_factory=lambda: uuid.uuid4().hex)
    version: int = VERSION

    @property
    def tag(self) -> ModelTag:
        return ModelTag(self.model_config.arch, self.lineage, self.pretext)

    def build(self, seed: int = 0) -> SegmentationModel:
        """Model with these weights loaded"""
        model = build_model(self.model_config, seed)
        model.load_state_dict(self.model_state)
        return model


def state_of(model: torch.nn.Module) -> Dict:
    """Detached CPU copy of a state dict"""
    return {key: value.detach().cpu().clone() for key, value in model.state_dict().items()}


def save_checkpoint(checkpoint: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "header": {"format": FORMAT, "version": checkpoint.version},
        "checkpoint_id": checkpoint.checkpoint_id,
        "model_config": checkpoint.model_config.to_dict(),
        "model_state": checkpoint.model_state,
        "epoch": checkpoint.epoch,
        "lineage": checkpoint.lineage,
        "pretext": checkpoint.pretext,
        "parent_id": checkpoint.parent_id,
        "optimizer_state": checkpoint.optimizer_state,
        "scheduler_state": checkpoint.scheduler_state,
        "teacher_state": checkpoint.teacher_state,
        "rng_state": checkpoint.rng_state,
        "metadata": checkpoint.metadata,
    }
    torch.save(payload, path)
    logging.info(
        "Saved checkpoint %s (epoch %d) to %s", checkpoint.checkpoint_id, checkpoint.epoch, path
    )
    return path


def load_checkpoint(path) -> Checkpoint:
    """Checkpoint saved by save_checkpoint

    :raises ResolutionException: If the file is missing
    :raises IntegrityException: If the file isn't a checkpoint of a supported version
    """
    path = Path(path)
    if not path.is_file():
        raise ResolutionException(str(path), "checkpoint missing")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    header = payload.get("header", {}) if isinstance(payload, dict) else {}
    if header.get("format") != FORMAT:
        raise IntegrityException(f"{path} isn't a {FORMAT} file")
    if header.get("version") != VERSION:
        raise IntegrityException(f"Unsupported checkpoint version {header.get('version')}")
    return Checkpoint(
        model_config=ModelConfig.from_dict(payload["model_config"]),
        model_state=payload["model_state"],
        epoch=payload["epoch"],
        lineage=payload["lineage"],
        pretext=payload["pretext"],
        parent_id=payload["parent_id"],
        optimizer_state=payload["optimizer_state"],
        scheduler_state=payload["scheduler_state"],
        teacher_state=payload["teacher_state"],
        rng_state=payload["rng_state"],
        metadata=payload["metadata"],
        checkpoint_id=payload["checkpoint_id"],
        version=header["version"],
    )
