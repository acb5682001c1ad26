"""Self-distillation pretraining with an EMA teacher"""

from dataclasses import dataclass, field, replace
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch

from . import ConfigValueError, NumericalException
from .checkpoint import Checkpoint, save_checkpoint, state_of
from .ema import TeacherState, cosine_momentum, ema_update
from .masking import DEFAULT_BLOCK_SIZE, AugmentConfig, make_views, token_mask_from_blocks
from .models import ModelBase, Volume3D
from .network import ModelConfig, build_model
from .pretext import (
    TASKS,
    PretextLosses,
    TeacherCenter,
    contrastive_loss,
    mip_loss,
    token_distill_loss,
)
from .volume_io import Cohort

REGIMES = ("self", "wild", "wild_then_self")
TASK_PRESETS = {
    "mip": {"mip": 1.0},
    "itd": {"itd": 1.0},
    "itd_mpd": {"itd": 1.0, "mpd": 1.0},
    "contrastive": {"contrastive": 1.0},
    "smit": {"mip": 1.0, "mpd": 1.0, "itd": 1.0},
}


@dataclass
class PretrainConfig(ModelBase):
    """Pretraining hyperparameters

    ``tasks`` maps task names to weights and takes precedence over ``preset``.
    """

    # pylint: disable-msg=too-many-instance-attributes

    preset: str = "smit"
    tasks: dict = field(default_factory=dict)
    mask_ratio: float = 0.75
    block_size: tuple = DEFAULT_BLOCK_SIZE
    epochs: int = 50
    warmup_epochs: int = 5
    base_lr: float = 8e-4
    weight_decay: float = 0.05
    ema_momentum: tuple = (0.996, 1.0)
    student_temperature: float = 0.1
    teacher_temperature: float = 0.04
    center_momentum: float = 0.9
    contrastive_temperature: float = 0.1
    batch_size: int = 2
    regime: str = "self"
    drop_path_rate: float = 0.1
    checkpoint_every: int = 0
    target_spacing: tuple = (1.5, 1.5, 2.0)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        for name in (
            "mask_ratio",
            "base_lr",
            "weight_decay",
            "student_temperature",
            "teacher_temperature",
            "center_momentum",
            "contrastive_temperature",
            "drop_path_rate",
        ):
            setattr(self, name, float(getattr(self, name)))
        self.block_size = tuple(int(b) for b in self.block_size)
        self.ema_momentum = tuple(float(m) for m in self.ema_momentum)
        self.target_spacing = tuple(float(s) for s in self.target_spacing)
        self.tasks = {task: float(weight) for task, weight in dict(self.tasks).items()}
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig.from_dict(self.augment)
        self.validate()

    @property
    def weights(self) -> Dict[str, float]:
        """Weight of every task, zero for unused ones"""
        chosen = self.tasks or TASK_PRESETS[self.preset]
        return {task: chosen.get(task, 0.0) for task in TASKS}

    @property
    def pretext_name(self) -> str:
        active = {task: w for task, w in self.weights.items() if w > 0}
        for name, weights in TASK_PRESETS.items():
            if weights == active:
                return name
        return "+".join(sorted(active))

    def validate(self):
        """:raises ConfigValueError: On an inconsistent setting"""
        if not self.tasks and self.preset not in TASK_PRESETS:
            raise ConfigValueError("preset", self.preset, f"must be one of {sorted(TASK_PRESETS)}")
        unknown = set(self.tasks) - set(TASKS)
        if unknown:
            raise ConfigValueError("tasks", sorted(unknown), f"known tasks are {TASKS}")
        weights = self.weights
        if any(w < 0 for w in weights.values()) or not any(w > 0 for w in weights.values()):
            raise ConfigValueError("tasks", weights, "need at least one positive weight")
        if not 0 <= self.mask_ratio <= 1:
            raise ConfigValueError("mask_ratio", self.mask_ratio, "must be in [0, 1]")
        if self.mask_ratio == 0 and (weights["mip"] > 0 or weights["mpd"] > 0):
            raise ConfigValueError(
                "mask_ratio", self.mask_ratio, "mip and mpd need masked blocks"
            )
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigValueError(
                "warmup_epochs", self.warmup_epochs, f"need 0 <= warmup < epochs ({self.epochs})"
            )
        if self.regime not in REGIMES:
            raise ConfigValueError("regime", self.regime, f"must be one of {REGIMES}")
        start, end = self.ema_momentum
        if not 0 <= start <= end <= 1:
            raise ConfigValueError("ema_momentum", self.ema_momentum, "need 0 <= start <= end <= 1")
        if self.base_lr <= 0:
            raise ConfigValueError("base_lr", self.base_lr, "must be positive")
        if self.batch_size < 1 or (weights["contrastive"] > 0 and self.batch_size < 2):
            raise ConfigValueError("batch_size", self.batch_size, "contrastive needs at least 2")


def warmup_cosine(epoch: int, warmup_epochs: int, total_epochs: int) -> float:
    """Learning-rate factor: linear warmup up to 1 at ``warmup_epochs``, then cosine to 0"""
    if epoch < warmup_epochs:
        return (epoch + 1) / (warmup_epochs + 1)
    progress = (epoch - warmup_epochs) / max(1, total_epochs - 1 - warmup_epochs)
    return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


def make_optimizer(model, lr, weight_decay, warmup_epochs, total_epochs):
    """AdamW over trainable parameters with a per-epoch warmup/cosine schedule"""
    params = [param for param in model.parameters() if param.requires_grad]
    optimizer = torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda epoch: warmup_cosine(epoch, warmup_epochs, total_epochs)
    )
    return optimizer, scheduler


def case_seed(*keys) -> int:
    """Deterministic 32-bit seed derived from integer keys"""
    return int(np.random.SeedSequence([int(key) for key in keys]).generate_state(1)[0])


def stack(volumes: Sequence[Volume3D]) -> torch.Tensor:
    """(B, 1, D, H, W) tensor from equally shaped volumes"""
    return torch.from_numpy(np.stack([vol.data for vol in volumes])[:, None].astype(np.float32))


def _load_volumes(cohort, target_spacing) -> List[Volume3D]:
    if isinstance(cohort, Cohort):
        return [cohort.load_preprocessed(entry, target_spacing)[0] for entry in cohort]
    return list(cohort)


class _Pretrainer:
    """Holds the student, teacher and centres of one pretraining run"""

    def __init__(self, config: PretrainConfig, model_config: ModelConfig, init, seed):
        self.config = config
        self.weights = config.weights
        self.model_config = model_config
        student_config = replace(model_config, drop_path_rate=config.drop_path_rate)
        self.student = build_model(student_config, seed)
        if init is not None:
            self.student.load_state_dict(init.model_state)
        self.teacher = TeacherState.from_student(self.student, config.ema_momentum[0])
        self.center_patch = TeacherCenter(model_config.proto_dim, config.center_momentum)
        self.center_global = TeacherCenter(model_config.proto_dim, config.center_momentum)
        self.outputs = []
        if self.weights["mip"] > 0:
            self.outputs.append("recon")
        if self.weights["mpd"] > 0:
            self.outputs.append("patch")
        if self.weights["itd"] > 0:
            self.outputs.append("global")
        if self.weights["contrastive"] > 0:
            self.outputs.append("contrast")

    def _token_masks(self, views, grid) -> torch.Tensor:
        masks = [token_mask_from_blocks(view.mask, grid).reshape(-1) for view in views]
        return torch.from_numpy(np.stack(masks))

    def losses(self, views) -> PretextLosses:
        config = self.config
        student_in = stack([view.student_view for view in views])
        embed_mask = None
        if config.mask_ratio > 0:
            embed_mask = self._token_masks(views, self.student.embed_grid)
        out = self.student.forward_pretrain(student_in, embed_mask, self.outputs)
        losses = PretextLosses()

        if self.weights["mip"] > 0:
            voxel_mask = torch.from_numpy(np.stack([view.mask.voxel_mask() for view in views]))
            target = stack([view.recon_target for view in views])
            losses.mip = mip_loss(out.recon, target, voxel_mask)
        if self.weights["mpd"] > 0:
            with torch.no_grad():
                aligned = self.teacher.model.forward_pretrain(
                    stack([view.teacher_view_aligned for view in views]), outputs=("patch",)
                ).patch_logits
            token_mask = self._token_masks(views, self.student.token_grid)
            if not token_mask.any():
                logging.debug("No token reaches the masking threshold, distilling all tokens")
                token_mask = None
            losses.mpd = token_distill_loss(
                out.patch_logits,
                aligned,
                config.student_temperature,
                config.teacher_temperature,
                token_mask,
                self.center_patch.center,
            )
            self.center_patch.update(aligned)
        if self.weights["itd"] > 0:
            with torch.no_grad():
                global_logits = self.teacher.model.forward_pretrain(
                    stack([view.teacher_view_global for view in views]), outputs=("global",)
                ).global_logits
            losses.itd = token_distill_loss(
                out.global_logits,
                global_logits,
                config.student_temperature,
                config.teacher_temperature,
                None,
                self.center_global.center,
            )
            self.center_global.update(global_logits)
        if self.weights["contrastive"] > 0:
            other = self.student.forward_pretrain(
                stack([view.teacher_view_global for view in views]), outputs=("contrast",)
            ).contrast
            losses.contrastive = contrastive_loss(
                out.contrast, other, config.contrastive_temperature
            )
        losses.total = sum(
            weight * getattr(losses, task) for task, weight in self.weights.items() if weight > 0
        )
        return losses

    def teacher_state(self) -> Dict:
        return {
            "model": state_of(self.teacher.model),
            "momentum": self.teacher.momentum,
            "center_patch": self.center_patch.center.clone(),
            "center_global": self.center_global.center.clone(),
        }


def run_pretraining(
    config: PretrainConfig,
    cohort: Union[Cohort, Sequence[Volume3D]],
    model_config: ModelConfig,
    init: Optional[Checkpoint] = None,
    seed: int = 0,
    out_dir=None,
) -> Checkpoint:
    """Pretrain a student on a cohort and return its final checkpoint

    The loss curve is kept in the checkpoint metadata and, with ``out_dir``, written
    as ``loss_curve.csv`` next to the periodic and final checkpoints.

    :raises ConfigValueError: On an empty cohort or a missing stage-one checkpoint
    :raises NumericalException: If a loss turns non-finite; a diagnostic checkpoint is written first
    """
    # pylint: disable-msg=too-many-arguments,too-many-locals
    if config.regime == "wild_then_self" and init is None:
        raise ConfigValueError("init", None, "wild_then_self needs a wild-pretrained checkpoint")
    volumes = _load_volumes(cohort, config.target_spacing)
    if not volumes:
        raise ConfigValueError("cohort", 0, "pretraining cohort is empty")
    out_dir = Path(out_dir) if out_dir else None

    torch.manual_seed(seed)
    trainer = _Pretrainer(config, model_config, init, seed)
    optimizer, scheduler = make_optimizer(
        trainer.student, config.base_lr, config.weight_decay, config.warmup_epochs, config.epochs
    )
    parent_id = init.checkpoint_id if init is not None else None
    crop_shape = model_config.input_shape
    curve = []

    def checkpoint(epoch, **metadata):
        return Checkpoint(
            model_config=model_config,
            model_state=state_of(trainer.student),
            epoch=epoch,
            lineage=config.regime,
            pretext=config.pretext_name,
            parent_id=parent_id,
            optimizer_state=optimizer.state_dict(),
            scheduler_state=scheduler.state_dict(),
            teacher_state=trainer.teacher_state(),
            metadata=dict(metadata, seed=seed, loss_curve=list(curve)),
        )

    for epoch in range(config.epochs):
        trainer.student.train()
        momentum = cosine_momentum(epoch, config.epochs, *config.ema_momentum)
        lr = optimizer.param_groups[0]["lr"]
        order = np.random.default_rng(case_seed(seed, epoch)).permutation(len(volumes))
        totals = dict.fromkeys(PretextLosses().as_floats(), 0.0)
        batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            if trainer.weights["contrastive"] > 0 and len(batch) < 2:
                continue
            views = [
                make_views(
                    volumes[index],
                    crop_shape,
                    config.mask_ratio,
                    config.augment,
                    case_seed(seed, epoch, index),
                    config.block_size,
                )
                for index in batch
            ]
            losses = trainer.losses(views)
            if not torch.isfinite(losses.total):
                if out_dir is not None:
                    save_checkpoint(
                        checkpoint(epoch, diagnostic=losses.as_floats()),
                        out_dir / "diagnostic.pt",
                    )
                raise NumericalException("pretrain loss", f"Non-finite loss at epoch {epoch + 1}")
            optimizer.zero_grad()
            losses.total.backward()
            optimizer.step()
            ema_update(trainer.teacher, trainer.student, momentum)
            for key, value in losses.as_floats().items():
                totals[key] += value
            batches += 1
        scheduler.step()

        row = {"epoch": epoch + 1}
        row.update({key: value / max(1, batches) for key, value in totals.items()})
        row.update({"lr": lr, "momentum": momentum})
        curve.append(row)
        logging.info(
            "Pretrain epoch %d/%d total=%.4f lr=%.2e momentum=%.5f",
            epoch + 1,
            config.epochs,
            row["total"],
            lr,
            momentum,
        )
        every = config.checkpoint_every
        if out_dir is not None and every and (epoch + 1) % every == 0:
            save_checkpoint(checkpoint(epoch + 1), out_dir / f"checkpoint_e{epoch + 1:04d}.pt")

    final = checkpoint(config.epochs)
    if out_dir is not None:
        save_checkpoint(final, out_dir / "checkpoint.pt")
        pd.DataFrame(curve).to_csv(out_dir / "loss_curve.csv", index=False)
    return final
