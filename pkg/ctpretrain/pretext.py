"""Pretext losses: masked image prediction, token distillation and contrastive InfoNCE"""

from dataclasses import dataclass, field, fields
from typing import Optional

import torch
from torch import nn
import torch.nn.functional as F

from . import ConfigValueError, InputException
from .masking import MaskSpec

TASKS = ("mip", "mpd", "itd", "contrastive")


def _zero():
    return torch.tensor(0.0)


@dataclass
class PretextLosses:
    """Per-task losses and their weighted total; unused tasks stay at zero"""

    mip: torch.Tensor = field(default_factory=_zero)
    mpd: torch.Tensor = field(default_factory=_zero)
    itd: torch.Tensor = field(default_factory=_zero)
    contrastive: torch.Tensor = field(default_factory=_zero)
    total: torch.Tensor = field(default_factory=_zero)

    def as_floats(self):
        return {item.name: float(getattr(self, item.name)) for item in fields(self)}


def _voxel_mask(mask, like: torch.Tensor) -> torch.Tensor:
    if isinstance(mask, MaskSpec):
        mask = torch.from_numpy(mask.voxel_mask())
    mask = torch.as_tensor(mask, device=like.device).bool()
    while mask.dim() < like.dim():
        mask = mask.unsqueeze(0) if mask.dim() < 4 else mask.unsqueeze(1)
    return mask.expand_as(like)


def mip_loss(predicted: torch.Tensor, target: torch.Tensor, mask) -> torch.Tensor:
    """Mean absolute error over masked voxels only

    :raises InputException: If the shapes differ or nothing is masked
    """
    if predicted.shape != target.shape:
        raise InputException(f"Prediction {tuple(predicted.shape)} vs target {tuple(target.shape)}")
    mask = _voxel_mask(mask, predicted)
    count = mask.sum()
    if count == 0:
        raise InputException("Masked image prediction needs at least one masked voxel")
    return (predicted - target).abs().masked_select(mask).sum() / count


def token_distill_loss(
    student_logits: torch.Tensor,
    teacher_logits: torch.Tensor,
    student_temperature: float = 0.1,
    teacher_temperature: float = 0.04,
    token_mask: Optional[torch.Tensor] = None,
    center: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Cross-entropy between sharpened teacher and student prototype distributions

    Logits are (..., protos). With token_mask only the selected tokens count (masked
    patch distillation); a single pooled token per sample gives image token distillation.
    """
    if student_temperature <= 0:
        raise ConfigValueError("student_temperature", student_temperature, "must be positive")
    if teacher_temperature <= 0:
        raise ConfigValueError("teacher_temperature", teacher_temperature, "must be positive")
    teacher_logits = teacher_logits.detach()
    if center is not None:
        teacher_logits = teacher_logits - center
    teacher_probs = F.softmax(teacher_logits / teacher_temperature, dim=-1)
    student_log_probs = F.log_softmax(student_logits / student_temperature, dim=-1)
    per_token = -(teacher_probs * student_log_probs).sum(dim=-1)
    if token_mask is not None:
        token_mask = torch.as_tensor(token_mask, device=per_token.device).bool()
        per_token = per_token.masked_select(token_mask.reshape(per_token.shape))
        if per_token.numel() == 0:
            raise InputException("Token mask selects no tokens")
    return per_token.mean()


def contrastive_loss(emb_a: torch.Tensor, emb_b: torch.Tensor, temperature: float = 0.1):
    """Symmetric InfoNCE with (a_i, b_i) as positives"""
    if emb_a.shape[0] < 2 or emb_a.shape != emb_b.shape:
        raise InputException(
            f"Contrastive loss needs two equal batches of at least 2, got {tuple(emb_a.shape)} "
            + f"and {tuple(emb_b.shape)}"
        )
    if temperature <= 0:
        raise ConfigValueError("contrastive_temperature", temperature, "must be positive")
    emb_a = F.normalize(emb_a, dim=-1)
    emb_b = F.normalize(emb_b, dim=-1)
    logits = emb_a @ emb_b.T / temperature
    labels = torch.arange(emb_a.shape[0], device=emb_a.device)
    return (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels)) / 2


class TeacherCenter(nn.Module):
    """Running mean of teacher logits subtracted before the teacher softmax"""

    def __init__(self, proto_dim: int, momentum: float = 0.9):
        super().__init__()
        self.momentum = momentum
        self.register_buffer("center", torch.zeros(1, proto_dim))

    @torch.no_grad()
    def update(self, teacher_logits: torch.Tensor):
        flat = teacher_logits.reshape(-1, teacher_logits.shape[-1])
        batch_center = flat.mean(dim=0, keepdim=True)
        self.center.mul_(self.momentum).add_(batch_center, alpha=1.0 - self.momentum)
