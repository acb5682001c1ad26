"""Exponential-moving-average teacher"""

import copy
from dataclasses import dataclass
import math

import torch
from torch import nn

from . import ConfigValueError, IntegrityException


@dataclass
class TeacherState:
    """Gradient-free copy of the student, updated only through ema_update"""

    model: nn.Module
    momentum: float = 0.996

    @classmethod
    def from_student(cls, student: nn.Module, momentum: float = 0.996) -> "TeacherState":
        model = copy.deepcopy(student)
        for param in model.parameters():
            param.requires_grad_(False)
        model.eval()
        return cls(model, momentum)


@torch.no_grad()
def ema_update(teacher: TeacherState, student: nn.Module, momentum: float) -> TeacherState:
    """teacher <- momentum * teacher + (1 - momentum) * student, parameter by parameter

    :raises IntegrityException: If the parameter names or shapes differ
    """
    if not 0.0 <= momentum <= 1.0:
        raise ConfigValueError("momentum", momentum, "must be in [0, 1]")
    teacher_params = dict(teacher.model.named_parameters())
    student_params = dict(student.named_parameters())
    if teacher_params.keys() != student_params.keys():
        missing = sorted(teacher_params.keys() ^ student_params.keys())
        raise IntegrityException(f"Teacher and student parameters differ: {missing[:5]}")
    for name, param_t in teacher_params.items():
        param_s = student_params[name]
        if param_t.shape != param_s.shape:
            raise IntegrityException(
                f"Shape mismatch for {name}: teacher {tuple(param_t.shape)}, "
                + f"student {tuple(param_s.shape)}"
            )
        param_t.mul_(momentum).add_(param_s.detach(), alpha=1.0 - momentum)
    teacher.momentum = momentum
    return teacher


def cosine_momentum(epoch: int, total_epochs: int, start: float = 0.996, end: float = 1.0) -> float:
    """Momentum rising from start to end along a half cosine, end reached on the last epoch"""
    progress = min(1.0, epoch / max(1, total_epochs - 1))
    return end - (end - start) * (math.cos(math.pi * progress) + 1.0) / 2.0
