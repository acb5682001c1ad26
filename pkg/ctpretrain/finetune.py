"""Supervised fine-tuning with cross-entropy + Dice and early stopping"""

from dataclasses import dataclass, field
import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from . import ArchitectureMismatch, ConfigValueError, InputException, NumericalException
from .checkpoint import Checkpoint, save_checkpoint, state_of
from .inference import infer_volume
from .metrics import dice
from .models import ModelBase, SegMask, Volume3D
from .network import ModelConfig, build_model, freeze_layers
from .pretrain import case_seed, make_optimizer, stack
from .preprocessing import crop_or_pad, random_crop
from .volume_io import Cohort


@dataclass
class FinetuneConfig(ModelBase):
    """Fine-tuning hyperparameters"""

    # pylint: disable-msg=too-many-instance-attributes

    lr: float = 2e-4
    epochs: int = 200
    warmup_epochs: int = 0
    batch_size: int = 2
    val_fraction: float = 0.1
    patience: int = 50
    target_spacing: tuple = (1.5, 1.5, 2.0)
    cohort_filter: dict = field(default_factory=dict)
    loss_weights: tuple = (1.0, 1.0)
    smooth: float = 1e-5
    weight_decay: float = 0.05
    freeze: list = field(default_factory=list)
    window_overlap: float = 0.5

    def __post_init__(self):
        for name in ("lr", "val_fraction", "smooth", "weight_decay", "window_overlap"):
            setattr(self, name, float(getattr(self, name)))
        self.target_spacing = tuple(float(s) for s in self.target_spacing)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.cohort_filter = dict(self.cohort_filter)
        self.freeze = list(self.freeze)
        if self.lr <= 0:
            raise ConfigValueError("lr", self.lr, "must be positive")
        if not 0 < self.val_fraction < 0.5:
            raise ConfigValueError("val_fraction", self.val_fraction, "must be in (0, 0.5)")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigValueError("warmup_epochs", self.warmup_epochs, "need 0 <= warmup < epochs")
        if self.patience < 0:
            raise ConfigValueError("patience", self.patience, "must not be negative")
        if len(self.loss_weights) != 2 or min(self.loss_weights) < 0:
            raise ConfigValueError("loss_weights", self.loss_weights, "need two weights >= 0")


def _labels(mask) -> torch.Tensor:
    if isinstance(mask, SegMask):
        mask = mask.labels
    return (torch.as_tensor(np.asarray(mask)) > 0).long()


def seg_loss(logits: torch.Tensor, mask, weights=(1.0, 1.0), smooth: float = 1e-5) -> torch.Tensor:
    """w_ce * cross-entropy + w_dice * (1 - soft Dice of the foreground class)

    ``logits`` is (B, C, D, H, W) or (C, D, H, W); ``mask`` holds matching labels.
    """
    target = _labels(mask).to(logits.device)
    if logits.dim() == 4:
        logits = logits.unsqueeze(0)
    if target.dim() == 3:
        target = target.unsqueeze(0)
    if logits.shape[:1] + logits.shape[2:] != target.shape:
        raise InputException(
            f"Logits {tuple(logits.shape)} don't match mask {tuple(target.shape)}"
        )
    w_ce, w_dice = weights
    cross_entropy = F.cross_entropy(logits, target)
    foreground = F.softmax(logits, dim=1)[:, 1]
    truth = target.float()
    intersection = (foreground * truth).sum()
    soft_dice = (2 * intersection + smooth) / (foreground.sum() + truth.sum() + smooth)
    return w_ce * cross_entropy + w_dice * (1 - soft_dice)


def _load_pairs(config: FinetuneConfig, cohort) -> List[Tuple[str, Volume3D, SegMask]]:
    if isinstance(cohort, Cohort):
        pairs = []
        for entry in cohort.filter(cohort_filter=config.cohort_filter):
            if not entry.mask:
                raise ConfigValueError("cohort", entry.case_id, "fine-tuning needs a mask per case")
            vol, mask = cohort.load_preprocessed(entry, config.target_spacing)
            pairs.append((entry.case_id, vol, mask))
        return pairs
    return [
        (f"case{index:03d}", vol, mask)
        for index, (vol, mask) in enumerate(cohort)
        if vol.meta.matches(config.cohort_filter)
    ]


def _pad_to(item, window):
    return crop_or_pad(item, tuple(max(size, w) for size, w in zip(item.shape, window)))


def split_cases(n_cases: int, val_fraction: float, seed: int) -> Tuple[List[int], List[int]]:
    """Seeded train/validation index split, at least one validation case when n >= 2"""
    order = [int(i) for i in np.random.default_rng(seed).permutation(n_cases)]
    n_val = max(1, int(round(val_fraction * n_cases))) if n_cases >= 2 else 0
    return sorted(order[n_val:]), sorted(order[:n_val])


def validation_dice(model, cases, overlap: float = 0.5) -> float:
    """Mean DSC of sliding-window predictions"""
    scores = [dice(infer_volume(model, vol, overlap=overlap), mask) for _, vol, mask in cases]
    return float(np.mean(scores))


def run_finetune(
    config: FinetuneConfig,
    cohort: Union[Cohort, Sequence[Tuple[Volume3D, SegMask]]],
    model_config: Optional[ModelConfig] = None,
    init: Optional[Checkpoint] = None,
    seed: int = 0,
    out_dir=None,
) -> Checkpoint:
    """Fine-tune a scratch or pretrained model and return its best-validation checkpoint

    :raises ConfigValueError: If the training split has no lesion voxels
    :raises ArchitectureMismatch: If ``model_config`` and ``init`` disagree on the architecture
    """
    # pylint: disable-msg=too-many-arguments,too-many-locals,too-many-statements
    if init is not None:
        if model_config is not None and model_config.arch != init.model_config.arch:
            raise ArchitectureMismatch(model_config.arch, init.model_config.arch)
        model_config = init.model_config
    if model_config is None:
        raise ConfigValueError("model_config", None, "needed without an initial checkpoint")

    cases = _load_pairs(config, cohort)
    if not cases:
        raise ConfigValueError("cohort", 0, "no cases left after the cohort filter")
    window = model_config.input_shape
    cases = [(case_id, _pad_to(vol, window), _pad_to(mask, window)) for case_id, vol, mask in cases]
    train_idx, val_idx = split_cases(len(cases), config.val_fraction, seed)
    train = [cases[i] for i in train_idx]
    val = [cases[i] for i in val_idx]
    if not val:
        logging.warning("Single-case cohort, validating on the training case")
        val = train
    if not any(mask.binary.any() for _, _, mask in train):
        train_ids = [case_id for case_id, _, _ in train]
        raise ConfigValueError("cohort", train_ids, "training split has no lesion voxels")

    torch.manual_seed(seed)
    if init is not None:
        model = init.build(seed)
        lineage, pretext, parent_id = init.lineage, init.pretext, init.checkpoint_id
    else:
        model = build_model(model_config, seed)
        lineage, pretext, parent_id = "scratch", "none", None
    frozen = freeze_layers(model, config.freeze)
    optimizer, scheduler = make_optimizer(
        model, config.lr, config.weight_decay, config.warmup_epochs, config.epochs
    )
    logging.info(
        "Fine-tuning %s (%s) on %d cases, validating on %d",
        model_config.arch,
        lineage,
        len(train),
        len(val),
    )

    best_dsc, best_epoch, best_state = -1.0, 0, None
    data_order, curve = [], []
    for epoch in range(config.epochs):
        model.train()
        order = np.random.default_rng(case_seed(seed, epoch)).permutation(len(train))
        data_order.append([train[i][0] for i in order])
        losses = []
        for start in range(0, len(order), config.batch_size):
            vols, masks = [], []
            for index in order[start : start + config.batch_size]:
                _, vol, mask = train[index]
                vol, mask = random_crop(vol, mask, window, case_seed(seed, epoch, index))
                vols.append(vol)
                masks.append(mask.labels)
            loss = seg_loss(model(stack(vols)), np.stack(masks), config.loss_weights, config.smooth)
            if not torch.isfinite(loss):
                raise NumericalException(
                    "segmentation loss", f"Non-finite loss at epoch {epoch + 1}"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(float(loss))
        scheduler.step()

        val_dsc = validation_dice(model, val, config.window_overlap)
        curve.append({"epoch": epoch + 1, "loss": float(np.mean(losses)), "val_dsc": val_dsc})
        logging.info(
            "Fine-tune epoch %d/%d loss=%.4f val_dsc=%.4f",
            epoch + 1,
            config.epochs,
            curve[-1]["loss"],
            val_dsc,
        )
        if val_dsc > best_dsc:
            best_dsc, best_epoch, best_state = val_dsc, epoch, state_of(model)
        if epoch - best_epoch >= config.patience:
            logging.info("Early stop at epoch %d, best epoch %d", epoch + 1, best_epoch + 1)
            break

    checkpoint = Checkpoint(
        model_config=model_config,
        model_state=best_state,
        epoch=best_epoch + 1,
        lineage=lineage,
        pretext=pretext,
        parent_id=parent_id,
        metadata={
            "stage": "finetune",
            "seed": seed,
            "best_epoch": best_epoch + 1,
            "best_val_dsc": best_dsc,
            "stopped_epoch": len(curve),
            "train_cases": [case_id for case_id, _, _ in train],
            "val_cases": [case_id for case_id, _, _ in val],
            "data_order": data_order,
            "frozen": frozen,
            "curve": curve,
        },
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(checkpoint, out_dir / "checkpoint.pt")
        pd.DataFrame(curve).to_csv(out_dir / "finetune_curve.csv", index=False)
    return checkpoint
