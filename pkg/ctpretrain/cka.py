"""Linear centered kernel alignment with the unbiased HSIC estimator"""

from dataclasses import dataclass, field
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch

from . import ArchitectureMismatch, ConfigValueError, InputException
from .checkpoint import Checkpoint
from .models import Volume3D
from .network import forward_features
from .plotting import plot_cka_heatmap
from .preprocessing import crop_or_pad
from .volume_io import Cohort

POOLINGS = ("mean", "tokens")
TAP_CHOICE = "block outputs"


def _check_gram(name, gram: np.ndarray):
    if gram.ndim != 2 or gram.shape[0] != gram.shape[1]:
        raise InputException(f"Gram matrix {name} must be square, got {gram.shape}")
    if not np.allclose(gram, gram.T):
        raise InputException(f"Gram matrix {name} must be symmetric")


def hsic1_unbiased(gram_x, gram_y) -> float:
    """Unbiased HSIC of two n x n Gram matrices, n >= 4

    The diagonals are zeroed before evaluation.
    """
    gram_x = np.asarray(gram_x, dtype=np.float64)
    gram_y = np.asarray(gram_y, dtype=np.float64)
    _check_gram("X", gram_x)
    _check_gram("Y", gram_y)
    if gram_x.shape != gram_y.shape:
        raise InputException(f"Gram matrices differ in size: {gram_x.shape} vs {gram_y.shape}")
    n = gram_x.shape[0]
    if n < 4:
        raise InputException(f"Unbiased HSIC needs at least 4 samples, got {n}")
    x_tilde = gram_x.copy()
    y_tilde = gram_y.copy()
    np.fill_diagonal(x_tilde, 0.0)
    np.fill_diagonal(y_tilde, 0.0)
    trace = float(np.sum(x_tilde * y_tilde.T))
    sums = float(x_tilde.sum()) * float(y_tilde.sum()) / ((n - 1) * (n - 2))
    cross = 2.0 / (n - 1) * float(x_tilde.sum(axis=0) @ y_tilde.sum(axis=1))
    return (trace + sums - cross) / (n * (n - 3))


def gram_linear(features) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    return features @ features.T


def _degenerate(features: np.ndarray) -> bool:
    return bool(np.allclose(features, features.mean(axis=0, keepdims=True)))


def _ratio(hsic_xy: float, hsic_xx: float, hsic_yy: float) -> Optional[float]:
    if hsic_xx <= 0 or hsic_yy <= 0:
        return None
    return float(hsic_xy / np.sqrt(hsic_xx * hsic_yy))


def cka_full(features_a, features_b) -> Optional[float]:
    """CKA of two (samples, features) matrices; None for degenerate features"""
    features_a = np.asarray(features_a, dtype=np.float64)
    features_b = np.asarray(features_b, dtype=np.float64)
    if features_a.shape[0] != features_b.shape[0]:
        raise InputException(
            f"Sample counts differ: {features_a.shape[0]} vs {features_b.shape[0]}"
        )
    if _degenerate(features_a) or _degenerate(features_b):
        return None
    gram_a, gram_b = gram_linear(features_a), gram_linear(features_b)
    return _ratio(
        hsic1_unbiased(gram_a, gram_b),
        hsic1_unbiased(gram_a, gram_a),
        hsic1_unbiased(gram_b, gram_b),
    )


@dataclass
class ActivationBatch:
    """Paired activations of one minibatch"""

    features_a: np.ndarray
    features_b: np.ndarray
    labels: tuple = ("a", "b")
    sample_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.features_a = np.asarray(self.features_a, dtype=np.float64)
        self.features_b = np.asarray(self.features_b, dtype=np.float64)
        if self.features_a.shape[0] != self.features_b.shape[0]:
            raise InputException(
                f"Batch sides differ in samples: {self.features_a.shape[0]} "
                + f"vs {self.features_b.shape[0]}"
            )

    @property
    def n_samples(self) -> int:
        return self.features_a.shape[0]


def cka_minibatch(batches: Sequence[ActivationBatch]) -> Optional[float]:
    """CKA from HSIC terms averaged over minibatches

    :raises InputException: If there is no batch or one has fewer than 4 samples
    """
    batches = list(batches)
    if not batches:
        raise InputException("Minibatch CKA needs at least one batch")
    terms = np.zeros(3)
    for index, batch in enumerate(batches):
        if batch.n_samples < 4:
            raise InputException(f"Batch {index} has {batch.n_samples} samples, at least 4 needed")
        if _degenerate(batch.features_a) or _degenerate(batch.features_b):
            return None
        gram_a, gram_b = gram_linear(batch.features_a), gram_linear(batch.features_b)
        terms += (
            hsic1_unbiased(gram_a, gram_b),
            hsic1_unbiased(gram_a, gram_a),
            hsic1_unbiased(gram_b, gram_b),
        )
    return _ratio(*(terms / len(batches)))


@dataclass
class CKAMatrix:
    """Layer-by-layer CKA between two models; undefined entries are None"""

    values: List[List[Optional[float]]]
    labels_a: List[str]
    labels_b: List[str]
    model_tags: tuple
    cohort_filter: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @property
    def array(self) -> np.ndarray:
        """Values as floats with NaN for undefined entries"""
        return np.array(
            [[np.nan if value is None else value for value in row] for row in self.values],
            dtype=np.float64,
        )

    def to_dict(self) -> Dict:
        return {
            "values": self.values,
            "labels_a": list(self.labels_a),
            "labels_b": list(self.labels_b),
            "model_tags": list(self.model_tags),
            "cohort_filter": dict(self.cohort_filter),
            "metadata": dict(self.metadata),
        }

    def write(self, out_dir, stem: str = "cka") -> Dict[str, Path]:
        """CSV, JSON and heatmap files"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out_dir / f"{stem}.csv", "json": out_dir / f"{stem}.json"}
        pd.DataFrame(self.values, index=self.labels_a, columns=self.labels_b).to_csv(paths["csv"])
        with open(paths["json"], "w", encoding="utf-8") as output:
            json.dump(self.to_dict(), output, indent=2, sort_keys=True)
        title = " vs ".join(self.model_tags)
        paths.update(plot_cka_heatmap(self, out_dir / stem, title))
        return paths


def _load_volumes(cohort, subgroup_filter, target_spacing, window) -> List[Volume3D]:
    if isinstance(cohort, Cohort):
        cohort = cohort.filter(cohort_filter=subgroup_filter)
        volumes = [cohort.load_preprocessed(entry, target_spacing)[0] for entry in cohort]
    else:
        volumes = [vol for vol in cohort if vol.meta.matches(subgroup_filter)]
    return [crop_or_pad(vol, window) for vol in volumes]


def _layer_grams(model, batch: torch.Tensor, taps, pooling) -> List[np.ndarray]:
    features = forward_features(model, batch, taps)
    return [gram_linear(features.matrix(name, pooling)) for name in features.names]


def build_cka_matrix(
    ckpt_a: Checkpoint,
    ckpt_b: Checkpoint,
    cohort: Union[Cohort, Sequence[Volume3D]],
    taps: Optional[Sequence[str]] = None,
    subgroup_filter: Optional[dict] = None,
    batch_size: int = 4,
    seed: int = 0,
    pooling: str = "mean",
    target_spacing=(1.5, 1.5, 2.0),
) -> CKAMatrix:
    """CKA between every tapped layer of model a and every tapped layer of model b

    Both models see identical minibatches in the same seeded order.

    :raises ArchitectureMismatch: If the checkpoints differ in architecture
    :raises InputException: If the filtered cohort gives fewer than 2 usable batches
    """
    # pylint: disable-msg=too-many-arguments,too-many-locals
    config_a, config_b = ckpt_a.model_config, ckpt_b.model_config
    if config_a.arch != config_b.arch:
        raise ArchitectureMismatch(config_a.arch, config_b.arch)
    if config_a.input_shape != config_b.input_shape:
        raise ConfigValueError(
            "input_shape",
            (config_a.input_shape, config_b.input_shape),
            "models must share one input grid",
        )
    if pooling not in POOLINGS:
        raise ConfigValueError("pooling", pooling, f"must be one of {POOLINGS}")
    subgroup_filter = dict(subgroup_filter or {})
    min_batch = 4 if pooling == "mean" else 1
    if batch_size < min_batch:
        raise ConfigValueError("batch_size", batch_size, f"must be at least {min_batch}")

    model_a, model_b = ckpt_a.build(seed), ckpt_b.build(seed)
    model_a.eval()
    model_b.eval()
    taps = list(model_a.tap_modules()) if taps is None else list(taps)

    volumes = _load_volumes(cohort, subgroup_filter, target_spacing, config_a.input_shape)
    order = np.random.default_rng(seed).permutation(len(volumes))
    n_batches = len(order) // batch_size
    if n_batches < 2:
        raise InputException(
            f"CKA needs at least 2 batches of {batch_size}, "
            + f"the filtered cohort has {len(order)} volumes"
        )
    if len(order) % batch_size:
        logging.debug("Dropping %d volumes that don't fill a batch", len(order) % batch_size)

    n_a, n_b = len(taps), len(taps)
    cross = np.zeros((n_a, n_b))
    self_a, self_b = np.zeros(n_a), np.zeros(n_b)
    degenerate_a, degenerate_b = np.zeros(n_a, bool), np.zeros(n_b, bool)
    for index in range(n_batches):
        members = order[index * batch_size : (index + 1) * batch_size]
        batch = torch.from_numpy(np.stack([volumes[i].data for i in members])[:, None])
        grams_a = _layer_grams(model_a, batch, taps, pooling)
        grams_b = _layer_grams(model_b, batch, taps, pooling)
        for i, gram_a in enumerate(grams_a):
            self_a[i] += hsic1_unbiased(gram_a, gram_a)
            degenerate_a[i] |= np.allclose(gram_a, gram_a[0, 0])
            for j, gram_b in enumerate(grams_b):
                cross[i, j] += hsic1_unbiased(gram_a, gram_b)
        for j, gram_b in enumerate(grams_b):
            self_b[j] += hsic1_unbiased(gram_b, gram_b)
            degenerate_b[j] |= np.allclose(gram_b, gram_b[0, 0])

    cross, self_a, self_b = cross / n_batches, self_a / n_batches, self_b / n_batches
    values = [
        [
            None
            if degenerate_a[i] or degenerate_b[j]
            else _ratio(cross[i, j], self_a[i], self_b[j])
            for j in range(n_b)
        ]
        for i in range(n_a)
    ]
    logging.info(
        "CKA over %d layers, %d batches of %d (%s pooling)", n_a, n_batches, batch_size, pooling
    )
    return CKAMatrix(
        values=values,
        labels_a=taps,
        labels_b=taps,
        model_tags=(ckpt_a.tag.label, ckpt_b.tag.label),
        cohort_filter=subgroup_filter,
        metadata={
            "taps": TAP_CHOICE,
            "pooling": pooling,
            "batch_size": batch_size,
            "n_batches": n_batches,
            "seed": seed,
            "checkpoints": [ckpt_a.checkpoint_id, ckpt_b.checkpoint_id],
        },
    )
