""" Basic functionality tests for centered kernel alignment """

import json

import numpy as np
import pandas as pd
import pytest
from scipy.stats import ortho_group

from ctpretrain import ArchitectureMismatch, ConfigValueError, InputException
from ctpretrain.checkpoint import Checkpoint, state_of
from ctpretrain.cka import (
    ActivationBatch,
    CKAMatrix,
    build_cka_matrix,
    cka_full,
    cka_minibatch,
    gram_linear,
    hsic1_unbiased,
)
from ctpretrain.finetune import FinetuneConfig, run_finetune
from ctpretrain.models import ScanMeta, SegMask, Volume3D
from ctpretrain.network import build_model, preset


def small_checkpoint(arch="cnn", seed=0):
    if arch == "cnn":
        config = preset(
            "cnn", "desk", input_shape=(16, 16, 16), embed_dim=2, decoder_channels=(8, 4, 4)
        )
    else:
        config = preset(
            "vit",
            "desk",
            input_shape=(16, 16, 16),
            embed_dim=16,
            depths=(3,),
            num_heads=(2,),
            decoder_channels=(8, 8, 4, 4),
        )
    return Checkpoint(config, state_of(build_model(config, seed)))


@pytest.fixture(name="features")
def fixture_features():
    """Random activations of 12 samples"""
    return np.random.default_rng(0).normal(size=(12, 6))


@pytest.fixture(name="volumes")
def fixture_volumes():
    """Sixteen random volumes of varying brightness, half with contrast"""
    rng = np.random.default_rng(3)
    return [
        Volume3D(
            rng.uniform(0, 0.2 + 0.05 * index, size=(16, 16, 16)),
            (1.5, 1.5, 2.0),
            ScanMeta(contrast="contrast" if index % 2 else "non_contrast"),
            "unit",
        )
        for index in range(16)
    ]


def test_hsic_reference():
    """J - I on four samples has HSIC 3"""
    gram = np.ones((4, 4)) - np.eye(4)
    assert hsic1_unbiased(gram, gram) == pytest.approx(3.0)


def test_hsic_ignores_diagonal(features):
    """Diagonal entries don't change the estimate"""
    gram = gram_linear(features)
    shifted = gram + np.diag(np.arange(12.0))
    assert hsic1_unbiased(gram, gram) == pytest.approx(hsic1_unbiased(shifted, shifted))


@pytest.mark.parametrize(
    "gram_x, gram_y",
    [
        (np.ones((4, 5)), np.ones((4, 5))),
        (np.triu(np.ones((4, 4))), np.ones((4, 4))),
        (np.ones((4, 4)), np.ones((5, 5))),
        (np.ones((3, 3)), np.ones((3, 3))),
    ],
)
def test_hsic_invalid(gram_x, gram_y):
    """Gram matrices must be square, symmetric, equal in size and at least 4 x 4"""
    with pytest.raises(InputException):
        hsic1_unbiased(gram_x, gram_y)


def test_cka_self(features):
    """A representation is fully aligned with itself"""
    assert cka_full(features, features) == pytest.approx(1.0)


def test_cka_invariances(features):
    """Orthogonal transforms and isotropic scaling don't change CKA"""
    other = np.random.default_rng(1).normal(size=(12, 4))
    rotation = ortho_group.rvs(6, random_state=2)
    base = cka_full(features, other)
    assert cka_full(3.0 * features @ rotation, other) == pytest.approx(base)
    assert cka_full(features, other) == pytest.approx(cka_full(other, features))


def test_cka_degenerate(features):
    """Constant activations give an undefined value"""
    assert cka_full(np.ones((12, 6)), features) is None


def test_cka_sample_mismatch(features):
    """Both sides need the same samples"""
    with pytest.raises(InputException):
        cka_full(features, features[:10])


def test_minibatch_single(features):
    """One batch reduces to the full estimate"""
    other = np.random.default_rng(5).normal(size=(12, 3))
    assert cka_minibatch([ActivationBatch(features, other)]) == pytest.approx(
        cka_full(features, other)
    )


def test_minibatch_self(features):
    """Identical sides stay at 1 across batches"""
    batches = [
        ActivationBatch(features[:6], features[:6]),
        ActivationBatch(features[6:], features[6:]),
    ]
    assert cka_minibatch(batches) == pytest.approx(1.0)


def test_minibatch_invalid(features):
    """Empty lists, small batches and uneven sides are rejected"""
    with pytest.raises(InputException):
        cka_minibatch([])
    with pytest.raises(InputException):
        cka_minibatch([ActivationBatch(features[:3], features[:3])])
    with pytest.raises(InputException):
        ActivationBatch(features[:4], features[:5])


def test_build_matrix_self(volumes):
    """A model compared with itself is aligned on the diagonal"""
    checkpoint = small_checkpoint()
    matrix = build_cka_matrix(
        checkpoint, checkpoint, volumes, taps=["down2", "down4"], batch_size=8
    )
    assert matrix.labels_a == ["down2", "down4"]
    assert matrix.metadata["n_batches"] == 2
    for index in range(2):
        assert matrix.values[index][index] == pytest.approx(1.0)


def test_build_matrix_subgroup(volumes):
    """Subgroup filters shrink the cohort below two batches"""
    checkpoint = small_checkpoint()
    with pytest.raises(InputException):
        build_cka_matrix(
            checkpoint, checkpoint, volumes, subgroup_filter={"contrast": "contrast"}, batch_size=8
        )


def test_build_matrix_tokens(volumes):
    """Token pooling works with single-volume batches"""
    checkpoint = small_checkpoint("vit")
    other = small_checkpoint("vit", seed=1)
    matrix = build_cka_matrix(
        checkpoint, other, volumes[:2], batch_size=1, pooling="tokens", seed=4
    )
    assert matrix.labels_b == ["block1", "block2", "block3"]
    assert matrix.array.shape == (3, 3)
    assert matrix.metadata["pooling"] == "tokens"


def test_build_matrix_invalid(volumes):
    """Mismatched models and bad settings are rejected"""
    cnn, vit = small_checkpoint(), small_checkpoint("vit")
    with pytest.raises(ArchitectureMismatch):
        build_cka_matrix(cnn, vit, volumes)
    with pytest.raises(ConfigValueError):
        build_cka_matrix(cnn, cnn, volumes, pooling="max")
    with pytest.raises(ConfigValueError):
        build_cka_matrix(cnn, cnn, volumes, batch_size=2)


def test_matrix_write(tmp_path):
    """Matrices are written as CSV, JSON and heatmaps"""
    matrix = CKAMatrix(
        values=[[1.0, 0.5], [None, 0.9]],
        labels_a=["block1", "block2"],
        labels_b=["block1", "block2"],
        model_tags=("vit/self/smit", "vit/scratch/none"),
    )
    paths = matrix.write(tmp_path)
    assert set(paths) == {"csv", "json", "png", "svg"}
    frame = pd.read_csv(paths["csv"], index_col=0)
    assert np.isnan(frame.loc["block2", "block1"])
    with open(paths["json"], "r", encoding="utf-8") as source:
        assert json.load(source)["values"][1][0] is None
    assert np.isnan(matrix.array[1, 0])


def test_hsic_null_mean():
    """Independent features average to zero HSIC"""
    rng = np.random.default_rng(11)
    values = [
        hsic1_unbiased(
            gram_linear(rng.normal(size=(256, 4))), gram_linear(rng.normal(size=(256, 4)))
        )
        for _ in range(50)
    ]
    assert abs(np.mean(values)) <= 0.02


def test_hsic_self_non_negative(features):
    """A Gram matrix paired with itself has non-negative HSIC"""
    gram = gram_linear(features)
    assert hsic1_unbiased(gram, gram) >= 0.0


def test_cka_invariances_random_trials():
    """Invariance to orthogonal transforms and isotropic scaling holds on every draw"""
    rng = np.random.default_rng(21)
    for trial in range(100):
        first = rng.normal(size=(16, 8))
        other = rng.normal(size=(16, 5))
        rotation = ortho_group.rvs(8, random_state=trial)
        assert cka_full(first, first @ rotation) == pytest.approx(1.0, abs=1e-6)
        assert cka_full(first, 2.5 * first) == pytest.approx(1.0, abs=1e-6)
        assert cka_full(first @ rotation, other) == pytest.approx(
            cka_full(first, other), abs=1e-6
        )


def correlated_features(rng, n_samples, noise=0.5):
    first = rng.normal(size=(n_samples, 16))
    rotation = ortho_group.rvs(16, random_state=int(rng.integers(1 << 30)))
    return first, first @ rotation + noise * rng.normal(size=(n_samples, 16))


@pytest.mark.parametrize("n_batches", [2, 4, 8])
def test_minibatch_close_to_full(n_batches):
    """Splitting 64 samples into batches stays within 0.05 of the full estimate"""
    first, second = correlated_features(np.random.default_rng(5), 64)
    batches = [
        ActivationBatch(a, b)
        for a, b in zip(np.split(first, n_batches), np.split(second, n_batches))
    ]
    assert abs(cka_minibatch(batches) - cka_full(first, second)) <= 0.05


def test_minibatch_order_free():
    """Batch order doesn't change the estimate"""
    first, second = correlated_features(np.random.default_rng(6), 32)
    batches = [ActivationBatch(a, b) for a, b in zip(np.split(first, 4), np.split(second, 4))]
    assert cka_minibatch(batches) == pytest.approx(cka_minibatch(batches[::-1]))


def test_minibatch_batch_size_sweep():
    """Batches of 8, 16 and 32 samples agree on average"""
    rng = np.random.default_rng(8)
    draws = [correlated_features(rng, 96) for _ in range(10)]
    means = {}
    for size in (8, 16, 32):
        values = []
        for first, second in draws:
            splits = len(first) // size
            batches = [
                ActivationBatch(a, b)
                for a, b in zip(np.split(first, splits), np.split(second, splits))
            ]
            values.append(cka_minibatch(batches))
        means[size] = np.mean(values)
    assert max(means.values()) - min(means.values()) <= 0.05


def test_build_matrix_frozen_layers(volumes):
    """Layers frozen during fine-tuning stay perfectly aligned with the initial model"""
    init = small_checkpoint(seed=3)
    rng = np.random.default_rng(9)
    cases = []
    for _ in range(4):
        data = rng.uniform(0.0, 0.3, size=(18, 18, 18))
        labels = np.zeros(data.shape, dtype=np.int16)
        labels[5:11, 6:12, 4:10] = 1
        data[labels > 0] += 0.6
        cases.append(
            (Volume3D(data, (1.5, 1.5, 2.0), intensity="unit"), SegMask(labels, (1.5, 1.5, 2.0)))
        )
    config = FinetuneConfig.from_dict(
        {"epochs": 2, "batch_size": 2, "val_fraction": 0.25, "lr": 1e-2, "freeze": ["down4"]}
    )
    tuned = run_finetune(config, cases, init=init, seed=1)
    assert tuned.metadata["frozen"] == ["down1", "down2", "down3", "down4"]
    taps = ["down1", "down2", "down3", "down4"]
    matrix = build_cka_matrix(init, tuned, volumes, taps=taps, batch_size=8)
    for index in range(4):
        assert matrix.values[index][index] == pytest.approx(1.0, abs=1e-6)
