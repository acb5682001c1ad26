"""Report figures written as PNG and SVG with reproducible bytes"""

from pathlib import Path
from typing import Dict

import matplotlib

matplotlib.use("Agg")
# pylint: disable-msg=wrong-import-position
from matplotlib import pyplot as plt
import numpy as np

matplotlib.rcParams["svg.hashsalt"] = "ctpretrain"

FORMATS = {"png": {"Software": None}, "svg": {"Date": None}}


def save_figure(fig, stem) -> Dict[str, Path]:
    """Write ``stem.png`` and ``stem.svg`` without timestamps and close the figure"""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    paths = {}
    for suffix, metadata in FORMATS.items():
        paths[suffix] = stem.with_suffix(f".{suffix}")
        fig.savefig(paths[suffix], dpi=120, metadata=metadata)
    plt.close(fig)
    return paths


def plot_cka_heatmap(matrix, stem, title: str = "") -> Dict[str, Path]:
    """Layer-by-layer CKA with layer indices from 1 on both axes"""
    values = matrix.array
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    image = ax.imshow(values, cmap="magma", vmin=0.0, vmax=1.0, origin="lower")
    ax.set_xticks(range(values.shape[1]), [str(i + 1) for i in range(values.shape[1])])
    ax.set_yticks(range(values.shape[0]), [str(i + 1) for i in range(values.shape[0])])
    tag_a, tag_b = matrix.model_tags
    ax.set_xlabel(f"Layer ({tag_b})")
    ax.set_ylabel(f"Layer ({tag_a})")
    ax.set_title(title, fontsize=9)
    fig.colorbar(image, ax=ax, label="CKA")
    fig.tight_layout()
    return save_figure(fig, stem)


def plot_dsc_scatter(frame, stem) -> Dict[str, Path]:
    """Per-lesion DSC against lesion volume, one series per model"""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, group in frame.groupby("model", sort=True):
        ax.scatter(group["lesion_volume_cc"], group["dsc"], s=12, alpha=0.7, label=label)
    ax.set_xlabel("Lesion volume (cc)")
    ax.set_ylabel("DSC")
    ax.set_ylim(-0.02, 1.02)
    if not frame.empty:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return save_figure(fig, stem)


def plot_dsc_boxplot(frame, stem, by: str = "kernel_group") -> Dict[str, Path]:
    """DSC box plots per value of ``by``, side by side per model"""
    groups = sorted(frame[by].unique()) if not frame.empty else []
    models = sorted(frame["model"].unique()) if not frame.empty else []
    fig, ax = plt.subplots(figsize=(max(4, 1.6 * len(groups) * max(1, len(models))), 4))
    width = 0.8 / max(1, len(models))
    for index, model in enumerate(models):
        subset = frame[frame["model"] == model]
        data = [subset.loc[subset[by] == group, "dsc"].to_numpy() for group in groups]
        positions = np.arange(len(groups)) + (index - (len(models) - 1) / 2) * width
        boxes = ax.boxplot(data, positions=positions, widths=width * 0.9, patch_artist=True)
        for patch in boxes["boxes"]:
            patch.set_facecolor(f"C{index}")
        ax.plot([], [], color=f"C{index}", label=model)
    ax.set_xticks(range(len(groups)), [str(group) for group in groups])
    ax.set_xlabel(by)
    ax.set_ylabel("DSC")
    if models:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return save_figure(fig, stem)
