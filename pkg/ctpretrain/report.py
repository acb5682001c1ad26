"""Acquisition-stratified cohort reports"""

from dataclasses import dataclass, field
import itertools
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from . import ConfigValueError, InputException
from .metrics import wilcoxon_signed_rank
from .models import EvalRecord
from .plotting import plot_dsc_boxplot, plot_dsc_scatter

GROUP_COLUMNS = {
    "contrast": "contrast",
    "kernel_group": "kernel_group",
    "slice_thickness": "slice_thickness",
    "model_tag": "model",
}
ACCURACY_OVER = ("detected_by_any", "all")
LESION_KEY = ["case_id", "lesion_id"]
RECORD_COLUMNS = [
    "case_id",
    "lesion_id",
    "dsc",
    "hd95_mm",
    "detected",
    "lesion_volume_cc",
    "contrast",
    "kernel_group",
    "slice_thickness",
    "source_id",
    "arch",
    "training_strategy",
    "pretext_task",
    "model",
]


def records_frame(records: Sequence) -> pd.DataFrame:
    """One row per lesion and model with flattened metadata"""
    rows = []
    for record in records:
        if not isinstance(record, EvalRecord):
            record = EvalRecord.from_dict(record)
        rows.append(
            {
                "case_id": record.case_id,
                "lesion_id": record.lesion_id,
                "dsc": record.dsc,
                "hd95_mm": np.nan if record.hd95_mm is None else record.hd95_mm,
                "detected": bool(record.detected),
                "lesion_volume_cc": record.lesion_volume_cc,
                "contrast": record.meta.contrast,
                "kernel_group": record.meta.kernel_group,
                "slice_thickness": record.meta.slice_thickness_mm,
                "source_id": record.meta.source_id,
                "arch": record.model_tag.arch,
                "training_strategy": record.model_tag.training_strategy,
                "pretext_task": record.model_tag.pretext_task,
                "model": record.model_tag.label,
            }
        )
    return pd.DataFrame(rows, columns=RECORD_COLUMNS)


def detected_by_any(frame: pd.DataFrame) -> pd.DataFrame:
    """Rows of lesions that at least one model detected"""
    if frame.empty:
        return frame
    hit = frame.groupby(LESION_KEY)["detected"].transform("any")
    return frame[hit]


def _none_for_nan(value):
    if value is None:
        return None
    if isinstance(value, (float, np.floating)) and np.isnan(value):
        return None
    if isinstance(value, np.generic):
        return value.item()
    return value


def frame_records(frame: pd.DataFrame) -> List[Dict]:
    """Rows as dicts with None in place of NaN"""
    return [
        {key: _none_for_nan(value) for key, value in row.items()}
        for row in frame.to_dict(orient="records")
    ]


@dataclass
class CohortReport:
    """Grouped aggregates, paired p-values and the DSC-vs-volume series"""

    summary: pd.DataFrame
    pvalues: pd.DataFrame
    frame: pd.DataFrame
    group_keys: tuple
    overlap: str = "dice"
    tau: float = 0.5
    accuracy_over: str = "detected_by_any"
    n_records: int = 0
    metadata: dict = field(default_factory=dict)

    @property
    def scatter(self) -> pd.DataFrame:
        """DSC against lesion volume per model"""
        columns = ["model", "case_id", "lesion_id", "lesion_volume_cc", "dsc", "detected"]
        return self.frame[columns]

    def to_dict(self) -> Dict:
        return {
            "group_keys": list(self.group_keys),
            "overlap": self.overlap,
            "tau": self.tau,
            "accuracy_over": self.accuracy_over,
            "n_records": self.n_records,
            "summary": frame_records(self.summary),
            "pvalues": frame_records(self.pvalues),
            "metadata": dict(self.metadata),
        }


def _group_columns(group_keys) -> List[str]:
    unknown = [key for key in group_keys if key not in GROUP_COLUMNS]
    if unknown:
        raise ConfigValueError("group_keys", unknown, f"must be among {sorted(GROUP_COLUMNS)}")
    return [GROUP_COLUMNS[key] for key in group_keys]


def _aggregate(frame: pd.DataFrame, accuracy: pd.DataFrame, columns) -> pd.DataFrame:
    detection = frame.groupby(columns, sort=True).agg(
        n_lesions=("detected", "size"), n_detected=("detected", "sum")
    )
    detection["detection_rate"] = detection["n_detected"] / detection["n_lesions"]
    scores = accuracy.groupby(columns, sort=True).agg(
        n_accuracy=("dsc", "size"),
        dsc_mean=("dsc", "mean"),
        dsc_std=("dsc", "std"),
        hd95_mean=("hd95_mm", "mean"),
        hd95_std=("hd95_mm", "std"),
    )
    summary = detection.join(scores, how="left")
    summary["n_accuracy"] = summary["n_accuracy"].fillna(0).astype(int)
    summary["n_detected"] = summary["n_detected"].astype(int)
    return summary.reset_index()


def paired_wilcoxon(paired: pd.DataFrame) -> Optional[float]:
    """Wilcoxon p of the a and b columns

    No pairs or fewer than 5 non-zero differences give None. Pairs that are all identical,
    however few, give p = 1.
    """
    if paired.empty:
        return None
    try:
        return wilcoxon_signed_rank(paired["a"], paired["b"])
    except InputException as exc:
        logging.debug("No p-value for %d pairs: %s", len(paired), exc.message)
        return None


def paired_pvalue(frame: pd.DataFrame, model_a: str, model_b: str, value="dsc", key=None):
    """Number of paired per-lesion values of two models and their Wilcoxon p"""
    key = key or LESION_KEY
    side_a = frame[frame["model"] == model_a].set_index(key)[value]
    side_b = frame[frame["model"] == model_b].set_index(key)[value]
    paired = pd.concat([side_a, side_b], axis=1, join="inner", keys=["a", "b"]).dropna()
    return len(paired), paired_wilcoxon(paired)


def _strategy_pairs(frame: pd.DataFrame):
    models = frame[["arch", "model"]].drop_duplicates().sort_values(["arch", "model"])
    for _, group in models.groupby("arch", sort=True):
        yield from itertools.combinations(group["model"].tolist(), 2)


def stratified_report(
    records: Sequence,
    group_keys: Sequence[str] = ("model_tag",),
    accuracy_over: str = "detected_by_any",
    overlap: str = "dice",
    tau: float = 0.5,
) -> CohortReport:
    """Aggregates per group plus Wilcoxon p-values between training strategies of one architecture

    Detection rates cover every lesion; DSC and HD95 cover the lesions selected by
    ``accuracy_over``.

    :raises InputException: Without records
    """
    frame = records_frame(records)
    if frame.empty:
        raise InputException("Cannot report on an empty record list")
    if accuracy_over not in ACCURACY_OVER:
        raise ConfigValueError("accuracy_over", accuracy_over, f"must be one of {ACCURACY_OVER}")
    group_keys = tuple(group_keys)
    columns = _group_columns(group_keys)
    accuracy = detected_by_any(frame) if accuracy_over == "detected_by_any" else frame
    summary = _aggregate(frame, accuracy, columns or ["model"])

    strata = [column for column in columns if column != "model"]
    rows = []
    grouped = accuracy.groupby(strata, sort=True) if strata else [((), accuracy)]
    for values, group in grouped:
        values = values if isinstance(values, tuple) else (values,)
        for model_a, model_b in _strategy_pairs(group):
            n_pairs, pvalue = paired_pvalue(group, model_a, model_b)
            row = dict(zip(strata, values))
            row.update(model_a=model_a, model_b=model_b, n_pairs=n_pairs, p_value=pvalue)
            rows.append(row)
    pvalues = pd.DataFrame(rows, columns=strata + ["model_a", "model_b", "n_pairs", "p_value"])
    logging.info(
        "Report over %d records in %d groups, %d paired comparisons",
        len(frame),
        len(summary),
        len(pvalues),
    )
    return CohortReport(
        summary=summary,
        pvalues=pvalues,
        frame=frame,
        group_keys=group_keys,
        overlap=overlap,
        tau=tau,
        accuracy_over=accuracy_over,
        n_records=len(frame),
        metadata={"models": sorted(frame["model"].unique())},
    )


def paired_acquisition_report(
    records: Sequence,
    key: str = "kernel_group",
    variant_a: str = "recon3",
    variant_b: str = "recon1",
) -> pd.DataFrame:
    """Per model, DSC of the same phantom lesions under two acquisitions and their Wilcoxon p"""
    column = _group_columns([key])[0]
    frame = records_frame(records)
    rows = []
    for model, group in frame.groupby("model", sort=True):
        group = group[group["source_id"] != ""]
        side_a = group[group[column] == variant_a].set_index(["source_id", "lesion_id"])["dsc"]
        side_b = group[group[column] == variant_b].set_index(["source_id", "lesion_id"])["dsc"]
        paired = pd.concat([side_a, side_b], axis=1, join="inner", keys=["a", "b"])
        pvalue = paired_wilcoxon(paired)
        rows.append(
            {
                "model": model,
                "variant_a": variant_a,
                "variant_b": variant_b,
                "n_pairs": len(paired),
                "dsc_mean_a": paired["a"].mean() if len(paired) else None,
                "dsc_mean_b": paired["b"].mean() if len(paired) else None,
                "p_value": pvalue,
            }
        )
    return pd.DataFrame(rows)


def write_report(report: CohortReport, out_dir, stem: str = "report", box_by="kernel_group"):
    """CSV tables, JSON summary and the scatter and box plot figures"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "summary_csv": out_dir / f"{stem}_summary.csv",
        "pvalues_csv": out_dir / f"{stem}_pvalues.csv",
        "json": out_dir / f"{stem}.json",
    }
    report.summary.to_csv(paths["summary_csv"], index=False)
    report.pvalues.to_csv(paths["pvalues_csv"], index=False)
    with open(paths["json"], "w", encoding="utf-8") as output:
        json.dump(report.to_dict(), output, indent=2, sort_keys=True)
    for suffix, path in plot_dsc_scatter(report.scatter, out_dir / f"{stem}_scatter").items():
        paths[f"scatter_{suffix}"] = path
    if box_by is not None:
        column = GROUP_COLUMNS.get(box_by, box_by)
        box_paths = plot_dsc_boxplot(report.frame, out_dir / f"{stem}_box_{box_by}", column)
        for suffix, path in box_paths.items():
            paths[f"box_{suffix}"] = path
    return paths


def load_records(path) -> List[EvalRecord]:
    with open(path, "r", encoding="utf-8") as source:
        return [EvalRecord.from_dict(item) for item in json.load(source)]


def save_records(records: Sequence[EvalRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as output:
        json.dump([record.to_dict() for record in records], output, indent=2, sort_keys=True)
    return path


def summary_value(report: CohortReport, column: str, **group) -> Optional[float]:
    """One aggregate of one group, None if undefined"""
    rows = report.summary
    for key, value in group.items():
        rows = rows[rows[GROUP_COLUMNS.get(key, key)] == value]
    if len(rows) != 1:
        raise InputException(f"Group {group} matches {len(rows)} rows")
    return _none_for_nan(rows.iloc[0][column])
