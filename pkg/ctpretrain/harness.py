"""Experiment commands: synthesize a cohort, train, evaluate, compare and report

Every command except ``synth`` and ``report`` works inside a run directory of the
run store and finishes by writing the run's manifest. A command whose run is
already complete returns the stored result unless ``force`` is set.
"""

from dataclasses import replace
import itertools
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import ArchitectureMismatch, ConfigValueError, InputException
from .checkpoint import load_checkpoint
from .cka import CKAMatrix, build_cka_matrix
from .experiment import ExperimentConfig, config_hash
from .finetune import run_finetune
from .metrics import match_and_detect
from .models import CONTRASTS
from .phantom import (
    AcquisitionShift,
    apply_acquisition_shift,
    generate_phantom,
    kernel_group,
)
from .inference import infer_volume
from .pretrain import case_seed, run_pretraining
from .report import (
    load_records,
    paired_acquisition_report,
    save_records,
    stratified_report,
    write_report,
)
from .runs import RunManifest, RunStore, utc_now
from .volume_io import (
    Cohort,
    CohortEntry,
    file_hash,
    read_manifest,
    save_mask,
    save_volume,
    write_manifest,
)

COHORT_MANIFEST = "cohort.json"
# SeedSequence streams of the synthetic cohort
MAIN_STREAM, WILD_STREAM, PAIRED_STREAM, SPLIT_STREAM = range(4)


def acquisition_grid(config: ExperimentConfig):
    """Every (contrast, kernel, thickness) combination of the data section"""
    data = config.data
    return list(itertools.product(data.contrasts, data.kernels, data.thicknesses))


def acquisition_shift(config: ExperimentConfig, contrast, kernel, thickness) -> AcquisitionShift:
    boost = config.data.contrast_boost if contrast == CONTRASTS[0] else 0.0
    return AcquisitionShift(kernel=kernel, slice_thickness_mm=thickness, contrast_boost=boost)


def _render(config, out_dir: Path, case_id, seed, acquisition, split, with_mask=True):
    vol, mask = generate_phantom(config.data.phantom, seed)
    vol = apply_acquisition_shift(vol, acquisition_shift(config, *acquisition))
    volume_path = Path("volumes") / f"{case_id}.nii"
    save_volume(vol, out_dir / volume_path)
    mask_path = ""
    if with_mask:
        mask_path = str(Path("masks") / f"{case_id}.nii")
        save_mask(mask, out_dir / mask_path)
    return CohortEntry(case_id, str(volume_path), mask_path, vol.meta, split)


def cmd_synth(config: ExperimentConfig, out_dir=None, force: bool = False) -> Cohort:
    """Render the synthetic cohort and write its manifest

    Cases cycle through the acquisition grid. A paired subset renders the same
    phantoms under each of ``data.paired_kernels``; the wild cases carry no masks.

    :raises ConfigValueError: If ``out_dir`` already holds a cohort and ``force`` isn't set
    """
    data = config.data
    out_dir = Path(out_dir or data.root)
    if (out_dir / COHORT_MANIFEST).exists() and not force:
        raise ConfigValueError("out", str(out_dir), "already holds a cohort, use --force")
    grid = acquisition_grid(config)

    order = np.random.default_rng(case_seed(config.seed, SPLIT_STREAM)).permutation(data.n_cases)
    test = set(int(i) for i in order[: int(round(data.n_cases * data.test_fraction))])
    entries = [
        _render(
            config,
            out_dir,
            f"case{index:03d}",
            case_seed(config.seed, MAIN_STREAM, index),
            grid[index % len(grid)],
            "test" if index in test else "train",
        )
        for index in range(data.n_cases)
    ]
    contrast, thickness = data.contrasts[0], data.thicknesses[0]
    for index in range(data.paired_cases):
        seed = case_seed(config.seed, PAIRED_STREAM, index)
        for kernel in data.paired_kernels:
            entries.append(
                _render(
                    config,
                    out_dir,
                    f"paired{index:03d}-{kernel}",
                    seed,
                    (contrast, kernel, thickness),
                    "test",
                )
            )
    for index in range(data.wild_cases):
        entries.append(
            _render(
                config,
                out_dir,
                f"wild{index:03d}",
                case_seed(config.seed, WILD_STREAM, index),
                grid[(index + 1) % len(grid)],
                "wild",
                with_mask=False,
            )
        )
    write_manifest(entries, out_dir / COHORT_MANIFEST)
    return read_manifest(out_dir / COHORT_MANIFEST)


def load_cohort(config: ExperimentConfig) -> Cohort:
    return read_manifest(Path(config.data.root) / COHORT_MANIFEST)


def _dataset_hash(config: ExperimentConfig) -> str:
    return file_hash(Path(config.data.root) / COHORT_MANIFEST)


def _sections(config: ExperimentConfig, *names) -> Dict:
    return {name: config.to_dict()[name] for name in names}


def _reuse(store: RunStore, run_id: str, force: bool) -> Optional[RunManifest]:
    if store.is_complete(run_id) and not force:
        logging.info("Run %s is complete, reusing it", run_id)
        return store.resolve(run_id)
    return None


def _checkpoint_of(store: RunStore, run_id: str):
    manifest = store.resolve(run_id)
    return manifest, load_checkpoint(store.path_of(manifest, "checkpoint"))


def _finish(store: RunStore, manifest: RunManifest, force: bool) -> RunManifest:
    store.write_manifest(manifest, force=force)
    return manifest


def cmd_pretrain(
    config: ExperimentConfig, init_run: Optional[str] = None, force: bool = False
) -> RunManifest:
    """Pretrain on the train split (self regimes) or the wild split

    :raises ConfigValueError: If ``init_run`` is missing for, or given without, wild_then_self
    :raises ResolutionException: If ``init_run`` doesn't resolve
    """
    regime = config.pretrain.regime
    if (regime == "wild_then_self") != (init_run is not None):
        raise ConfigValueError("init", init_run, "needed by wild_then_self and only by it")
    store = RunStore(config.runs.root)
    init = None
    if init_run is not None:
        parent, init = _checkpoint_of(store, init_run)
        if parent.lineage != "wild":
            raise ConfigValueError("init", init_run, "stage one must be a wild pretraining run")
        init_run = parent.run_id
    payload = _sections(config, "seed", "data", "model", "pretrain")
    payload["init"] = init_run
    run_id = store.run_id("pretrain", payload, config.seed)
    reused = _reuse(store, run_id, force)
    if reused is not None:
        return reused

    cohort = load_cohort(config).filter(split="wild" if regime == "wild" else "train")
    created_at = utc_now()
    with store.lock(run_id) as run_dir:
        store.write_config(run_id, config.to_dict())
        checkpoint = run_pretraining(
            config.pretrain,
            cohort,
            config.model.model_config(),
            init=init,
            seed=config.seed,
            out_dir=run_dir,
        )
        curve = checkpoint.metadata["loss_curve"]
        manifest = RunManifest(
            run_id=run_id,
            kind="pretrain",
            config_hash=config_hash(payload),
            seed=config.seed,
            lineage=regime,
            parent_runs=[init_run] if init_run else [],
            dataset_hash=_dataset_hash(config),
            checkpoint_id=checkpoint.checkpoint_id,
            metrics={"epochs": len(curve), "final_total": curve[-1]["total"] if curve else None},
            created_at=created_at,
            files={"checkpoint": "checkpoint.pt", "loss_curve": "loss_curve.csv"},
            notes={
                "pretext": config.pretrain.pretext_name,
                "batch_size": config.pretrain.batch_size,
                "cases": len(cohort),
            },
        )
        return _finish(store, manifest, force)


def cmd_finetune(
    config: ExperimentConfig, init_run: Optional[str] = None, force: bool = False
) -> RunManifest:
    """Fine-tune from scratch or from a pretraining run on the train split"""
    store = RunStore(config.runs.root)
    init = None
    if init_run is not None:
        parent, init = _checkpoint_of(store, init_run)
        init_run = parent.run_id
    payload = _sections(config, "seed", "data", "model", "finetune")
    payload["init"] = init_run
    run_id = store.run_id("finetune", payload, config.seed)
    reused = _reuse(store, run_id, force)
    if reused is not None:
        return reused

    cohort = load_cohort(config).filter(split="train")
    created_at = utc_now()
    with store.lock(run_id) as run_dir:
        store.write_config(run_id, config.to_dict())
        checkpoint = run_finetune(
            config.finetune,
            cohort,
            config.model.model_config(),
            init=init,
            seed=config.seed,
            out_dir=run_dir,
        )
        metadata = checkpoint.metadata
        manifest = RunManifest(
            run_id=run_id,
            kind="finetune",
            config_hash=config_hash(payload),
            seed=config.seed,
            lineage=checkpoint.lineage,
            parent_runs=[init_run] if init_run else [],
            dataset_hash=_dataset_hash(config),
            checkpoint_id=checkpoint.checkpoint_id,
            metrics={
                "best_val_dsc": metadata["best_val_dsc"],
                "best_epoch": metadata["best_epoch"],
                "stopped_epoch": metadata["stopped_epoch"],
            },
            created_at=created_at,
            files={"checkpoint": "checkpoint.pt", "curve": "finetune_curve.csv"},
            notes={
                "model": checkpoint.tag.label,
                "batch_size": config.finetune.batch_size,
                "train_cases": len(metadata["train_cases"]),
                "val_cases": len(metadata["val_cases"]),
            },
        )
        return _finish(store, manifest, force)


def _report_of(records, config: ExperimentConfig, run_id: str):
    report = stratified_report(
        records,
        group_keys=("model_tag",),
        accuracy_over=config.eval.accuracy_over,
        overlap=config.eval.overlap,
        tau=config.eval.tau,
    )
    report.metadata["run_id"] = run_id
    return report


def cmd_evaluate(config: ExperimentConfig, run: str, force: bool = False):
    """Predict every case of the evaluation split with a fine-tuned run and score it

    Predictions, per-lesion records and the report land in a new evaluate run.
    Returns the CohortReport with the evaluate run id in its metadata.
    """
    store = RunStore(config.runs.root)
    parent, checkpoint = _checkpoint_of(store, run)
    target_spacing = config.finetune.target_spacing
    payload = {
        "run": parent.run_id,
        "eval": config.eval.to_dict(),
        "target_spacing": list(target_spacing),
        "dataset": _dataset_hash(config),
    }
    run_id = store.run_id("evaluate", payload, config.seed)
    reused = _reuse(store, run_id, force)
    if reused is not None:
        return _report_of(load_records(store.path_of(reused, "records")), config, run_id)

    cohort = load_cohort(config)
    entries = cohort.filter(split=config.eval.split)
    created_at = utc_now()
    with store.lock(run_id) as run_dir:
        store.write_config(run_id, config.to_dict())
        records = []
        for entry in entries:
            vol, mask = cohort.load(entry)
            if mask is None:
                raise InputException(f"Case {entry.case_id} has no ground truth mask")
            prediction = infer_volume(checkpoint, vol, target_spacing, config.eval.window_overlap)
            save_mask(prediction, run_dir / "predictions" / f"{entry.case_id}.nii")
            results = match_and_detect(prediction, mask, config.eval.tau, config.eval.overlap)
            records.extend(
                result.to_record(entry.case_id, entry.meta, checkpoint.tag) for result in results
            )
        logging.info("Evaluated %d lesions in %d cases", len(records), len(entries))
        save_records(records, run_dir / "records.json")
        report = _report_of(records, config, run_id)
        files = {"records": "records.json", "predictions": "predictions"}
        for name, path in write_report(report, run_dir, "report").items():
            files[name] = str(Path(path).relative_to(run_dir))
        row = report.to_dict()["summary"][0]
        manifest = RunManifest(
            run_id=run_id,
            kind="evaluate",
            config_hash=config_hash(payload),
            seed=config.seed,
            lineage=checkpoint.lineage,
            parent_runs=[parent.run_id],
            dataset_hash=_dataset_hash(config),
            checkpoint_id=checkpoint.checkpoint_id,
            metrics={
                "n_lesions": row["n_lesions"],
                "detection_rate": row["detection_rate"],
                "dsc_mean": row["dsc_mean"],
                "hd95_mean": row["hd95_mean"],
            },
            created_at=created_at,
            files=files,
            notes={"model": checkpoint.tag.label, "split": config.eval.split},
        )
        _finish(store, manifest, force)
    return report


def _cka_from_file(path) -> CKAMatrix:
    with open(path, "r", encoding="utf-8") as source:
        payload = json.load(source)
    payload["model_tags"] = tuple(payload["model_tags"])
    return CKAMatrix(**payload)


def cmd_cka(config: ExperimentConfig, run_a: str, run_b: str, force: bool = False) -> CKAMatrix:
    """Layer-by-layer CKA between the checkpoints of two runs of one architecture

    :raises ArchitectureMismatch: If the two runs differ in architecture
    """
    store = RunStore(config.runs.root)
    parent_a, checkpoint_a = _checkpoint_of(store, run_a)
    parent_b, checkpoint_b = _checkpoint_of(store, run_b)
    if checkpoint_a.model_config.arch != checkpoint_b.model_config.arch:
        raise ArchitectureMismatch(checkpoint_a.model_config.arch, checkpoint_b.model_config.arch)
    payload = {
        "runs": [parent_a.run_id, parent_b.run_id],
        "cka": config.cka.to_dict(),
        "target_spacing": list(config.finetune.target_spacing),
        "dataset": _dataset_hash(config),
    }
    run_id = store.run_id("cka", payload, config.seed)
    reused = _reuse(store, run_id, force)
    if reused is not None:
        return _cka_from_file(store.path_of(reused, "json"))

    cohort = load_cohort(config).filter(split=config.cka.split)
    created_at = utc_now()
    with store.lock(run_id) as run_dir:
        store.write_config(run_id, config.to_dict())
        matrix = build_cka_matrix(
            checkpoint_a,
            checkpoint_b,
            cohort,
            taps=config.cka.taps,
            subgroup_filter=config.cka.subgroup,
            batch_size=config.cka.batch_size,
            seed=config.seed,
            pooling=config.cka.pooling,
            target_spacing=config.finetune.target_spacing,
        )
        matrix.metadata["run_id"] = run_id
        written = matrix.write(run_dir)
        files = {name: str(Path(path).relative_to(run_dir)) for name, path in written.items()}
        diagonal = [matrix.values[i][i] for i in range(len(matrix.labels_a))]
        defined = [value for value in diagonal if value is not None]
        manifest = RunManifest(
            run_id=run_id,
            kind="cka",
            config_hash=config_hash(payload),
            seed=config.seed,
            lineage="none",
            parent_runs=[parent_a.run_id, parent_b.run_id],
            dataset_hash=_dataset_hash(config),
            metrics={
                "n_layers": len(matrix.labels_a),
                "diagonal_mean": sum(defined) / len(defined) if defined else None,
            },
            created_at=created_at,
            files=files,
            notes={"models": list(matrix.model_tags)},
        )
        _finish(store, manifest, force)
    return matrix


def cmd_report(config: ExperimentConfig, runs: Sequence[str], out_dir=None) -> Dict[str, Path]:
    """Summary, stratified and paired-acquisition tables with figures over evaluate runs

    CKA runs among ``runs`` get their heatmaps redrawn into the bundle.

    :raises InputException: If no evaluate run is given
    """
    store = RunStore(config.runs.root)
    manifests = [store.resolve(run) for run in runs]
    evaluated = [manifest for manifest in manifests if manifest.kind == "evaluate"]
    if not evaluated:
        raise InputException("A report needs at least one evaluate run")
    if out_dir is None:
        key = config_hash(sorted(manifest.run_id for manifest in manifests))[:12]
        out_dir = Path(config.runs.root) / f"report-{key}"
    out_dir = Path(out_dir)

    records = []
    for manifest in evaluated:
        records.extend(load_records(store.path_of(manifest, "records")))
    options = {
        "accuracy_over": config.eval.accuracy_over,
        "overlap": config.eval.overlap,
        "tau": config.eval.tau,
    }
    paths = {}
    summary = stratified_report(records, ("model_tag",), **options)
    summary.metadata["runs"] = [manifest.run_id for manifest in evaluated]
    for name, path in write_report(summary, out_dir, "summary").items():
        paths[f"summary_{name}"] = path
    for key in config.eval.group_keys:
        stratified = stratified_report(records, ("model_tag", key), **options)
        for name, path in write_report(stratified, out_dir, f"by_{key}", box_by=key).items():
            paths[f"by_{key}_{name}"] = path

    kernels = config.data.paired_kernels
    if config.data.paired_cases and len(kernels) >= 2:
        paired = paired_acquisition_report(
            records, "kernel_group", kernel_group(kernels[0]), kernel_group(kernels[1])
        )
        paths["paired_csv"] = out_dir / "paired_acquisition.csv"
        paired.to_csv(paths["paired_csv"], index=False)

    for manifest in manifests:
        if manifest.kind == "cka":
            matrix = _cka_from_file(store.path_of(manifest, "json"))
            for name, path in matrix.write(out_dir, f"cka_{manifest.run_id}").items():
                paths[f"cka_{manifest.run_id}_{name}"] = path
    logging.info("Report bundle with %d files in %s", len(paths), out_dir)
    return paths


def cmd_matrix(config: ExperimentConfig, force: bool = False) -> Dict[str, List]:
    """Pretrain, fine-tune and evaluate every architecture under every strategy

    Architectures in ``matrix.two_stage_archs`` also get a wild_then_self cell that
    continues from their wild pretraining run.
    """
    cells: Dict[str, List] = {"pretrain": [], "finetune": [], "evaluate": []}

    def cell(arch_config, regime, init_run=None):
        pretrain_run = None
        if regime != "scratch":
            staged = replace(arch_config, pretrain=replace(arch_config.pretrain, regime=regime))
            pretrain_run = cmd_pretrain(staged, init_run, force)
            cells["pretrain"].append(pretrain_run)
        finetuned = cmd_finetune(
            arch_config, pretrain_run.run_id if pretrain_run else None, force
        )
        cells["finetune"].append(finetuned)
        report = cmd_evaluate(arch_config, finetuned.run_id, force)
        cells["evaluate"].append(report.metadata["run_id"])
        return pretrain_run

    for arch in config.matrix.archs:
        arch_config = config.with_arch(arch)
        wild_run = None
        for strategy in config.matrix.strategies:
            pretrain_run = cell(arch_config, strategy)
            if strategy == "wild":
                wild_run = pretrain_run
        if arch in config.matrix.two_stage_archs:
            if wild_run is None:
                staged = replace(arch_config, pretrain=replace(arch_config.pretrain, regime="wild"))
                wild_run = cmd_pretrain(staged, None, force)
                cells["pretrain"].append(wild_run)
            cell(arch_config, "wild_then_self", wild_run.run_id)
    cells["report"] = [cmd_report(config, cells["evaluate"])]
    logging.info(
        "Matrix done: %d fine-tuned models over %d architectures",
        len(cells["finetune"]),
        len(config.matrix.archs),
    )
    return cells
