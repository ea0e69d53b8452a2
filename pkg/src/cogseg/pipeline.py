"""Stage orchestration over a single experiment working directory.

Every stage reads its prerequisites through the manifest (existence plus
checksum), writes its own artifacts atomically, and records them back.
The two arms live side by side under ``arms/`` and differ only in the
sampling weights used for training.

Layout::

    workdir/
      manifest.json
      cohort/                       (unless an external cohort is configured)
      split.json
      preprocess/stats.json, <case_id>/{image.npy, annotation_g<k>.npy, sidecar.json}
      arms/<arm>/checkpoints/, train_log.jsonl, train_config.json,
                 predictions/<split>/<case_id>.nii.gz, eval_<split>.csv
      selection/selection.json, weights.json
      comparison.json
      report/
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import nifti
from .cohort import (
    Case,
    ClinicalRecord,
    DatasetSplit,
    LabelMap,
    clinical_from_json,
    cohort_case_ids,
    generate_synthetic_cohort,
    load_cohort,
    split_dataset,
    write_cohort,
)
from .config import ExperimentConfig
from .errors import ConfigError, MissingArtifactError, PipelineError
from .evalkit import CLASS_NAMES, EvalReport, evaluate_case, postprocess, sliding_window_predict
from .preprocess import (
    AugmentConfig,
    IntensityStats,
    PatchSpec,
    fit_intensity_stats,
    load_preprocessed,
    preprocess_case,
    resample,
    save_preprocessed,
)
from .select import (
    build_design_matrix,
    compute_sampling_weights,
    cv_select,
    default_lambda_grid,
    make_selection_result,
)
from .stats import compare_arms, write_comparison_json
from .train import (
    LossConfig,
    SamplingWeights,
    TrainConfig,
    inverse_sqrt_class_weights,
    make_sampler,
    train_model,
)
from .unet3d import NetworkConfig, build, load_checkpoint, model_from_checkpoint

ARMS = ("baseline", "cognizant")
SPLITS = ("train", "val", "test")


@dataclass
class StageResult:
    stage: str
    artifacts: list[str] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _atomic_write_json(path: Path, obj) -> None:
    _atomic_write_text(path, json.dumps(obj, indent=2))


class Workspace:
    """Path bookkeeping and the artifact manifest for one workdir."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.workdir = config.paths.workdir_path()
        self.cohort_dir = config.paths.cohort_path()
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.workdir / "manifest.json"
        self.manifest: dict[str, dict] = {}
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())

    # -- paths ---------------------------------------------------------
    @property
    def split_path(self) -> Path:
        return self.workdir / "split.json"

    @property
    def preprocess_dir(self) -> Path:
        return self.workdir / "preprocess"

    def arm_dir(self, arm: str) -> Path:
        if arm not in ARMS:
            raise ConfigError(f"unknown arm {arm!r}, expected one of {ARMS}")
        return self.workdir / "arms" / arm

    @property
    def selection_dir(self) -> Path:
        return self.workdir / "selection"

    @property
    def comparison_path(self) -> Path:
        return self.workdir / "comparison.json"

    @property
    def report_dir(self) -> Path:
        return self.workdir / "report"

    # -- manifest ------------------------------------------------------
    def _rel(self, path: Path) -> str:
        try:
            return path.relative_to(self.workdir).as_posix()
        except ValueError:
            return path.as_posix()

    def record(self, stage: str, *paths: Path) -> list[str]:
        rels = []
        for path in paths:
            rel = self._rel(path)
            self.manifest[rel] = {"sha256": _sha256(path), "stage": stage}
            rels.append(rel)
        _atomic_write_json(self.manifest_path, self.manifest)
        return rels

    def record_tree(self, stage: str, root: Path) -> list[str]:
        files = sorted(p for p in root.rglob("*") if p.is_file())
        return self.record(stage, *files)

    def require(self, path: Path, hint: str) -> Path:
        """Demand an artifact exists and still matches its recorded checksum."""
        if not path.exists():
            raise MissingArtifactError(f"missing artifact {self._rel(path)}; run `{hint}` first")
        entry = self.manifest.get(self._rel(path))
        if entry is not None and _sha256(path) != entry["sha256"]:
            raise MissingArtifactError(
                f"artifact {self._rel(path)} does not match its manifest checksum; "
                f"re-run `{hint}`"
            )
        return path

    # -- shared loads --------------------------------------------------
    def load_split(self) -> DatasetSplit:
        self.require(self.split_path, "split")
        return DatasetSplit.from_dict(json.loads(self.split_path.read_text()))

    def clinical_records(self) -> dict[str, ClinicalRecord]:
        path = self.cohort_dir / "clinical.json"
        self.require(path, "synth")
        return {r.case_id: r for r in clinical_from_json(json.loads(path.read_text()))}

    def load_preprocessed_case(self, case_id: str):
        case_dir = self.preprocess_dir / case_id
        self.require(case_dir / "sidecar.json", "preprocess")
        return load_preprocessed(case_dir)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def stage_synth(config: ExperimentConfig) -> StageResult:
    """Generate the synthetic cohort into the configured cohort directory."""
    ws = Workspace(config)
    ph = config.phantom
    cohort = generate_synthetic_cohort(
        ph.n_cases,
        ph.volume_shape,
        ph.n_annotation_groups,
        ph.hard_fraction,
        ph.seed,
        spacing=ph.spacing,
    )
    tmp = ws.cohort_dir.with_name(ws.cohort_dir.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    write_cohort(cohort, tmp)
    if ws.cohort_dir.exists():
        shutil.rmtree(ws.cohort_dir)
    os.replace(tmp, ws.cohort_dir)
    artifacts = ws.record_tree("synth", ws.cohort_dir)
    return StageResult(
        stage="synth",
        artifacts=artifacts,
        summary={
            "n_cases": ph.n_cases,
            "n_hard": len(cohort.hard_case_ids),
            "cohort_dir": str(ws.cohort_dir),
        },
    )


def stage_split(config: ExperimentConfig) -> StageResult:
    ws = Workspace(config)
    ws.require(ws.cohort_dir / "clinical.json", "synth")
    ids = cohort_case_ids(ws.cohort_dir)
    split = split_dataset(ids, config.split.fractions, config.split.seed)
    _atomic_write_json(ws.split_path, split.to_dict())
    artifacts = ws.record("split", ws.split_path)
    return StageResult(
        stage="split",
        artifacts=artifacts,
        summary={
            "n_train": len(split.train_ids),
            "n_val": len(split.val_ids),
            "n_test": len(split.test_ids),
        },
    )


def stage_preprocess(config: ExperimentConfig) -> StageResult:
    """Resample everything, fit intensity stats on the training split, normalize."""
    ws = Workspace(config)
    split = ws.load_split()
    target = config.preprocess.target_spacing

    resampled_train = []
    for cid in split.train_ids:
        case = load_cohort(ws.cohort_dir, [cid])[0]
        image = resample(case.image, target)
        annotations = [resample(a, target) for a in case.annotations]
        resampled_train.append(Case(image, annotations, case.clinical))
    stats = fit_intensity_stats(resampled_train)
    del resampled_train

    ws.preprocess_dir.mkdir(parents=True, exist_ok=True)
    stats_path = ws.preprocess_dir / "stats.json"
    _atomic_write_json(stats_path, stats.to_dict())

    paths = [stats_path]
    for cid in split.all_ids():
        case = load_cohort(ws.cohort_dir, [cid])[0]
        pc = preprocess_case(case, target, stats)
        save_preprocessed(pc, ws.preprocess_dir)
        case_dir = ws.preprocess_dir / cid
        paths.extend(sorted(case_dir.iterdir()))
    artifacts = ws.record("preprocess", *paths)
    return StageResult(
        stage="preprocess",
        artifacts=artifacts,
        summary={"n_cases": len(split.all_ids()), "stats": stats.to_dict()},
    )


def _network_config(config: ExperimentConfig) -> NetworkConfig:
    n = config.network
    return NetworkConfig(
        in_channels=n.in_channels,
        base_channels=n.base_channels,
        levels=n.levels,
        num_classes=n.num_classes,
    )


def _train_config(config: ExperimentConfig) -> TrainConfig:
    t = config.train
    return TrainConfig(
        epochs=t.epochs,
        samples_per_epoch=t.samples_per_epoch,
        batch_size=t.batch_size,
        lr0=t.lr0,
        plateau_factor=t.plateau_factor,
        plateau_patience=t.plateau_patience,
        improvement_threshold=t.improvement_threshold,
        seed=t.seed,
    )


def _augment_config(config: ExperimentConfig) -> AugmentConfig:
    a = config.preprocess.augment
    if not a.enabled:
        return AugmentConfig.disabled()
    return AugmentConfig(
        prob=a.prob,
        mirror_prob=a.mirror_prob,
        scale_range=a.scale_range,
        rotate_max_deg=a.rotate_max_deg,
        gamma_range=a.gamma_range,
        contrast_range=a.contrast_range,
        brightness_limit=a.brightness_limit,
        noise_sigma_max=a.noise_sigma_max,
        blur_sigma_range=a.blur_sigma_range,
    )


def _arm_train_config_dict(config: ExperimentConfig, sampling: dict) -> dict:
    """The resolved training configuration an arm runs under.

    Everything except the `sampling` entry must be identical between the
    two arms; retrain asserts exactly that.
    """
    return {
        "network": config.network.model_dump(mode="json"),
        "train": config.train.model_dump(mode="json"),
        "preprocess": config.preprocess.model_dump(mode="json"),
        "sampling": sampling,
    }


def _train_arm(config: ExperimentConfig, arm: str, weights: SamplingWeights | None, sampling: dict) -> StageResult:
    ws = Workspace(config)
    torch.set_num_threads(1)
    split = ws.load_split()
    cases = {}
    for cid in split.train_ids + split.val_ids:
        cases[cid] = ws.load_preprocessed_case(cid)

    train_labels = [ann for cid in split.train_ids for ann in cases[cid].annotations]
    loss_config = LossConfig(ce_class_weights=inverse_sqrt_class_weights(train_labels))
    model = build(_network_config(config), seed=config.network.seed)
    sampler = make_sampler(split.train_ids, weights, seed=config.train.seed)
    arm_dir = ws.arm_dir(arm)
    checkpoints = arm_dir / "checkpoints"

    result = train_model(
        model,
        cases,
        split.train_ids,
        split.val_ids,
        sampler,
        _train_config(config),
        loss_config,
        PatchSpec(config.preprocess.patch_size),
        checkpoints,
        augment_config=_augment_config(config),
        foreground_bias=config.preprocess.foreground_bias,
    )
    log_path = arm_dir / "train_log.jsonl"
    os.replace(result.log_path, log_path)
    config_path = arm_dir / "train_config.json"
    _atomic_write_json(config_path, _arm_train_config_dict(config, sampling))

    artifacts = ws.record(
        arm, result.best_checkpoint, result.last_checkpoint, log_path, config_path
    )
    return StageResult(
        stage="train" if arm == "baseline" else "retrain",
        artifacts=artifacts,
        summary={
            "arm": arm,
            "epochs": len(result.history),
            "best_epoch": result.best_epoch,
            "best_val_loss": result.best_val_loss,
            "final_train_loss": result.history[-1].train_loss if result.history else None,
            "ce_class_weights": list(loss_config.ce_class_weights),
        },
    )


def stage_train(config: ExperimentConfig, sampling: str = "uniform") -> StageResult:
    """Train an arm: uniform sampling = baseline, weighted = cognizant."""
    if sampling == "uniform":
        return _train_arm(config, "baseline", None, {"mode": "uniform"})
    if sampling == "weighted":
        return stage_retrain(config)
    raise ConfigError(f"unknown sampling mode {sampling!r}, expected uniform or weighted")


def stage_retrain(config: ExperimentConfig) -> StageResult:
    """Train the cognizant arm; identical to baseline except the sampler weights."""
    ws = Workspace(config)
    weights_path = ws.require(ws.selection_dir / "weights.json", "select-features")
    baseline_config_path = ws.require(ws.arm_dir("baseline") / "train_config.json", "train")
    weights = SamplingWeights.from_json(weights_path)

    sampling = {"mode": "weighted", "weights_sha256": _sha256(weights_path)}
    baseline_cfg = json.loads(baseline_config_path.read_text())
    cognizant_cfg = _arm_train_config_dict(config, sampling)
    base_rest = {k: v for k, v in baseline_cfg.items() if k != "sampling"}
    cog_rest = {k: v for k, v in cognizant_cfg.items() if k != "sampling"}
    if base_rest != cog_rest:
        raise PipelineError(
            "cognizant training configuration differs from baseline beyond the sampler; "
            f"baseline={base_rest} cognizant={cog_rest}"
        )
    if baseline_cfg["sampling"] == sampling:
        raise PipelineError("cognizant arm would reuse the baseline's uniform sampling")
    return _train_arm(config, "cognizant", weights, sampling)


def _split_ids(split: DatasetSplit, name: str) -> list[str]:
    try:
        return {"train": split.train_ids, "val": split.val_ids, "test": split.test_ids}[name]
    except KeyError:
        raise ConfigError(f"unknown split {name!r}, expected one of {SPLITS}") from None


def stage_predict(config: ExperimentConfig, arm: str, split_name: str) -> StageResult:
    """Sliding-window inference plus postprocessing over one split."""
    ws = Workspace(config)
    torch.set_num_threads(1)
    split = ws.load_split()
    ids = _split_ids(split, split_name)
    checkpoint = ws.require(
        ws.arm_dir(arm) / "checkpoints" / "checkpoint_best.pt",
        "train" if arm == "baseline" else "retrain",
    )
    model = model_from_checkpoint(load_checkpoint(checkpoint))
    window = tuple(config.preprocess.patch_size)

    out_dir = ws.arm_dir(arm) / "predictions" / split_name
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for cid in ids:
        pc = ws.load_preprocessed_case(cid)
        labels = sliding_window_predict(model, pc.image, window=window)
        cleaned = postprocess(LabelMap(labels, pc.spacing, cid))
        path = out_dir / f"{cid}.nii.gz"
        tmp = path.with_name(path.name + ".tmp")
        nifti.write_volume(tmp, cleaned.voxels.astype(np.uint8), pc.spacing)
        os.replace(tmp, path)
        paths.append(path)
    artifacts = ws.record(f"predict:{arm}:{split_name}", *paths)
    return StageResult(
        stage="predict",
        artifacts=artifacts,
        summary={"arm": arm, "split": split_name, "n_cases": len(ids), "window": list(window)},
    )


def stage_evaluate(config: ExperimentConfig, arm: str, split_name: str) -> StageResult:
    """Score one arm's predictions on one split against all annotation groups."""
    ws = Workspace(config)
    split = ws.load_split()
    ids = _split_ids(split, split_name)
    pred_dir = ws.arm_dir(arm) / "predictions" / split_name

    report = EvalReport()
    for cid in ids:
        pred_path = ws.require(pred_dir / f"{cid}.nii.gz", f"predict --arm {arm} --split {split_name}")
        voxels, spacing = nifti.read_volume(pred_path)
        pc = ws.load_preprocessed_case(cid)
        prediction = LabelMap(np.rint(voxels).astype(np.int16), spacing, cid)
        annotations = [LabelMap(a, pc.spacing, cid, g) for g, a in enumerate(pc.annotations)]
        report.extend(evaluate_case(prediction, annotations, config.eval.tolerance_mm))

    csv_path = ws.arm_dir(arm) / f"eval_{split_name}.csv"
    summary_path = ws.arm_dir(arm) / f"eval_{split_name}_summary.json"
    report.write_csv(csv_path)
    report.write_summary_json(summary_path)
    artifacts = ws.record(f"evaluate:{arm}:{split_name}", csv_path, summary_path)
    return StageResult(
        stage="evaluate",
        artifacts=artifacts,
        summary={"arm": arm, "split": split_name, **report.summary()},
    )


def stage_select_features(config: ExperimentConfig) -> StageResult:
    """LASSO on validation tumor Dice; emit selection and sampling weights."""
    ws = Workspace(config)
    split = ws.load_split()
    eval_path = ws.require(
        ws.arm_dir("baseline") / "eval_val.csv", "evaluate --arm baseline --split val"
    )
    dice = EvalReport.read_csv(eval_path).tumor_dice()
    records = ws.clinical_records()
    val_records = [records[cid] for cid in split.val_ids]
    train_records = [records[cid] for cid in split.train_ids]

    design = build_design_matrix(val_records, dice)
    grid = default_lambda_grid(
        design.X, design.y, size=config.select.grid_size, min_ratio=config.select.lambda_min_ratio
    )
    path = cv_select(
        design.X,
        design.y,
        n_folds=config.select.n_folds,
        lambda_grid=grid,
        seed=config.select.seed,
        column_names=[c.name for c in design.columns],
        column_means=design.column_means,
        column_stds=design.column_stds,
    )
    selection = make_selection_result(design, path, train_records)
    weights = compute_sampling_weights(selection, train_records)

    ws.selection_dir.mkdir(parents=True, exist_ok=True)
    selection_path = ws.selection_dir / "selection.json"
    weights_path = ws.selection_dir / "weights.json"
    _atomic_write_json(
        selection_path,
        {
            "n_cases": len(design.case_ids),
            "columns": [c.name for c in design.columns],
            "path": path.to_dict(),
            "selection": selection.to_dict(),
        },
    )
    _atomic_write_text(weights_path, json.dumps({k: weights.weights[k] for k in sorted(weights.weights)}, indent=2))

    artifacts = ws.record("select-features", selection_path, weights_path)
    return StageResult(
        stage="select-features",
        artifacts=artifacts,
        summary={
            "lambda_min": path.lambda_min,
            "lambda_1se": path.lambda_1se,
            "selected": [(s.name, s.coefficient) for s in selection.selected],
            "frequencies": selection.frequencies,
        },
    )


def stage_compare(config: ExperimentConfig) -> StageResult:
    """Paired statistics of the six metrics between the arms on the test split."""
    ws = Workspace(config)
    baseline = EvalReport.read_csv(
        ws.require(ws.arm_dir("baseline") / "eval_test.csv", "evaluate --arm baseline --split test")
    )
    cognizant = EvalReport.read_csv(
        ws.require(
            ws.arm_dir("cognizant") / "eval_test.csv", "evaluate --arm cognizant --split test"
        )
    )
    comparisons = compare_arms(baseline, cognizant, alpha=config.stats.alpha)
    tmp = ws.comparison_path.with_name(ws.comparison_path.name + ".tmp")
    write_comparison_json(comparisons, tmp)
    os.replace(tmp, ws.comparison_path)
    artifacts = ws.record("compare", ws.comparison_path)
    return StageResult(
        stage="compare",
        artifacts=artifacts,
        summary={
            c.metric: {"test_used": c.test_used, "p_value": c.p_value, "significant": c.significant}
            for c in comparisons
        },
    )


def stage_report(config: ExperimentConfig) -> StageResult:
    """Render the CV curve, weight histogram, Dice box plots, and a text summary."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ws = Workspace(config)
    selection_path = ws.require(ws.selection_dir / "selection.json", "select-features")
    weights_path = ws.require(ws.selection_dir / "weights.json", "select-features")
    comparison_path = ws.require(ws.comparison_path, "compare")
    ws.report_dir.mkdir(parents=True, exist_ok=True)

    selection = json.loads(selection_path.read_text())
    path = selection["path"]
    lambdas = np.array(path["lambdas"])
    cv_mean = np.array(path["cv_mean"])
    cv_se = np.array(path["cv_se"])

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.fill_between(np.log10(lambdas), cv_mean - cv_se, cv_mean + cv_se, alpha=0.25, label="±1 SE")
    ax.plot(np.log10(lambdas), cv_mean, marker=".", lw=1)
    ax.axvline(np.log10(path["lambda_min"]), color="tab:green", ls="--", label="lambda_min")
    ax.axvline(np.log10(path["lambda_1se"]), color="tab:red", ls="--", label="lambda_1se")
    ax.set_xlabel("log10 lambda")
    ax.set_ylabel("CV mean squared error")
    ax.legend()
    fig.tight_layout()
    cv_plot = ws.report_dir / "cv_curve.png"
    fig.savefig(cv_plot, dpi=120)
    plt.close(fig)

    weights = json.loads(weights_path.read_text())
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(list(weights.values()), bins=20, edgecolor="black")
    ax.set_xlabel("sampling weight (mean 1)")
    ax.set_ylabel("training cases")
    fig.tight_layout()
    weights_plot = ws.report_dir / "weights_hist.png"
    fig.savefig(weights_plot, dpi=120)
    plt.close(fig)

    reports = {
        arm: EvalReport.read_csv(ws.require(ws.arm_dir(arm) / "eval_test.csv", "evaluate"))
        for arm in ARMS
    }
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for ax, metric in zip(axes, ("dice", "surface_dice")):
        data, labels = [], []
        for class_name in CLASS_NAMES:
            for arm in ARMS:
                data.append(list(reports[arm].per_case(class_name, metric).values()))
                labels.append(f"{class_name}\n{arm}")
        ax.boxplot(data, tick_labels=labels)
        ax.set_title(metric)
        ax.tick_params(axis="x", labelrotation=90, labelsize=7)
    fig.tight_layout()
    box_plot = ws.report_dir / "dice_box.png"
    fig.savefig(box_plot, dpi=120)
    plt.close(fig)

    comparison = json.loads(comparison_path.read_text())
    lines = ["metric, baseline mean (sd), cognizant mean (sd), test, p"]
    for metric, row in comparison.items():
        lines.append(
            f"{metric}, {row['baseline']['mean']:.4f} ({row['baseline']['sd']:.4f}), "
            f"{row['cognizant']['mean']:.4f} ({row['cognizant']['sd']:.4f}), "
            f"{row['test_used']}, {row['p_value']:.4f}"
        )
    summary_path = ws.report_dir / "summary.txt"
    _atomic_write_text(summary_path, "\n".join(lines) + "\n")

    artifacts = ws.record("report", cv_plot, weights_plot, box_plot, summary_path)
    return StageResult(
        stage="report",
        artifacts=artifacts,
        summary={"files": artifacts},
    )


def run_all_plan() -> list[tuple]:
    """(stage function, extra args) pairs for the full experiment, in order."""
    return [
        (stage_synth,),
        (stage_split,),
        (stage_preprocess,),
        (stage_train, "uniform"),
        (stage_predict, "baseline", "val"),
        (stage_evaluate, "baseline", "val"),
        (stage_select_features,),
        (stage_retrain,),
        (stage_predict, "baseline", "test"),
        (stage_evaluate, "baseline", "test"),
        (stage_predict, "cognizant", "test"),
        (stage_evaluate, "cognizant", "test"),
        (stage_compare,),
        (stage_report,),
    ]


def run_all(config: ExperimentConfig) -> list[StageResult]:
    """The full two-arm experiment in dependency order."""
    return [step[0](config, *step[1:]) for step in run_all_plan()]
