"""Cohort data model, on-disk ingestion, splitting, and a synthetic phantom generator.

A cohort directory looks like::

    cohort/
      images/<case_id>.nii.gz
      annotations/<case_id>_g<k>.nii.gz     one file per annotation group
      clinical.json                         list of {"case_id": ..., <dot.path>: value}
      meta.json                             generator settings (seed, hard case ids)

Clinical characteristics are flattened with dot-paths and a JSON null
marks a missing value, so complete-case filtering downstream can tell
"absent" from any legal value.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nifti

LABEL_BACKGROUND = 0
LABEL_KIDNEY = 1
LABEL_TUMOR = 2
LABEL_CYST = 3
VALID_LABELS = frozenset({0, 1, 2, 3})


@dataclass
class CtVolume:
    """Scalar 3D image with anisotropic (z, y, x) voxel spacing in mm."""

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    case_id: str

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or self.voxels.size == 0:
            raise ValueError(f"{self.case_id}: voxel array must be non-empty and 3D")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"{self.case_id}: spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass
class LabelMap:
    """Integer segmentation over {0 bg, 1 kidney, 2 tumor, 3 cyst}."""

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    case_id: str
    annotation_group: int = 0

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3 or self.voxels.size == 0:
            raise ValueError(f"{self.case_id}: label array must be non-empty and 3D")
        if not np.issubdtype(self.voxels.dtype, np.integer):
            raise ValueError(f"{self.case_id}: labels must be integer, got {self.voxels.dtype}")
        present = set(np.unique(self.voxels).tolist())
        if not present <= VALID_LABELS:
            raise ValueError(
                f"{self.case_id}: label values outside 0..3: {sorted(present - VALID_LABELS)}"
            )
        self.spacing = tuple(float(s) for s in self.spacing)
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"{self.case_id}: spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass
class ClinicalRecord:
    """Per-case characteristics; None marks a missing value."""

    case_id: str
    entries: dict[str, bool | str | float | None] = field(default_factory=dict)


@dataclass
class DatasetSplit:
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    seed: int

    def all_ids(self) -> list[str]:
        return self.train_ids + self.val_ids + self.test_ids

    def to_dict(self) -> dict:
        return {
            "train": list(self.train_ids),
            "val": list(self.val_ids),
            "test": list(self.test_ids),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(list(d["train"]), list(d["val"]), list(d["test"]), int(d["seed"]))


@dataclass
class Case:
    image: CtVolume
    annotations: list[LabelMap]
    clinical: ClinicalRecord

    def __post_init__(self):
        if not self.annotations:
            raise ValueError(f"{self.image.case_id}: a case needs at least one annotation group")
        for ann in self.annotations:
            _check_geometry(self.image, ann)

    @property
    def case_id(self) -> str:
        return self.image.case_id


def _check_geometry(image: CtVolume, annotation: LabelMap) -> None:
    if annotation.shape != image.shape:
        raise ValueError(
            f"{image.case_id}: annotation shape {annotation.shape} does not match "
            f"image shape {image.shape}"
        )
    if not np.allclose(annotation.spacing, image.spacing, rtol=1e-4, atol=1e-4):
        raise ValueError(
            f"{image.case_id}: annotation spacing {annotation.spacing} does not match "
            f"image spacing {image.spacing}"
        )


def load_case(image_path, annotation_paths, clinical: ClinicalRecord) -> Case:
    """Load one case from NIfTI files, validating geometry and label domain."""
    vox, spacing = nifti.read_volume(image_path)
    image = CtVolume(vox.astype(np.float32), spacing, clinical.case_id)
    annotations = []
    for group, ann_path in enumerate(annotation_paths):
        avox, aspacing = nifti.read_volume(ann_path)
        ann = LabelMap(np.rint(avox).astype(np.int16), aspacing, clinical.case_id, group)
        annotations.append(ann)
    return Case(image, annotations, clinical)


def split_dataset(case_ids, fractions, seed: int) -> DatasetSplit:
    """Shuffle case ids and partition them into train/val/test.

    Val and test sizes are the half-up rounded fractions; whatever remains
    goes to train, so e.g. 300 cases at (0.7, 0.2, 0.1) gives 210/60/30.
    """
    case_ids = list(case_ids)
    n = len(case_ids)
    if n < 3:
        raise ValueError(f"need at least 3 cases to split, got {n}")
    if len(set(case_ids)) != n:
        raise ValueError("case ids must be unique")
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError(f"fractions must be three positive values, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")

    n_val = int(math.floor(n * fractions[1] + 0.5))
    n_test = int(math.floor(n * fractions[2] + 0.5))
    n_train = n - n_val - n_test
    for name, size in (("train", n_train), ("val", n_val), ("test", n_test)):
        if size <= 0:
            raise ValueError(f"degenerate split: {name} would get {size} cases")

    # sort before shuffling so the split depends only on the id set and seed
    case_ids = sorted(case_ids)
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [case_ids[i] for i in order]
    return DatasetSplit(
        train_ids=shuffled[:n_train],
        val_ids=shuffled[n_train : n_train + n_val],
        test_ids=shuffled[n_train + n_val :],
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Synthetic phantom cohort
# ---------------------------------------------------------------------------

# HU-like intensity levels; chosen for a contrast ordering loosely similar to
# contrast-enhanced CT, not as claims about real scans.
INTENSITY_BACKGROUND = -50.0
INTENSITY_KIDNEY = 120.0
INTENSITY_TUMOR = 60.0
INTENSITY_TUMOR_HARD = 100.0
INTENSITY_CYST = 10.0
NOISE_SIGMA = 15.0

MIN_PHANTOM_DIM = 32


@dataclass
class SyntheticCohort:
    """Generated cases plus the generator's ground-truth difficulty flags."""

    cases: list[Case]
    hard_case_ids: list[str]

    def is_hard(self, case_id: str) -> bool:
        return case_id in set(self.hard_case_ids)


def _ellipsoid(shape, center, radii) -> np.ndarray:
    zz, yy, xx = np.ogrid[: shape[0], : shape[1], : shape[2]]
    return (
        ((zz - center[0]) / radii[0]) ** 2
        + ((yy - center[1]) / radii[1]) ** 2
        + ((xx - center[2]) / radii[2]) ** 2
    ) <= 1.0


def _rasterize_labels(shape, kidney, tumor, cyst) -> np.ndarray:
    """Paint kidney/tumor/cyst ellipsoids; tumor wins over cyst wins over kidney."""
    labels = np.zeros(shape, dtype=np.int16)
    labels[_ellipsoid(shape, *kidney)] = LABEL_KIDNEY
    if cyst is not None:
        labels[_ellipsoid(shape, *cyst)] = LABEL_CYST
    center, radii = tumor
    tumor_mask = _ellipsoid(shape, center, radii)
    labels[tumor_mask] = LABEL_TUMOR
    # The tumor center is snapped to the voxel grid, so this only fires for
    # degenerate jitter; it keeps the "tumor is never empty" guarantee.
    if not tumor_mask.any():
        labels[tuple(int(round(c)) for c in center)] = LABEL_TUMOR
    return labels


def _jitter_geometry(rng, center, radii, shape):
    center = tuple(
        float(np.clip(c + rng.uniform(-1.0, 1.0), 1, s - 2))
        for c, s in zip(center, shape)
    )
    radii = tuple(max(1.0, r * (1.0 + rng.uniform(-0.06, 0.06))) for r in radii)
    return center, radii


def generate_synthetic_cohort(
    n_cases: int,
    volume_shape: tuple[int, int, int],
    n_annotation_groups: int,
    hard_fraction: float,
    seed: int,
    spacing: tuple[float, float, float] = (3.0, 1.5, 1.5),
) -> SyntheticCohort:
    """Deterministic phantom cohort with known difficulty/characteristic coupling.

    Each case is an ellipsoidal kidney with an embedded tumor blob and an
    optional cyst. floor(n_cases * hard_fraction) cases are "hard": their
    tumors are smaller and closer in intensity to the kidney, and their
    clinical records carry the designated hard-subgroup values (never
    smoked, no chronic kidney disease, partial nephrectomy). Annotation
    groups are jittered rasterizations of the same underlying instance.
    """
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    if n_annotation_groups < 1:
        raise ValueError("n_annotation_groups must be >= 1")
    if not 0.0 <= hard_fraction <= 1.0:
        raise ValueError("hard_fraction must lie in [0, 1]")
    shape = tuple(int(d) for d in volume_shape)
    if len(shape) != 3 or any(d < MIN_PHANTOM_DIM for d in shape):
        raise ValueError(
            f"volume_shape {shape} too small to contain the phantom (min {MIN_PHANTOM_DIM} per axis)"
        )

    master = np.random.default_rng(seed)
    n_hard = int(math.floor(n_cases * hard_fraction))
    hard_flags = np.zeros(n_cases, dtype=bool)
    hard_flags[master.permutation(n_cases)[:n_hard]] = True
    case_seeds = np.random.SeedSequence(seed).spawn(n_cases)

    cases, hard_ids = [], []
    for i in range(n_cases):
        rng = np.random.default_rng(case_seeds[i])
        case_id = f"case_{i:05d}"
        hard = bool(hard_flags[i])
        case = _generate_case(rng, case_id, shape, spacing, n_annotation_groups, hard)
        cases.append(case)
        if hard:
            hard_ids.append(case_id)
    return SyntheticCohort(cases=cases, hard_case_ids=hard_ids)


def _generate_case(rng, case_id, shape, spacing, n_groups, hard) -> Case:
    dims = np.array(shape, dtype=float)
    kidney_center = tuple(dims / 2.0 + rng.uniform(-0.05, 0.05) * dims)
    kidney_radii = tuple(rng.uniform(0.26, 0.34) * dims)

    # Tumor sits at a fixed fraction of the kidney radius from its center,
    # snapped to the voxel grid so at least the center voxel is inside.
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    offset = direction * 0.4 * np.array(kidney_radii)
    tumor_center = tuple(float(round(c + o)) for c, o in zip(kidney_center, offset))
    rel = rng.uniform(0.16, 0.22) if hard else rng.uniform(0.34, 0.46)
    tumor_radii = tuple(max(1.6, rel * r) for r in kidney_radii)

    cyst = None
    if rng.uniform() < 0.5:
        cyst_center = tuple(
            float(round(c - o * 0.9)) for c, o in zip(kidney_center, offset)
        )
        cyst_radii = tuple(max(1.2, 0.15 * r) for r in kidney_radii)
        cyst = (cyst_center, cyst_radii)

    base_labels = _rasterize_labels(shape, (kidney_center, kidney_radii), (tumor_center, tumor_radii), cyst)

    tumor_intensity = INTENSITY_TUMOR_HARD if hard else INTENSITY_TUMOR
    intensity = np.full(shape, INTENSITY_BACKGROUND, dtype=np.float32)
    intensity[base_labels == LABEL_KIDNEY] = INTENSITY_KIDNEY
    intensity[base_labels == LABEL_TUMOR] = tumor_intensity
    intensity[base_labels == LABEL_CYST] = INTENSITY_CYST
    intensity += rng.normal(0.0, NOISE_SIGMA, size=shape).astype(np.float32)

    annotations = []
    for g in range(n_groups):
        jk = _jitter_geometry(rng, kidney_center, kidney_radii, shape)
        jt = _jitter_geometry(rng, tumor_center, tumor_radii, shape)
        jc = _jitter_geometry(rng, *cyst, shape) if cyst is not None else None
        labels = _rasterize_labels(shape, jk, jt, jc)
        annotations.append(LabelMap(labels, spacing, case_id, annotation_group=g))

    # Radiographic size in cm: largest tumor diameter, derived from geometry.
    size_cm = 2.0 * max(tumor_radii) * max(spacing) / 10.0
    clinical = ClinicalRecord(
        case_id=case_id,
        entries={
            "age": float(rng.integers(35, 85)),
            "gender": "female" if rng.uniform() < 0.5 else "male",
            "bmi": None if rng.uniform() < 0.08 else round(float(rng.uniform(19, 36)), 1),
            "alcohol_use": "none",
            "comorbidities.chronic_kidney_disease": not hard,
            "smoking_history": "never_smoked" if hard else "previous_smoker",
            "radiographic_size": round(size_cm, 2),
            "surgical_procedure": "partial_nephrectomy" if hard else "radical_nephrectomy",
        },
    )
    image = CtVolume(intensity, spacing, case_id)
    return Case(image, annotations, clinical)


# ---------------------------------------------------------------------------
# Cohort directory IO
# ---------------------------------------------------------------------------


def clinical_to_json(records: list[ClinicalRecord]) -> list[dict]:
    return [{"case_id": r.case_id, **r.entries} for r in records]


def clinical_from_json(items: list[dict]) -> list[ClinicalRecord]:
    records = []
    for item in items:
        entries = {k: v for k, v in item.items() if k != "case_id"}
        records.append(ClinicalRecord(case_id=item["case_id"], entries=entries))
    return records


def write_cohort(cohort: SyntheticCohort, out_dir: str | Path) -> None:
    """Persist a generated cohort (images, per-group annotations, clinical, meta)."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "annotations").mkdir(parents=True, exist_ok=True)
    for case in cohort.cases:
        nifti.write_volume(
            out_dir / "images" / f"{case.case_id}.nii.gz",
            case.image.voxels.astype(np.float32),
            case.image.spacing,
        )
        for ann in case.annotations:
            nifti.write_volume(
                out_dir / "annotations" / f"{case.case_id}_g{ann.annotation_group}.nii.gz",
                ann.voxels.astype(np.uint8),
                ann.spacing,
            )
    clinical = clinical_to_json([c.clinical for c in cohort.cases])
    (out_dir / "clinical.json").write_text(json.dumps(clinical, indent=2))
    meta = {"hard_case_ids": cohort.hard_case_ids, "n_cases": len(cohort.cases)}
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2))


def cohort_case_ids(cohort_dir: str | Path) -> list[str]:
    images = sorted((Path(cohort_dir) / "images").glob("*.nii*"))
    if not images:
        raise FileNotFoundError(f"no images found under {cohort_dir}/images")
    return [p.name.removesuffix(".nii.gz").removesuffix(".nii") for p in images]


def load_cohort(cohort_dir: str | Path, case_ids=None) -> list[Case]:
    """Load cases from a cohort directory; all of them unless case_ids is given."""
    cohort_dir = Path(cohort_dir)
    clinical_path = cohort_dir / "clinical.json"
    if not clinical_path.exists():
        raise FileNotFoundError(f"missing {clinical_path}")
    records = {r.case_id: r for r in clinical_from_json(json.loads(clinical_path.read_text()))}
    if case_ids is None:
        case_ids = cohort_case_ids(cohort_dir)
    cases = []
    for cid in case_ids:
        image_path = cohort_dir / "images" / f"{cid}.nii.gz"
        if not image_path.exists():
            image_path = cohort_dir / "images" / f"{cid}.nii"
        ann_paths = sorted((cohort_dir / "annotations").glob(f"{cid}_g*.nii*"))
        if cid not in records:
            raise ValueError(f"{cid}: no clinical record in {clinical_path}")
        cases.append(load_case(image_path, ann_paths, records[cid]))
    return cases
