"""Geometry harmonization, intensity normalization, augmentation, and patching.

Images are resampled with a separable Lanczos (order-3 window) kernel,
label maps with nearest neighbor. Intensity statistics are fit on the
pooled annotated voxels of the training cases only: truncation bounds at
the 0.5/99.5 percentiles, then mean/std of the truncated pool.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .cohort import Case, CtVolume, LabelMap


@dataclass
class IntensityStats:
    """Truncation percentiles plus post-truncation mean/std of the annotated pool."""

    p_low: float
    p_high: float
    mean: float
    std: float

    def __post_init__(self):
        if self.p_low > self.p_high:
            raise ValueError(f"p_low {self.p_low} > p_high {self.p_high}")
        if self.std <= 0:
            raise ValueError(f"std must be positive, got {self.std}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "IntensityStats":
        return cls(d["p_low"], d["p_high"], d["mean"], d["std"])


@dataclass
class PatchSpec:
    """Training patch size; each dim must survive four 2x poolings."""

    size: tuple[int, int, int]

    def __post_init__(self):
        self.size = tuple(int(s) for s in self.size)
        if len(self.size) != 3 or any(s <= 0 or s % 16 != 0 for s in self.size):
            raise ValueError(f"patch dims must be positive multiples of 16, got {self.size}")


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------


def _output_size(in_size: int, in_spacing: float, target: float) -> int:
    return max(1, int(math.floor(in_size * in_spacing / target + 0.5)))


def _lanczos_matrix(in_size: int, out_size: int, a: int = 3) -> np.ndarray:
    """Dense (out_size, in_size) interpolation matrix, edge-clamped, rows sum to 1."""
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    base = np.floor(src).astype(int)
    weights = np.zeros((out_size, in_size))
    for k in range(-a + 1, a + 1):
        idx = base + k
        t = src - idx
        w = np.sinc(t) * np.sinc(t / a)
        w[np.abs(t) >= a] = 0.0
        np.add.at(weights, (np.arange(out_size), np.clip(idx, 0, in_size - 1)), w)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights


def _nearest_indices(in_size: int, out_size: int) -> np.ndarray:
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    return np.clip(np.floor(src + 0.5).astype(int), 0, in_size - 1)


def resample(volume: CtVolume | LabelMap, target_spacing) -> CtVolume | LabelMap:
    """Resample to target (z, y, x) spacing; Lanczos for images, nearest for labels."""
    target = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in target):
        raise ValueError(f"target spacing must be positive, got {target}")
    out_shape = tuple(
        _output_size(n, sp, t) for n, sp, t in zip(volume.shape, volume.spacing, target)
    )

    if out_shape == volume.shape and np.allclose(volume.spacing, target, rtol=1e-12):
        vox = volume.voxels.copy()
    elif isinstance(volume, LabelMap):
        iz, iy, ix = (_nearest_indices(n, m) for n, m in zip(volume.shape, out_shape))
        vox = volume.voxels[np.ix_(iz, iy, ix)]
    else:
        vox = volume.voxels.astype(np.float64)
        for axis in range(3):
            if out_shape[axis] != vox.shape[axis]:
                mat = _lanczos_matrix(vox.shape[axis], out_shape[axis])
                vox = np.moveaxis(np.tensordot(mat, vox, axes=(1, axis)), 0, axis)
        vox = vox.astype(np.float32)

    if isinstance(volume, LabelMap):
        return LabelMap(vox, target, volume.case_id, volume.annotation_group)
    return CtVolume(vox, target, volume.case_id)


# ---------------------------------------------------------------------------
# Intensity statistics
# ---------------------------------------------------------------------------


def fit_intensity_stats(training_cases: list[Case]) -> IntensityStats:
    """Fit truncation/standardization stats on the pooled annotated voxels.

    A voxel counts as annotated when any annotation group marks it
    foreground. Percentiles interpolate linearly between order statistics.
    """
    pools = []
    for case in training_cases:
        annotated = np.zeros(case.image.shape, dtype=bool)
        for ann in case.annotations:
            annotated |= ann.voxels > 0
        if annotated.any():
            pools.append(case.image.voxels[annotated].astype(np.float64))
    if not pools:
        raise ValueError("no annotated voxels in the training cases")
    pool = np.concatenate(pools)
    if pool.size < 2:
        raise ValueError(f"need at least 2 annotated voxels, got {pool.size}")

    p_low, p_high = np.percentile(pool, [0.5, 99.5])
    truncated = np.clip(pool, p_low, p_high)
    std = float(truncated.std())
    if std == 0.0:
        raise ValueError("annotated intensities have zero variance after truncation")
    return IntensityStats(float(p_low), float(p_high), float(truncated.mean()), std)


def normalize(volume: CtVolume, stats: IntensityStats) -> CtVolume:
    """Truncate to [p_low, p_high] and standardize with the fitted mean/std."""
    vox = np.clip(volume.voxels, stats.p_low, stats.p_high)
    vox = (vox - stats.mean) / stats.std
    return CtVolume(vox.astype(np.float32), volume.spacing, volume.case_id)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass
class AugmentConfig:
    """Per-transform trigger probabilities and magnitude ranges.

    Intensity magnitudes are in post-normalization units. Spatial
    transforms are applied identically to image and label (label resampled
    nearest neighbor); all transforms preserve the patch shape.
    """

    prob: float = 0.15
    mirror_prob: float = 0.5
    gamma_range: tuple[float, float] = (0.7, 1.5)
    contrast_range: tuple[float, float] = (0.75, 1.25)
    brightness_range: tuple[float, float] = (-0.2, 0.2)
    noise_sigma_max: float = 0.1
    blur_sigma_range: tuple[float, float] = (0.5, 1.0)
    scale_range: tuple[float, float] = (0.85, 1.15)
    rotate_max_deg: float = 15.0

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(prob=0.0, mirror_prob=0.0)


def mirror(image: np.ndarray, label: np.ndarray, axes) -> tuple[np.ndarray, np.ndarray]:
    return np.flip(image, axes).copy(), np.flip(label, axes).copy()


def _affine_pair(image, label, matrix, offset):
    img = ndimage.affine_transform(image, matrix, offset=offset, order=1, mode="constant", cval=0.0)
    lbl = ndimage.affine_transform(label, matrix, offset=offset, order=0, mode="constant", cval=0)
    return img, lbl


def _rotation_matrix(angles_deg) -> np.ndarray:
    rz, ry, rx = (math.radians(a) for a in angles_deg)
    cz, sz = math.cos(rz), math.sin(rz)
    cy, sy = math.cos(ry), math.sin(ry)
    cx, sx = math.cos(rx), math.sin(rx)
    m_z = np.array([[1, 0, 0], [0, cz, -sz], [0, sz, cz]])  # rotation about axis 0
    m_y = np.array([[cy, 0, -sy], [0, 1, 0], [sy, 0, cy]])
    m_x = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]])
    return m_z @ m_y @ m_x


def augment(
    image: np.ndarray,
    label: np.ndarray,
    rng: np.random.Generator,
    config: AugmentConfig | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Apply each configured augmentation independently with its probability.

    Deterministic for a given generator state; returns copies, inputs are
    never modified.
    """
    config = config or AugmentConfig()
    image = np.asarray(image, dtype=np.float32).copy()
    label = np.asarray(label).copy()
    if image.shape != label.shape:
        raise ValueError(f"image shape {image.shape} != label shape {label.shape}")

    flip_axes = tuple(ax for ax in range(3) if rng.uniform() < config.mirror_prob)
    if flip_axes:
        image, label = mirror(image, label, flip_axes)

    if rng.uniform() < config.prob:
        factor = rng.uniform(*config.scale_range)
        center = (np.array(image.shape) - 1) / 2.0
        matrix = np.eye(3) / factor
        offset = center - matrix @ center
        image, label = _affine_pair(image, label, matrix, offset)

    if rng.uniform() < config.prob:
        angles = rng.uniform(-config.rotate_max_deg, config.rotate_max_deg, size=3)
        matrix = _rotation_matrix(angles)
        center = (np.array(image.shape) - 1) / 2.0
        offset = center - matrix @ center
        image, label = _affine_pair(image, label, matrix, offset)

    if rng.uniform() < config.prob:
        gamma = rng.uniform(*config.gamma_range)
        lo, hi = float(image.min()), float(image.max())
        if hi > lo:
            image = ((image - lo) / (hi - lo)) ** gamma * (hi - lo) + lo

    if rng.uniform() < config.prob:
        factor = rng.uniform(*config.contrast_range)
        mean = image.mean()
        image = (image - mean) * factor + mean

    if rng.uniform() < config.prob:
        image = image + rng.uniform(*config.brightness_range)

    if rng.uniform() < config.prob:
        sigma = rng.uniform(0.0, config.noise_sigma_max)
        image = image + rng.normal(0.0, sigma, size=image.shape)

    if rng.uniform() < config.prob:
        sigma = rng.uniform(*config.blur_sigma_range)
        image = ndimage.gaussian_filter(image, sigma)

    return image.astype(np.float32), label


# ---------------------------------------------------------------------------
# Patch extraction
# ---------------------------------------------------------------------------


def _pad_to(volume: np.ndarray, size, pad_value=0) -> np.ndarray:
    pads = []
    for dim, target in zip(volume.shape, size):
        total = max(0, target - dim)
        pads.append((total // 2, total - total // 2))
    if any(p != (0, 0) for p in pads):
        volume = np.pad(volume, pads, mode="constant", constant_values=pad_value)
    return volume


def extract_patch(
    image: np.ndarray,
    label: np.ndarray,
    spec: PatchSpec,
    rng: np.random.Generator,
    foreground_bias: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Cut one training patch, optionally centered on a random foreground voxel.

    Volumes smaller than the patch are zero-padded symmetrically first.
    With probability foreground_bias the center is drawn uniformly from
    label > 0 voxels (uniform over the volume when there are none).
    """
    if image.shape != label.shape:
        raise ValueError(f"image shape {image.shape} != label shape {label.shape}")
    image = _pad_to(np.asarray(image), spec.size, 0.0)
    label = _pad_to(np.asarray(label), spec.size, 0)

    use_foreground = rng.uniform() < foreground_bias
    if use_foreground:
        fg = np.argwhere(label > 0)
        if len(fg):
            center = fg[rng.integers(len(fg))]
        else:
            use_foreground = False
    if not use_foreground:
        center = np.array([rng.integers(d) for d in label.shape])

    starts = [
        int(np.clip(c - p // 2, 0, d - p))
        for c, p, d in zip(center, spec.size, label.shape)
    ]
    sl = tuple(slice(s, s + p) for s, p in zip(starts, spec.size))
    return image[sl].copy(), label[sl].copy()


# ---------------------------------------------------------------------------
# Preprocessed case store
# ---------------------------------------------------------------------------


@dataclass
class PreprocessedCase:
    """Resampled + normalized image with its resampled annotation groups."""

    case_id: str
    image: np.ndarray
    annotations: list[np.ndarray]
    spacing: tuple[float, float, float]
    original_spacing: tuple[float, float, float] = field(default=(1.0, 1.0, 1.0))


def preprocess_case(case: Case, target_spacing, stats: IntensityStats) -> PreprocessedCase:
    image = normalize(resample(case.image, target_spacing), stats)
    annotations = [resample(a, target_spacing).voxels.astype(np.int16) for a in case.annotations]
    return PreprocessedCase(
        case_id=case.case_id,
        image=image.voxels,
        annotations=annotations,
        spacing=tuple(float(s) for s in target_spacing),
        original_spacing=case.image.spacing,
    )


def save_preprocessed(pc: PreprocessedCase, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    case_dir = out_dir / pc.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    np.save(case_dir / "image.npy", pc.image.astype(np.float32))
    for g, ann in enumerate(pc.annotations):
        np.save(case_dir / f"annotation_g{g}.npy", ann.astype(np.int16))
    sidecar = {
        "case_id": pc.case_id,
        "spacing": list(pc.spacing),
        "original_spacing": list(pc.original_spacing),
        "n_annotation_groups": len(pc.annotations),
    }
    (case_dir / "sidecar.json").write_text(json.dumps(sidecar, indent=2))


def load_preprocessed(case_dir: str | Path) -> PreprocessedCase:
    case_dir = Path(case_dir)
    sidecar = json.loads((case_dir / "sidecar.json").read_text())
    image = np.load(case_dir / "image.npy")
    annotations = [
        np.load(case_dir / f"annotation_g{g}.npy")
        for g in range(sidecar["n_annotation_groups"])
    ]
    return PreprocessedCase(
        case_id=sidecar["case_id"],
        image=image,
        annotations=annotations,
        spacing=tuple(sidecar["spacing"]),
        original_spacing=tuple(sidecar["original_spacing"]),
    )
