"""Loss functions, case samplers, LR schedule, and the training loop.

The sampling strategy is the single point of variation between the two
experimental arms: uniform draws for the baseline, weight-proportional
draws for the cognizant arm. Everything else (loss, optimizer, schedule,
patching, augmentation) is shared.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import unet3d
from .preprocess import AugmentConfig, PatchSpec, PreprocessedCase, augment, extract_patch
from .unet3d import UNet3D, forward_pass, save_checkpoint


@dataclass
class LossConfig:
    """Equally weighted Dice + weighted cross-entropy by default."""

    dice_weight: float = 1.0
    ce_weight: float = 1.0
    ce_class_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    smooth: float = 1e-5

    def __post_init__(self):
        if any(w <= 0 for w in self.ce_class_weights):
            raise ValueError(f"class weights must be positive, got {self.ce_class_weights}")
        if self.smooth <= 0:
            raise ValueError("smooth must be positive")


@dataclass
class TrainConfig:
    epochs: int = 100
    samples_per_epoch: int = 400
    batch_size: int = 2
    lr0: float = 0.005
    plateau_factor: float = 0.3
    plateau_patience: int = 10
    improvement_threshold: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.samples_per_epoch < 1 or self.epochs < 1:
            raise ValueError("epochs, samples_per_epoch and batch_size must be >= 1")
        if self.samples_per_epoch % self.batch_size != 0:
            raise ValueError(
                f"samples_per_epoch {self.samples_per_epoch} must be divisible by "
                f"batch_size {self.batch_size}"
            )

    @property
    def steps_per_epoch(self) -> int:
        return self.samples_per_epoch // self.batch_size


@dataclass
class SamplingWeights:
    """Per-case positive draw weights over the training split, mean-normalized to 1."""

    weights: dict[str, float]

    def __post_init__(self):
        if not self.weights:
            raise ValueError("weights must not be empty")
        if any(w <= 0 for w in self.weights.values()):
            raise ValueError("all sampling weights must be strictly positive")
        mean = sum(self.weights.values()) / len(self.weights)
        self.weights = {k: v / mean for k, v in self.weights.items()}

    @classmethod
    def uniform(cls, case_ids) -> "SamplingWeights":
        return cls({cid: 1.0 for cid in case_ids})

    def to_json(self, path: str | Path) -> None:
        ordered = {k: self.weights[k] for k in sorted(self.weights)}
        Path(path).write_text(json.dumps(ordered, indent=2))

    @classmethod
    def from_json(cls, path: str | Path) -> "SamplingWeights":
        return cls(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def soft_dice_loss(probabilities: torch.Tensor, target: torch.Tensor, smooth: float = 1e-5) -> torch.Tensor:
    """1 - mean foreground Dice, sums pooled over batch and voxels per class.

    Background is excluded so its dominance cannot swamp the foreground
    signal.
    """
    if probabilities.shape[0] != target.shape[0] or probabilities.shape[2:] != target.shape[1:]:
        raise ValueError(
            f"probabilities {tuple(probabilities.shape)} and target {tuple(target.shape)} disagree"
        )
    num_classes = probabilities.shape[1]
    dice_per_class = []
    for cls in range(1, num_classes):
        p = probabilities[:, cls]
        t = (target == cls).to(probabilities.dtype)
        numerator = 2.0 * (p * t).sum() + smooth
        denominator = p.sum() + t.sum() + smooth
        dice_per_class.append(numerator / denominator)
    return 1.0 - torch.stack(dice_per_class).mean()


def weighted_cross_entropy(scores: torch.Tensor, target: torch.Tensor, class_weights) -> torch.Tensor:
    """Mean over voxels of w[t] * (-log p[t]); uniform weights give plain CE."""
    if scores.shape[0] != target.shape[0] or scores.shape[2:] != target.shape[1:]:
        raise ValueError(f"scores {tuple(scores.shape)} and target {tuple(target.shape)} disagree")
    w = torch.as_tensor(class_weights, dtype=scores.dtype, device=scores.device)
    if (w <= 0).any():
        raise ValueError("class weights must be positive")
    log_probs = torch.log_softmax(scores, dim=1)
    nll = -log_probs.gather(1, target.long().unsqueeze(1)).squeeze(1)
    return (w[target.long()] * nll).mean()


def combined_loss(
    scores: torch.Tensor,
    probabilities: torch.Tensor,
    target: torch.Tensor,
    config: LossConfig,
) -> torch.Tensor:
    dice = soft_dice_loss(probabilities, target, config.smooth)
    ce = weighted_cross_entropy(scores, target, config.ce_class_weights)
    return config.dice_weight * dice + config.ce_weight * ce


def inverse_sqrt_class_weights(label_volumes, num_classes: int = 4) -> tuple[float, ...]:
    """CE class weights proportional to 1/sqrt(voxel frequency), mean 1.

    Counts are add-one smoothed so a class absent from the training labels
    stays finite.
    """
    counts = np.zeros(num_classes, dtype=np.float64)
    for vol in label_volumes:
        counts += np.bincount(np.asarray(vol).ravel(), minlength=num_classes)[:num_classes]
    weights = 1.0 / np.sqrt(counts + 1.0)
    weights /= weights.mean()
    return tuple(float(w) for w in weights)


# ---------------------------------------------------------------------------
# Sampler and scheduler
# ---------------------------------------------------------------------------


class CaseSampler:
    """Draws case ids i.i.d. with replacement, P(case) proportional to weight."""

    def __init__(self, case_ids, weights: SamplingWeights | None, seed: int):
        self.case_ids = sorted(case_ids)
        if not self.case_ids:
            raise ValueError("sampler needs at least one case id")
        if weights is None:
            w = np.ones(len(self.case_ids))
        else:
            if set(weights.weights) != set(self.case_ids):
                missing = set(self.case_ids) - set(weights.weights)
                extra = set(weights.weights) - set(self.case_ids)
                raise ValueError(
                    f"weights must cover exactly the split ids (missing={sorted(missing)}, "
                    f"unknown={sorted(extra)})"
                )
            w = np.array([weights.weights[cid] for cid in self.case_ids])
        self.probabilities = w / w.sum()
        self._rng = np.random.default_rng(seed)

    def draw(self, n: int) -> list[str]:
        idx = self._rng.choice(len(self.case_ids), size=n, replace=True, p=self.probabilities)
        return [self.case_ids[i] for i in idx]


def make_sampler(
    train_ids, weights: SamplingWeights | None = None, seed: int = 0
) -> CaseSampler:
    """Uniform sampler when weights is None, else weight-proportional."""
    return CaseSampler(train_ids, weights, seed)


class PlateauScheduler:
    """Multiply lr by `factor` after `patience` epochs without improvement.

    An improvement is a validation loss at least `threshold` below the
    best so far; a reduction restarts the patience window.
    """

    def __init__(self, lr0: float, factor: float = 0.3, patience: int = 10, threshold: float = 1e-6):
        if lr0 <= 0:
            raise ValueError("lr0 must be positive")
        self.lr = lr0
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = float("inf")
        self.stale_epochs = 0

    def step(self, val_loss: float) -> float:
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.stale_epochs = 0
        else:
            self.stale_epochs += 1
            if self.stale_epochs >= self.patience:
                self.lr *= self.factor
                self.stale_epochs = 0
        return self.lr


def plateau_lr(history, lr0: float, factor: float = 0.3, patience: int = 10) -> float:
    """Replay a validation-loss history and return the resulting learning rate."""
    scheduler = PlateauScheduler(lr0, factor=factor, patience=patience)
    lr = lr0
    for val_loss in history:
        lr = scheduler.step(val_loss)
    return lr


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    sampled_case_ids: list[str]


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    best_val_loss: float
    log_path: Path
    best_checkpoint: Path
    last_checkpoint: Path


def _fixed_validation_patches(cases: list[PreprocessedCase], spec: PatchSpec, seed: int):
    """One foreground-centered patch per validation case, fixed across epochs."""
    patches = []
    for i, case in enumerate(cases):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        img, lbl = extract_patch(case.image, case.annotations[0], spec, rng, foreground_bias=1.0)
        patches.append(
            (
                torch.from_numpy(img[None, None].astype(np.float32)),
                torch.from_numpy(lbl[None].astype(np.int64)),
            )
        )
    return patches


def _validation_loss(model: UNet3D, patches, loss_config: LossConfig) -> float:
    model.eval()
    losses = []
    with torch.no_grad():
        for img, lbl in patches:
            probs, scores = forward_pass(model, img)
            losses.append(float(combined_loss(scores, probs, lbl, loss_config)))
    model.train()
    return float(np.mean(losses))


def train_model(
    model: UNet3D,
    cases: dict[str, PreprocessedCase],
    train_ids: list[str],
    val_ids: list[str],
    sampler: CaseSampler,
    train_config: TrainConfig,
    loss_config: LossConfig,
    patch_spec: PatchSpec,
    out_dir: str | Path,
    augment_config: AugmentConfig | None = None,
    foreground_bias: float = 0.5,
) -> TrainResult:
    """Run the full epoch loop; persists best/last checkpoints and a JSONL log.

    Each epoch draws `samples_per_epoch` case ids from the sampler, one
    patch per draw, and logs the drawn multiset. Validation loss is
    computed on fixed patches so the plateau signal is comparable across
    epochs. Aborts on non-finite loss.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    best_path = out_dir / "checkpoint_best.pt"
    last_path = out_dir / "checkpoint_last.pt"

    torch.manual_seed(train_config.seed)
    rng = np.random.default_rng(np.random.SeedSequence((train_config.seed, 0xC0DE)))
    optimizer = torch.optim.Adam(
        model.parameters(), lr=train_config.lr0, betas=(0.9, 0.999), eps=1e-8
    )
    scheduler = PlateauScheduler(
        train_config.lr0,
        factor=train_config.plateau_factor,
        patience=train_config.plateau_patience,
        threshold=train_config.improvement_threshold,
    )
    val_patches = _fixed_validation_patches(
        [cases[cid] for cid in val_ids], patch_spec, train_config.seed
    )

    history: list[EpochRecord] = []
    best_val = float("inf")
    best_epoch = -1
    model.train()
    with open(log_path, "w") as log:
        for epoch in range(train_config.epochs):
            epoch_ids = sampler.draw(train_config.samples_per_epoch)
            losses = []
            for step in range(train_config.steps_per_epoch):
                batch_ids = epoch_ids[
                    step * train_config.batch_size : (step + 1) * train_config.batch_size
                ]
                imgs, lbls = [], []
                for cid in batch_ids:
                    case = cases[cid]
                    group = int(rng.integers(len(case.annotations)))
                    img, lbl = extract_patch(
                        case.image, case.annotations[group], patch_spec, rng, foreground_bias
                    )
                    img, lbl = augment(img, lbl, rng, augment_config)
                    imgs.append(img)
                    lbls.append(lbl)
                batch = torch.from_numpy(np.stack(imgs)[:, None].astype(np.float32))
                target = torch.from_numpy(np.stack(lbls).astype(np.int64))

                optimizer.zero_grad()
                probs, scores = forward_pass(model, batch)
                loss = combined_loss(scores, probs, target, loss_config)
                if not torch.isfinite(loss):
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch}, step {step} (cases {batch_ids})"
                    )
                loss.backward()
                optimizer.step()
                losses.append(float(loss.detach()))

            val_loss = _validation_loss(model, val_patches, loss_config)
            lr = scheduler.step(val_loss)
            for group in optimizer.param_groups:
                group["lr"] = lr

            record = EpochRecord(
                epoch=epoch,
                train_loss=float(np.mean(losses)),
                val_loss=val_loss,
                lr=lr,
                sampled_case_ids=epoch_ids,
            )
            history.append(record)
            log.write(json.dumps(asdict(record)) + "\n")
            log.flush()

            if val_loss < best_val - train_config.improvement_threshold:
                best_val = val_loss
                best_epoch = epoch
                save_checkpoint(best_path, model, optimizer, epoch, extra={"val_loss": val_loss})
            save_checkpoint(last_path, model, optimizer, epoch, extra={"val_loss": val_loss})

    if best_epoch < 0:  # no epoch improved on +inf only if epochs == 0
        save_checkpoint(best_path, model, optimizer, 0, extra={})
    return TrainResult(
        history=history,
        best_epoch=max(best_epoch, 0),
        best_val_loss=best_val,
        log_path=log_path,
        best_checkpoint=best_path,
        last_checkpoint=last_path,
    )


def read_train_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
