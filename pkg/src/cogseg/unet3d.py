"""Baseline 3D U-Net: 4-level encoder/decoder with double-conv blocks.

Each block is 2x (Conv3d 3x3x3, pad 1 -> InstanceNorm -> ReLU); pooling is
2x2x2 max pool, upsampling a 2x2x2 stride-2 transposed convolution, with
skip concatenations and a 1x1x1 convolution head over 4 classes. Encoder
widths double per level: 24, 48, 96, 192, bottleneck 384 by default.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import torch
import torch.nn as nn


@dataclass
class NetworkConfig:
    in_channels: int = 1
    base_channels: int = 24
    levels: int = 4
    num_classes: int = 4

    def __post_init__(self):
        if self.in_channels < 1 or self.base_channels < 1 or self.num_classes < 2:
            raise ValueError(f"invalid network config: {self}")
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")

    @property
    def encoder_widths(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2**level for level in range(self.levels + 1))

    @property
    def bottleneck_width(self) -> int:
        return self.encoder_widths[-1]

    @property
    def divisor(self) -> int:
        return 2**self.levels


class DoubleConv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv3d(in_ch, out_ch, kernel_size=3, stride=1, padding=1),
            nn.InstanceNorm3d(out_ch, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv3d(out_ch, out_ch, kernel_size=3, stride=1, padding=1),
            nn.InstanceNorm3d(out_ch, affine=True),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class UNet3D(nn.Module):
    """forward() returns pre-softmax scores of shape B x num_classes x D x H x W."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        widths = config.encoder_widths
        self.encoders = nn.ModuleList(
            [
                DoubleConv(config.in_channels if level == 0 else widths[level - 1], widths[level])
                for level in range(config.levels + 1)
            ]
        )
        self.pool = nn.MaxPool3d(kernel_size=2, stride=2)
        self.upconvs = nn.ModuleList(
            [
                nn.ConvTranspose3d(widths[level + 1], widths[level], kernel_size=2, stride=2)
                for level in range(config.levels)
            ]
        )
        self.decoders = nn.ModuleList(
            [DoubleConv(2 * widths[level], widths[level]) for level in range(config.levels)]
        )
        self.head = nn.Conv3d(widths[0], config.num_classes, kernel_size=1, stride=1, padding=0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        spatial = x.shape[2:]
        if any(s % self.config.divisor for s in spatial):
            raise ValueError(
                f"spatial dims {tuple(spatial)} must be divisible by {self.config.divisor}"
            )
        skips = []
        for encoder in self.encoders[:-1]:
            x = encoder(x)
            skips.append(x)
            x = self.pool(x)
        x = self.encoders[-1](x)
        for level in reversed(range(self.config.levels)):
            x = self.upconvs[level](x)
            x = torch.cat([skips[level], x], dim=1)
            x = self.decoders[level](x)
        return self.head(x)


def build(config: NetworkConfig, seed: int) -> UNet3D:
    """Construct a network with deterministic He fan-in initialization."""
    torch.manual_seed(seed)
    model = UNet3D(config)
    for module in model.modules():
        if isinstance(module, (nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.InstanceNorm3d) and module.affine:
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)
    return model


def forward_pass(model: UNet3D, batch: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Run the network; returns (per-voxel class probabilities, pre-softmax scores)."""
    scores = model(batch)
    return torch.softmax(scores, dim=1), scores


CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    model: UNet3D,
    optimizer: torch.optim.Optimizer | None = None,
    epoch: int = 0,
    extra: dict | None = None,
) -> None:
    state = {
        "format_version": CHECKPOINT_VERSION,
        "network_config": asdict(model.config),
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "torch_rng_state": torch.get_rng_state(),
        "extra": extra or {},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(state, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=False)
    version = state.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    return state


def model_from_checkpoint(state: dict) -> UNet3D:
    model = UNet3D(NetworkConfig(**state["network_config"]))
    model.load_state_dict(state["model_state"])
    return model
