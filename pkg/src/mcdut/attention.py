"""Channel attention blocks for the generator encoder.

``DualCoordinateAttention`` pools each channel along rows and along columns
with both average and max pooling, adds the two pooled branches, runs a
shared two-layer bottleneck over the ``H + W`` pooled positions, averages the
result over positions and squashes it into one gate per channel.

SE and CBAM are provided only as drop-in baselines for attention ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConsistencyError, InvalidConfigError, InvalidInputError

POOL_MODES = ("avg", "max")


@dataclass
class DirectionalPooled:
    """``h_pool``: ``(..., C, H)`` reduced over width; ``w_pool``: ``(..., C, W)`` reduced over height."""

    h_pool: torch.Tensor
    w_pool: torch.Tensor
    mode: str


def directional_pool(feature: torch.Tensor, mode: str) -> DirectionalPooled:
    if mode not in POOL_MODES:
        raise InvalidConfigError(f"pool mode must be one of {POOL_MODES}, got {mode!r}")
    if feature.dim() < 3 or feature.shape[-1] < 1 or feature.shape[-2] < 1:
        raise InvalidInputError(f"expected (..., C, H, W) with H, W >= 1, got {tuple(feature.shape)}")
    if mode == "avg":
        return DirectionalPooled(feature.mean(dim=-1), feature.mean(dim=-2), mode)
    return DirectionalPooled(feature.amax(dim=-1), feature.amax(dim=-2), mode)


def _concat(pooled: DirectionalPooled) -> torch.Tensor:
    return torch.cat([pooled.h_pool, pooled.w_pool], dim=-1)


def fuse_branches(avg: DirectionalPooled | None, mx: DirectionalPooled | None) -> torch.Tensor:
    """Concatenate rows-then-columns within each branch and add the branches: ``(..., C, H + W)``.

    Either branch may be ``None`` to ablate it.
    """
    if avg is None and mx is None:
        raise InvalidConfigError("at least one pooling branch is required")
    if avg is None:
        return _concat(mx)
    if mx is None:
        return _concat(avg)
    if avg.h_pool.shape != mx.h_pool.shape or avg.w_pool.shape != mx.w_pool.shape:
        raise ConsistencyError("average and max branches have different shapes")
    return _concat(avg) + _concat(mx)


def channel_weights(hybrid: torch.Tensor, block: "DualCoordinateAttention") -> torch.Tensor:
    """Per-channel gates in (0, 1) from a ``(..., C, P)`` hybrid pooled map."""
    if hybrid.shape[-2] != block.channels:
        raise InvalidConfigError(f"block expects {block.channels} channels, got {hybrid.shape[-2]}")
    per_position = block.fc2(F.relu(block.fc1(hybrid.transpose(-1, -2))))
    return torch.sigmoid(per_position.mean(dim=-2))


def apply_channel_gate(feature: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
    return feature * gate[..., None, None]


def dca_forward(feature: torch.Tensor, block: "DualCoordinateAttention") -> torch.Tensor:
    if feature.dim() < 3 or feature.shape[-3] != block.channels:
        raise InvalidConfigError(
            f"block expects {block.channels} channels, got input of shape {tuple(feature.shape)}"
        )
    avg = directional_pool(feature, "avg") if block.use_avg else None
    mx = directional_pool(feature, "max") if block.use_max else None
    gate = channel_weights(fuse_branches(avg, mx), block)
    return apply_channel_gate(feature, gate)


class DualCoordinateAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 16, use_avg: bool = True, use_max: bool = True):
        super().__init__()
        if channels < 1 or reduction < 1:
            raise InvalidConfigError(f"invalid channels={channels} / reduction={reduction}")
        if not (use_avg or use_max):
            raise InvalidConfigError("DCA needs the average branch, the max branch, or both")
        self.channels = channels
        self.reduction = reduction
        self.use_avg = use_avg
        self.use_max = use_max
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return dca_forward(x, self)

    def extra_repr(self) -> str:
        return f"channels={self.channels}, reduction={self.reduction}, avg={self.use_avg}, max={self.use_max}"


class SqueezeExcitation(nn.Module):
    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        gate = torch.sigmoid(self.fc2(F.relu(self.fc1(x.mean(dim=(-2, -1))))))
        return apply_channel_gate(x, gate)


class CBAM(nn.Module):
    """Channel gate from avg+max global pooling, then a 7x7 spatial gate."""

    def __init__(self, channels: int, reduction: int = 16, kernel_size: int = 7):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.mlp = nn.Sequential(nn.Linear(channels, hidden), nn.ReLU(), nn.Linear(hidden, channels))
        self.spatial = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x):
        gate = torch.sigmoid(self.mlp(x.mean(dim=(-2, -1))) + self.mlp(x.amax(dim=(-2, -1))))
        x = apply_channel_gate(x, gate)
        s = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return x * torch.sigmoid(self.spatial(s))


ATTENTION_KINDS = ("dca", "dca_avg", "dca_max", "se", "cbam", "none")


def build_attention(kind: str, channels: int, reduction: int = 16) -> nn.Module:
    if kind == "dca":
        return DualCoordinateAttention(channels, reduction)
    if kind == "dca_avg":
        return DualCoordinateAttention(channels, reduction, use_avg=True, use_max=False)
    if kind == "dca_max":
        return DualCoordinateAttention(channels, reduction, use_avg=False, use_max=True)
    if kind == "se":
        return SqueezeExcitation(channels, reduction)
    if kind == "cbam":
        return CBAM(channels, reduction)
    if kind == "none":
        return nn.Identity()
    raise InvalidConfigError(f"unknown attention kind {kind!r}; expected one of {ATTENTION_KINDS}")
