"""Multi-cropping views and patch/negative sampling.

Images are ``torch.Tensor`` of shape ``(3, H, W)`` (channels first, the
PyTorch convention) with values in ``[-1, 1]``.  All random draws go through
an explicit ``numpy.random.Generator`` so that every function here is a pure
function of its inputs and the generator state.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConsistencyError, InvalidConfigError, InvalidInputError

UNIT_NORM_TOL = 1e-5


class CropKind(str, enum.Enum):
    CENTER = "center"
    RANDOM = "random"


@dataclass(frozen=True)
class CropRect:
    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise InvalidConfigError(f"crop must be at least 1x1, got {self.height}x{self.width}")
        if self.top < 0 or self.left < 0:
            raise InvalidConfigError(f"crop offset must be non-negative, got ({self.top}, {self.left})")

    def fits(self, height: int, width: int) -> bool:
        return self.top + self.height <= height and self.left + self.width <= width


@dataclass
class CropView:
    rect: CropRect
    image: torch.Tensor
    kind: CropKind


@dataclass
class CropConfig:
    num_center: int = 1
    num_random: int = 2
    center_scale: float = 0.5
    random_scale_range: tuple[float, float] = (0.3, 0.7)
    resize_filter: str = "bilinear"

    def __post_init__(self):
        self.random_scale_range = tuple(float(v) for v in self.random_scale_range)
        lo, hi = self.random_scale_range
        if not 0 < self.center_scale <= 1:
            raise InvalidConfigError(f"center_scale must be in (0, 1], got {self.center_scale}")
        if not 0 < lo <= hi <= 1:
            raise InvalidConfigError(f"random_scale_range must satisfy 0 < lo <= hi <= 1, got {self.random_scale_range}")
        if self.num_center < 0 or self.num_random < 0 or self.num_center + self.num_random < 1:
            raise InvalidConfigError(
                f"need at least one crop view, got {self.num_center} center + {self.num_random} random"
            )
        if self.resize_filter != "bilinear":
            raise InvalidConfigError(f"unsupported resize filter {self.resize_filter!r}")

    @property
    def num_views(self) -> int:
        return self.num_center + self.num_random


@dataclass
class PatchIndexSet:
    layer_id: int
    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if len(np.unique(self.indices)) != len(self.indices):
            raise ConsistencyError(f"duplicate patch indices in layer {self.layer_id}")

    def __len__(self):
        return len(self.indices)

    def check_bounds(self, num_positions: int) -> None:
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= num_positions):
            raise ConsistencyError(
                f"patch index out of range for layer {self.layer_id} with {num_positions} positions"
            )


@dataclass
class NegativeSet:
    """``embeddings`` is ``(N, K)`` or ``(B, N, K)``; ``sources`` maps each row to (view, row-in-view)."""

    layer_id: int
    embeddings: torch.Tensor
    sources: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        norms = self.embeddings.detach().norm(dim=-1)
        if norms.numel() and (norms - 1).abs().max().item() > UNIT_NORM_TOL:
            raise ConsistencyError(f"negative embeddings of layer {self.layer_id} are not unit-norm")

    def __len__(self):
        return self.embeddings.shape[-2]


def _spatial_size(img: torch.Tensor) -> tuple[int, int]:
    if img.dim() < 2 or img.shape[-1] < 1 or img.shape[-2] < 1:
        raise InvalidInputError(f"expected a non-empty (C, H, W) image, got shape {tuple(img.shape)}")
    return int(img.shape[-2]), int(img.shape[-1])


def center_crop(img: torch.Tensor, scale: float) -> CropRect:
    if not 0 < scale <= 1:
        raise InvalidConfigError(f"center crop scale must be in (0, 1], got {scale}")
    H, W = _spatial_size(img)
    h = max(1, math.floor(H * scale))
    w = max(1, math.floor(W * scale))
    return CropRect((H - h) // 2, (W - w) // 2, h, w)


def random_crop(img: torch.Tensor, scale_range: Sequence[float], rng: np.random.Generator) -> CropRect:
    """Crop whose side fractions are drawn independently per axis from ``scale_range``."""
    lo, hi = scale_range
    if not 0 < lo <= hi <= 1:
        raise InvalidConfigError(f"scale range must satisfy 0 < lo <= hi <= 1, got {tuple(scale_range)}")
    H, W = _spatial_size(img)
    fh, fw = rng.uniform(lo, hi, size=2)
    h = min(H, max(1, math.floor(H * fh)))
    w = min(W, max(1, math.floor(W * fw)))
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    return CropRect(top, left, h, w)


def crop_and_resize(img: torch.Tensor, rect: CropRect) -> torch.Tensor:
    """Cut ``rect`` out of ``img`` and resize it bilinearly back to the source size."""
    H, W = _spatial_size(img)
    if not rect.fits(H, W):
        raise InvalidConfigError(f"{rect} does not fit inside a {H}x{W} image")
    patch = img[..., rect.top:rect.top + rect.height, rect.left:rect.left + rect.width]
    if (rect.height, rect.width) == (H, W):
        return patch
    batched = patch if patch.dim() == 4 else patch.unsqueeze(0)
    out = F.interpolate(batched, size=(H, W), mode="bilinear", align_corners=False)
    return out if patch.dim() == 4 else out.squeeze(0)


def make_multicrop_views(img: torch.Tensor, cfg: CropConfig, rng: np.random.Generator) -> list[CropView]:
    """Center views first, then random views, each resized to the source size."""
    views = []
    for _ in range(cfg.num_center):
        rect = center_crop(img, cfg.center_scale)
        views.append(CropView(rect, crop_and_resize(img, rect), CropKind.CENTER))
    for _ in range(cfg.num_random):
        rect = random_crop(img, cfg.random_scale_range, rng)
        views.append(CropView(rect, crop_and_resize(img, rect), CropKind.RANDOM))
    return views


def sample_patch_ids(layer_shape: tuple[int, int], count: int, rng: np.random.Generator,
                     layer_id: int = 0) -> PatchIndexSet:
    num_positions = int(layer_shape[0]) * int(layer_shape[1])
    if count < 0 or count > num_positions:
        raise InvalidConfigError(
            f"cannot sample {count} patches from a {layer_shape[0]}x{layer_shape[1]} feature map"
        )
    return PatchIndexSet(layer_id, rng.permutation(num_positions)[:count])


def gather_negatives(view_embeddings: Sequence[torch.Tensor], layer_id: int, n: int,
                     rng: np.random.Generator) -> NegativeSet:
    """Draw ``n`` negatives uniformly without replacement from the union of all crop views.

    ``view_embeddings[v]`` holds the projected patch embeddings of view ``v`` at
    this layer, shaped ``(S, K)`` or ``(B, S, K)``.  The same rows are drawn for
    every batch element.
    """
    if not view_embeddings:
        raise InvalidConfigError("no crop views to draw negatives from")
    pool = torch.cat(list(view_embeddings), dim=-2)
    pool_size = pool.shape[-2]
    if n < 1 or n > pool_size:
        raise InvalidConfigError(f"need {n} negatives but the crop-view pool of layer {layer_id} has {pool_size}")
    chosen = rng.choice(pool_size, size=n, replace=False)
    offsets = np.cumsum([0] + [e.shape[-2] for e in view_embeddings])
    view_of = np.searchsorted(offsets, chosen, side="right") - 1
    sources = np.stack([view_of, chosen - offsets[view_of]], axis=1)
    idx = torch.as_tensor(chosen, dtype=torch.long, device=pool.device)
    return NegativeSet(layer_id, pool.index_select(-2, idx), sources)


def dump_views(views: Sequence[CropView], out_dir: str | Path) -> list[Path]:
    """Write each view as ``{kind}_{i}.png`` (``i`` counts within its kind)."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counters: dict[str, int] = {}
    written = []
    for view in views:
        kind = CropKind(view.kind).value
        i = counters.get(kind, 0)
        counters[kind] = i + 1
        arr = ((view.image.detach().float().clamp(-1, 1) + 1) * 127.5).round().byte()
        path = out_dir / f"{kind}_{i}.png"
        Image.fromarray(arr.permute(1, 2, 0).cpu().numpy()).save(path)
        written.append(path)
    return written
