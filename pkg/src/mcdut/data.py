"""Unpaired dataset layout, image preprocessing and epoch iteration.

Expected layout::

    root/trainA/*.png|jpg|jpeg   source domain, training split
    root/trainB/...              target domain, training split
    root/testA/, root/testB/     same for the test split
"""

from __future__ import annotations

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import DatasetError, InvalidConfigError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}
SPLITS = ("train", "test")


@dataclass
class DatasetManifest:
    root: Path
    domain_a_files: list[Path]
    domain_b_files: list[Path]
    split: str = "train"

    @property
    def sizes(self) -> tuple[int, int]:
        return len(self.domain_a_files), len(self.domain_b_files)


def _scan_domain(folder: Path) -> list[Path]:
    if not folder.is_dir():
        raise DatasetError(f"missing dataset directory: {folder}")
    files = []
    for p in sorted(set(folder.iterdir())):
        if not p.is_file():
            continue
        if p.suffix.lower() in IMAGE_EXTENSIONS:
            files.append(p)
        else:
            log.warning("skipping non-image file %s", p)
    if not files:
        raise DatasetError(f"no images found in {folder}")
    return files


def scan_dataset(root: str | Path, split: str = "train") -> DatasetManifest:
    if split not in SPLITS:
        raise InvalidConfigError(f"split must be one of {SPLITS}, got {split!r}")
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")
    a = _scan_domain(root / f"{split}A")
    b = _scan_domain(root / f"{split}B")
    log.info("dataset %s [%s]: %d A images, %d B images", root, split, len(a), len(b))
    return DatasetManifest(root, a, b, split)


def _read_rgb(path: Path) -> Image.Image:
    try:
        with Image.open(path) as im:
            return im.convert("RGB")
    except (OSError, UnidentifiedImageError) as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


def to_tensor(im: Image.Image) -> torch.Tensor:
    """8-bit RGB -> ``(3, H, W)`` float tensor in [-1, 1]."""
    arr = np.asarray(im, dtype=np.float32)
    return torch.from_numpy(arr / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """``(3, H, W)`` tensor in [-1, 1] -> ``(H, W, 3)`` uint8 array."""
    arr = ((img.detach().float().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


def load_and_preprocess(path: str | Path, mode: str = "train", rng: np.random.Generator | None = None,
                        load_size: int = 286, crop_size: int = 256, flip: bool = True) -> torch.Tensor:
    """Train: resize to ``load_size``, random ``crop_size`` crop, optional random flip.
    Eval: resize straight to ``crop_size``; no randomness."""
    if crop_size > load_size:
        raise InvalidConfigError(f"crop_size {crop_size} exceeds load_size {load_size}")
    im = _read_rgb(Path(path))
    if mode == "eval":
        return to_tensor(im.resize((crop_size, crop_size), Image.BILINEAR))
    if mode != "train":
        raise InvalidConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise InvalidConfigError("train-mode preprocessing needs an rng")
    im = im.resize((load_size, load_size), Image.BILINEAR)
    top = int(rng.integers(0, load_size - crop_size + 1))
    left = int(rng.integers(0, load_size - crop_size + 1))
    im = im.crop((left, top, left + crop_size, top + crop_size))
    if flip and rng.random() < 0.5:
        im = im.transpose(Image.FLIP_LEFT_RIGHT)
    return to_tensor(im)


def epoch_pairs(n_a: int, n_b: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Shuffle both domains and pair by position; the shorter domain is cycled."""
    perm_a, perm_b = rng.permutation(n_a), rng.permutation(n_b)
    length = max(n_a, n_b)
    return [(int(perm_a[i % n_a]), int(perm_b[i % n_b])) for i in range(length)]


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def unpaired_batch_iter(manifest: DatasetManifest, batch_size: int, seed: int, epoch: int,
                        load_size: int = 286, crop_size: int = 256, flip: bool = True,
                        start_batch: int = 0, num_workers: int = 0
                        ) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Batches ``(x, y)`` of one epoch.

    The pairing and every per-image augmentation are derived from
    ``(seed, epoch)`` alone, so iteration can resume at ``start_batch`` and
    the delivered order never depends on ``num_workers``.
    """
    if batch_size < 1:
        raise InvalidConfigError(f"batch_size must be >= 1, got {batch_size}")
    pairs = epoch_pairs(len(manifest.domain_a_files), len(manifest.domain_b_files), epoch_rng(seed, epoch))
    batches = [pairs[i:i + batch_size] for i in range(0, len(pairs), batch_size)][start_batch:]

    def load(job):
        b, chunk = job
        xs, ys = [], []
        for j, (ia, ib) in enumerate(chunk):
            pos = (start_batch + b) * batch_size + j
            rng_a = np.random.default_rng([seed, epoch, pos, 0])
            rng_b = np.random.default_rng([seed, epoch, pos, 1])
            xs.append(load_and_preprocess(manifest.domain_a_files[ia], "train", rng_a, load_size, crop_size, flip))
            ys.append(load_and_preprocess(manifest.domain_b_files[ib], "train", rng_b, load_size, crop_size, flip))
        return torch.stack(xs), torch.stack(ys)

    jobs = list(enumerate(batches))
    if num_workers <= 0:
        for job in jobs:
            yield load(job)
        return
    # bounded prefetch; futures are consumed in submission order
    window = 2 * num_workers
    with ThreadPoolExecutor(num_workers) as pool:
        pending = deque(pool.submit(load, job) for job in jobs[:window])
        next_job = len(pending)
        while pending:
            result = pending.popleft().result()
            if next_job < len(jobs):
                pending.append(pool.submit(load, jobs[next_job]))
                next_job += 1
            yield result


def batches_per_epoch(manifest: DatasetManifest, batch_size: int) -> int:
    n = max(manifest.sizes)
    return -(-n // batch_size)
