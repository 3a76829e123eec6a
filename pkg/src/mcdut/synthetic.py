"""Synthetic unpaired dataset: red shapes (domain A) and blue shapes (domain B) on white."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

COLORS = {"A": (220, 30, 30), "B": (30, 30, 220)}


def draw_shapes(rng: np.random.Generator, size: int, color: tuple[int, int, int]) -> Image.Image:
    im = Image.new("RGB", (size, size), (255, 255, 255))
    draw = ImageDraw.Draw(im)
    for _ in range(int(rng.integers(1, 4))):
        w, h = (int(v) for v in rng.integers(size // 6, size // 2, size=2))
        x0, y0 = (int(v) for v in rng.integers(0, size - max(w, h), size=2))
        box = (x0, y0, x0 + w, y0 + h)
        if rng.random() < 0.5:
            draw.ellipse(box, fill=color)
        else:
            draw.rectangle(box, fill=color)
    return im


def make_shapes_dataset(root: str | Path, n_per_domain: int = 32, size: int = 64, n_test: int = 8,
                        seed: int = 0) -> Path:
    root = Path(root)
    rng = np.random.default_rng(seed)
    for split, count in (("train", n_per_domain), ("test", n_test)):
        for domain, color in COLORS.items():
            folder = root / f"{split}{domain}"
            folder.mkdir(parents=True, exist_ok=True)
            for i in range(count):
                draw_shapes(rng, size, color).save(folder / f"{domain.lower()}_{i:04d}.png")
    return root
