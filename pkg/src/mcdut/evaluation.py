"""FID and KID over pluggable feature extractors.

The pretrained Inception network is an optional downloadable asset; the
identity and random-projection extractors need nothing and are what the test
suite uses.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetManifest, load_and_preprocess, to_uint8
from .errors import AssetError, InvalidInputError, NumericalError

KID_SCALE = 100.0


@dataclass
class EmbeddingSet:
    matrix: np.ndarray
    extractor_id: str

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise InvalidInputError(f"embeddings must be an (n, d) matrix, got shape {self.matrix.shape}")
        if not np.isfinite(self.matrix).all():
            raise InvalidInputError("embeddings contain non-finite values")

    def __len__(self):
        return self.matrix.shape[0]


class Extractor(Protocol):
    extractor_id: str

    def __call__(self, images: torch.Tensor) -> np.ndarray: ...


class IdentityExtractor:
    """Flattened pixels."""

    extractor_id = "identity"

    def __call__(self, images: torch.Tensor) -> np.ndarray:
        return images.detach().reshape(len(images), -1).double().cpu().numpy()


class RandomProjectionExtractor:
    """Average-pool to ``pool_size``, flatten, multiply by a fixed Gaussian matrix."""

    def __init__(self, dim: int = 64, pool_size: int = 16, seed: int = 0):
        self.dim, self.pool_size, self.seed = dim, pool_size, seed
        self.extractor_id = f"random-projection-d{dim}-p{pool_size}-s{seed}"
        self._proj: np.ndarray | None = None

    def __call__(self, images: torch.Tensor) -> np.ndarray:
        x = F.adaptive_avg_pool2d(images.detach().double(), self.pool_size).reshape(len(images), -1).cpu().numpy()
        if self._proj is None or self._proj.shape[0] != x.shape[1]:
            rng = np.random.default_rng(self.seed)
            self._proj = rng.standard_normal((x.shape[1], self.dim)) / np.sqrt(x.shape[1])
        return x @ self._proj


class InceptionExtractor:
    """2048-d pool features of torchvision's ImageNet Inception-v3 (downloads weights on first use)."""

    extractor_id = "inception-v3-imagenet"

    def __init__(self, device: str = "cpu"):
        try:
            from torchvision.models import Inception_V3_Weights, inception_v3

            net = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1, aux_logits=True)
        except Exception as exc:  # network, cache or version problems all mean the same thing here
            raise AssetError(f"cannot load Inception-v3 weights: {exc}") from exc
        net.fc = torch.nn.Identity()
        self.net = net.eval().to(device)
        self.device = device

    @torch.no_grad()
    def __call__(self, images: torch.Tensor) -> np.ndarray:
        x = F.interpolate((images + 1) / 2, size=(299, 299), mode="bilinear", align_corners=False)
        mean = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        return self.net(((x - mean) / std).to(self.device)).double().cpu().numpy()


def get_extractor(name: str, **kwargs) -> Extractor:
    if name == "identity":
        return IdentityExtractor()
    if name in ("random-projection", "random_projection"):
        return RandomProjectionExtractor(**kwargs)
    if name == "inception":
        return InceptionExtractor(**kwargs)
    raise AssetError(f"unknown feature extractor {name!r}")


def extract_embeddings(images: torch.Tensor | Sequence[torch.Tensor], extractor: Extractor,
                       batch_size: int = 32) -> EmbeddingSet:
    images = images if isinstance(images, torch.Tensor) else torch.stack(list(images))
    if len(images) == 0:
        raise InvalidInputError("no images to embed")
    rows = [np.asarray(extractor(images[i:i + batch_size])) for i in range(0, len(images), batch_size)]
    return EmbeddingSet(np.concatenate(rows), extractor.extractor_id)


def _check_pair(real: EmbeddingSet, gen: EmbeddingSet) -> None:
    if real.matrix.shape[1] != gen.matrix.shape[1]:
        raise InvalidInputError(f"embedding dims differ: {real.matrix.shape[1]} vs {gen.matrix.shape[1]}")
    if len(real) < 2 or len(gen) < 2:
        raise InvalidInputError("FID/KID need at least 2 embeddings per set")


def _cov_factor(x: np.ndarray) -> np.ndarray:
    """``R`` with ``R.T @ R`` equal to the sample covariance (n - 1 denominator)."""
    centred = (x - x.mean(0)) / np.sqrt(len(x) - 1)
    return np.linalg.qr(centred, mode="r")


def fid(real: EmbeddingSet, gen: EmbeddingSet) -> float:
    """Frechet distance between Gaussian fits of two embedding sets.

    With ``S_r = R_r' R_r`` and ``S_g = R_g' R_g``, the eigenvalues of
    ``S_r S_g`` are the squared singular values of ``R_r R_g'``, so
    ``Tr((S_r S_g)^(1/2))`` is that matrix's nuclear norm.  An SVD gets it to
    machine precision even when a covariance is singular, where square roots of
    rounding-level eigenvalues would cost about eight digits.
    """
    _check_pair(real, gen)
    mu_r, mu_g = real.matrix.mean(0), gen.matrix.mean(0)
    r_r, r_g = _cov_factor(real.matrix), _cov_factor(gen.matrix)
    try:
        tr_cross = np.linalg.svd(r_r @ r_g.T, compute_uv=False).sum()
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"FID cross term did not converge: {exc}") from exc
    value = float(((mu_r - mu_g) ** 2).sum() + (r_r ** 2).sum() + (r_g ** 2).sum() - 2 * tr_cross)
    if not np.isfinite(value):
        raise NumericalError("FID evaluated to a non-finite value")
    # the terms cancel exactly for identical statistics; rounding can leave a tiny negative
    return max(value, 0.0)


def polynomial_kernel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a.shape[1]
    return (a @ b.T / d + 1) ** 3


def mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    """U-statistic over index pairs ``i != j``: k(xi,xj) + k(yi,yj) - k(xi,yj) - k(xj,yi)."""
    m = len(x)
    if len(y) != m or m < 2:
        raise InvalidInputError("mmd2_unbiased needs two samples of equal size >= 2")
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    off = lambda k: k.sum() - np.trace(k)
    return float((off(kxx) + off(kyy) - 2 * off(kxy)) / (m * (m - 1)))


def kid(real: EmbeddingSet, gen: EmbeddingSet, num_subsets: int = 10, subset_size: int = 100,
        seed: int = 0) -> float:
    """Raw KID (not scaled): mean unbiased MMD^2 over random equal-size subsets.

    A subset covering a whole set keeps the original row order.
    """
    _check_pair(real, gen)
    m = min(len(real), len(gen), subset_size)
    rng = np.random.default_rng(seed)

    def pick(n):
        return np.arange(n) if m == n else rng.choice(n, m, replace=False)

    values = [mmd2_unbiased(real.matrix[pick(len(real))], gen.matrix[pick(len(gen))]) for _ in range(num_subsets)]
    return float(np.mean(values))


def kid_x100(real: EmbeddingSet, gen: EmbeddingSet, **kwargs) -> float:
    return KID_SCALE * kid(real, gen, **kwargs)


@dataclass
class MetricReport:
    fid: float
    kid_x100: float
    n_gen: int
    n_real: int
    extractor_id: str

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def load_eval_images(paths: Sequence[Path], size: int) -> torch.Tensor:
    return torch.stack([load_and_preprocess(p, "eval", crop_size=size, load_size=size) for p in paths])


def evaluate_translations(generator: Callable[[torch.Tensor], torch.Tensor], manifest: DatasetManifest,
                          extractor: Extractor, image_size: int = 256, batch_size: int = 8,
                          kid_seed: int = 0, grid_path: str | Path | None = None) -> MetricReport:
    """Translate every A image, then compare translated-A against real-B."""
    src = load_eval_images(manifest.domain_a_files, image_size)
    real = load_eval_images(manifest.domain_b_files, image_size)
    with torch.no_grad():
        fake = torch.cat([generator(src[i:i + batch_size]) for i in range(0, len(src), batch_size)])
    real_emb = extract_embeddings(real, extractor)
    gen_emb = extract_embeddings(fake, extractor)
    if grid_path is not None:
        save_pair_grid(src, fake, grid_path)
    return MetricReport(fid(real_emb, gen_emb), kid_x100(real_emb, gen_emb, seed=kid_seed),
                        len(gen_emb), len(real_emb), extractor.extractor_id)


def evaluate_run(checkpoint: str | Path, manifest: DatasetManifest, extractor: Extractor,
                 image_size: int | None = None, grid_path: str | Path | None = None) -> MetricReport:
    from .engine import load_checkpoint, translate

    state = load_checkpoint(checkpoint)
    size = image_size or state.cfg.crop_size
    return evaluate_translations(lambda x: translate(state.nets.G, x), manifest, extractor, size,
                                 kid_seed=state.cfg.seed, grid_path=grid_path)


def save_pair_grid(inputs: torch.Tensor, outputs: torch.Tensor, path: str | Path, max_rows: int = 8) -> None:
    """One row per (input, translated) pair."""
    from PIL import Image

    rows = [np.concatenate([to_uint8(a), to_uint8(b)], axis=1) for a, b in zip(inputs[:max_rows], outputs[:max_rows])]
    Image.fromarray(np.concatenate(rows, axis=0)).save(path)
