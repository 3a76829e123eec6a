"""Contrastive, domain-consistency, adversarial and combined objectives."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import ConsistencyError, DegenerateInputError, InvalidConfigError
from .multicrop import UNIT_NORM_TOL, NegativeSet, PatchIndexSet

NORM_EPS = 1e-12


@dataclass
class LossWeights:
    lambda_gan: float = 1.0
    lambda_nce: float = 1.0
    lambda_dom: float = 10.0
    lambda_ide: float = 1.0
    tau: float = 0.07

    def __post_init__(self):
        for name in ("lambda_gan", "lambda_nce", "lambda_dom", "lambda_ide"):
            if getattr(self, name) < 0:
                raise InvalidConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.tau <= 0:
            raise InvalidConfigError(f"tau must be > 0, got {self.tau}")


@dataclass
class LossReport:
    gan_g: float
    gan_d: float
    nce: float
    domain: float
    identity: float
    total_g: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PatchBundle:
    """One query with its positive and ``N`` negatives, all unit-norm ``K``-vectors."""

    query: torch.Tensor
    positive: torch.Tensor
    negatives: torch.Tensor

    def __post_init__(self):
        k = self.query.shape[-1]
        if self.positive.shape[-1] != k or self.negatives.shape[-1] != k:
            raise ConsistencyError("query, positive and negatives must share the embedding dimension")
        for name in ("query", "positive", "negatives"):
            norms = getattr(self, name).detach().norm(dim=-1)
            if (norms - 1).abs().max().item() > UNIT_NORM_TOL:
                raise ConsistencyError(f"{name} is not unit-norm")


def l2_normalize(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Project onto the unit sphere along ``dim``; refuses near-zero vectors."""
    norm = v.norm(dim=dim, keepdim=True)
    if norm.numel() and norm.detach().min().item() <= NORM_EPS:
        raise DegenerateInputError("cannot normalize a (near-)zero vector")
    return v / norm


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise InvalidConfigError(f"temperature must be > 0, got {tau}")


def _nce_from_logits(pos: torch.Tensor, neg: torch.Tensor) -> torch.Tensor:
    # pos: (...,), neg: (..., N) -> per-query cross entropy with the positive as class 0
    logits = torch.cat([pos.unsqueeze(-1), neg], dim=-1)
    return torch.logsumexp(logits, dim=-1) - pos


def info_nce(bundle: PatchBundle, tau: float, reduction: str = "mean") -> torch.Tensor:
    """(N+1)-way softmax cross entropy of the query against its positive.

    Works on a single bundle (``query`` of shape ``(K,)``) or a stack of
    bundles (``(..., K)`` with negatives ``(..., N, K)``).
    """
    _check_tau(tau)
    q, p, negs = bundle.query, bundle.positive, bundle.negatives
    pos = (q * p).sum(-1) / tau
    neg = (negs @ q.unsqueeze(-1)).squeeze(-1) / tau
    loss = _nce_from_logits(pos, neg)
    if reduction == "none":
        return loss
    return loss.mean()


def _layer_nce(query: torch.Tensor, positive: torch.Tensor, negatives: torch.Tensor | None,
               tau: float) -> torch.Tensor:
    # query/positive: (B, S, K) ; negatives: (B, N, K) shared by every query, or None for
    # input-internal negatives (the other sampled positions of the same image)
    pos = (query * positive).sum(-1) / tau
    if negatives is None:
        sim = query @ positive.transpose(-1, -2) / tau
        s = sim.shape[-1]
        mask = torch.eye(s, dtype=torch.bool, device=sim.device)
        neg = sim.masked_select(~mask).view(*sim.shape[:-1], s - 1)
    else:
        neg = query @ negatives.transpose(-1, -2) / tau
    return _nce_from_logits(pos, neg).mean()


def _as_batched(t: torch.Tensor) -> torch.Tensor:
    return t.unsqueeze(0) if t.dim() == 2 else t


def multicrop_nce_loss(gen_embeddings: Sequence[torch.Tensor], input_embeddings: Sequence[torch.Tensor],
                       negative_sets: Sequence[NegativeSet] | None,
                       patch_ids: Sequence[PatchIndexSet] | None, tau: float) -> torch.Tensor:
    """Patch-wise contrastive loss averaged over layers and sampled patches.

    ``gen_embeddings[l]`` are the query embeddings taken from the translated
    image, ``input_embeddings[l]`` the positives at identical positions of the
    source image (both ``(S_l, K)`` or ``(B, S_l, K)``).  Every query of layer
    ``l`` is contrasted against the shared crop-view negatives of that layer.
    Passing ``negative_sets=None`` uses the other sampled patches of the source
    image as negatives instead.

    The reduction is the mean over patches within a layer, then the mean over
    layers.
    """
    _check_tau(tau)
    n_layers = len(gen_embeddings)
    if n_layers == 0:
        raise ConsistencyError("no layers given")
    if len(input_embeddings) != n_layers:
        raise ConsistencyError(f"{n_layers} query layers but {len(input_embeddings)} positive layers")
    if negative_sets is not None and len(negative_sets) != n_layers:
        raise ConsistencyError(f"{n_layers} query layers but {len(negative_sets)} negative sets")
    if patch_ids is not None and len(patch_ids) != n_layers:
        raise ConsistencyError(f"{n_layers} query layers but {len(patch_ids)} patch index sets")

    total = 0.0
    for l in range(n_layers):
        q, p = _as_batched(gen_embeddings[l]), _as_batched(input_embeddings[l])
        if q.shape != p.shape:
            raise ConsistencyError(f"layer {l}: query shape {tuple(q.shape)} != positive shape {tuple(p.shape)}")
        if patch_ids is not None and len(patch_ids[l]) != q.shape[-2]:
            raise ConsistencyError(f"layer {l}: {q.shape[-2]} embeddings for {len(patch_ids[l])} sampled patches")
        negs = None
        if negative_sets is not None:
            ns = negative_sets[l]
            if ns.layer_id != l:
                raise ConsistencyError(f"negative set for layer {ns.layer_id} given at position {l}")
            negs = ns.embeddings
            if negs.dim() == 2:
                negs = negs.unsqueeze(0).expand(q.shape[0], -1, -1)
            if negs.shape[-1] != q.shape[-1] or negs.shape[0] != q.shape[0]:
                raise ConsistencyError(f"layer {l}: negatives {tuple(negs.shape)} incompatible with queries {tuple(q.shape)}")
        elif q.shape[-2] < 2:
            raise ConsistencyError(f"layer {l}: input-internal negatives need at least 2 patches")
        total = total + _layer_nce(q, p, negs, tau)
    return total / n_layers


def identity_loss(gen_from_y_embeddings, y_embeddings, y_negative_sets, patch_ids, tau) -> torch.Tensor:
    """The same contrastive loss with a target-domain image fed through the generator."""
    return multicrop_nce_loss(gen_from_y_embeddings, y_embeddings, y_negative_sets, patch_ids, tau)


def domain_consistency_loss(real_style_vectors: Sequence[torch.Tensor],
                            fake_style_vectors: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over layers of the per-element mean absolute difference."""
    if len(real_style_vectors) != len(fake_style_vectors) or not real_style_vectors:
        raise ConsistencyError(
            f"{len(real_style_vectors)} real layers vs {len(fake_style_vectors)} generated layers"
        )
    total = 0.0
    for l, (real, fake) in enumerate(zip(real_style_vectors, fake_style_vectors)):
        if real.shape != fake.shape:
            raise ConsistencyError(f"layer {l}: style shapes {tuple(real.shape)} and {tuple(fake.shape)} differ")
        total = total + (real - fake).abs().mean()
    return total


def hinge_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    return F.relu(1 - real_logits).mean() + F.relu(1 + fake_logits).mean()


def hinge_g_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    return -fake_logits.mean()


def log_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    # -[log D(y) + log(1 - D(G(x)))] with D = sigmoid(logit)
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def log_g_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    # non-saturating generator form: -log D(G(x))
    return F.softplus(-fake_logits).mean()


GAN_LOSSES = {
    "hinge": (hinge_d_loss, hinge_g_loss),
    "log": (log_d_loss, log_g_loss),
}


def total_generator_objective(gan_g, nce, domain, identity, weights: LossWeights):
    """Weighted sum of the generator-side terms; works on floats and tensors alike."""
    return (weights.lambda_gan * gan_g + weights.lambda_nce * nce
            + weights.lambda_dom * domain + weights.lambda_ide * identity)
