"""Generator, PatchGAN discriminator and the projection heads.

Encoder taps are named rather than numbered:

    rgb      the raw input image
    down1    output of the first stride-2 convolution (after its attention block)
    down2    output of the second stride-2 convolution (after its attention block)
    blockK   output of the K-th residual block (1-based)

Images are ``(B, 3, H, W)``; generator inputs need H and W divisible by 4.
"""

from __future__ import annotations

import re
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import ATTENTION_KINDS, build_attention
from .errors import ConsistencyError, InvalidConfigError, InvalidInputError
from .losses import l2_normalize
from .multicrop import PatchIndexSet

DEFAULT_TAPS = ("rgb", "down1", "down2", "block1", "block5")
_BLOCK_TAP = re.compile(r"^block([1-9][0-9]*)$")


@dataclass
class ModelConfig:
    input_nc: int = 3
    ngf: int = 64
    ndf: int = 64
    n_blocks: int = 9
    taps: tuple[str, ...] = DEFAULT_TAPS
    attention: str = "dca"
    attention_reduction: int = 16
    disc_layers: int = 3
    proj_dim: int = 256
    style_dim: int = 128
    head_hidden: int = 128
    init_gain: float = 0.02

    def __post_init__(self):
        self.taps = tuple(self.taps)
        if self.attention not in ATTENTION_KINDS:
            raise InvalidConfigError(f"unknown attention kind {self.attention!r}")
        if min(self.ngf, self.ndf, self.n_blocks, self.disc_layers, self.proj_dim,
               self.style_dim, self.head_hidden) < 1:
            raise InvalidConfigError("network widths and depths must be positive")
        tap_order(self.taps, self.n_blocks)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["taps"] = list(self.taps)
        return d


def _tap_rank(name: str, n_blocks: int) -> int:
    fixed = {"rgb": 0, "down1": 1, "down2": 2}
    if name in fixed:
        return fixed[name]
    m = _BLOCK_TAP.match(name)
    if m and int(m.group(1)) <= n_blocks:
        return 2 + int(m.group(1))
    raise InvalidConfigError(f"invalid encoder tap {name!r} for a generator with {n_blocks} residual blocks")


def tap_order(taps: Sequence[str], n_blocks: int) -> list[int]:
    """Validate tap names and return their depth ranks (strictly increasing)."""
    if not taps:
        raise InvalidConfigError("at least one encoder tap is required")
    ranks = [_tap_rank(t, n_blocks) for t in taps]
    if any(b <= a for a, b in zip(ranks, ranks[1:])):
        raise InvalidConfigError(f"encoder taps must be unique and ordered by depth, got {list(taps)}")
    return ranks


def init_weights(module: nn.Module, gain: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class ResnetBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(dim, dim, 3), nn.InstanceNorm2d(dim), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(dim, dim, 3), nn.InstanceNorm2d(dim),
        )

    def forward(self, x):
        return x + self.body(x)


class ResnetGenerator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ngf, nc = cfg.ngf, cfg.input_nc
        self.stem = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(nc, ngf, 7), nn.InstanceNorm2d(ngf), nn.ReLU(True))
        self.down1 = nn.Sequential(nn.Conv2d(ngf, ngf * 2, 3, stride=2, padding=1), nn.InstanceNorm2d(ngf * 2), nn.ReLU(True))
        self.down2 = nn.Sequential(nn.Conv2d(ngf * 2, ngf * 4, 3, stride=2, padding=1), nn.InstanceNorm2d(ngf * 4), nn.ReLU(True))
        self.blocks = nn.ModuleList(ResnetBlock(ngf * 4) for _ in range(cfg.n_blocks))
        self.up = nn.Sequential(
            nn.ConvTranspose2d(ngf * 4, ngf * 2, 3, stride=2, padding=1, output_padding=1), nn.InstanceNorm2d(ngf * 2), nn.ReLU(True),
            nn.ConvTranspose2d(ngf * 2, ngf, 3, stride=2, padding=1, output_padding=1), nn.InstanceNorm2d(ngf), nn.ReLU(True),
        )
        self.out = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(ngf, nc, 7), nn.Tanh())
        # attention goes last so the convolutional weights do not depend on whether it is enabled
        init_weights(self, cfg.init_gain)
        self.attn1 = build_attention(cfg.attention, ngf * 2, cfg.attention_reduction)
        self.attn2 = build_attention(cfg.attention, ngf * 4, cfg.attention_reduction)
        init_weights(self.attn1, cfg.init_gain)
        init_weights(self.attn2, cfg.init_gain)

    def tap_channels(self, taps: Sequence[str] | None = None) -> list[int]:
        taps = self.cfg.taps if taps is None else taps
        ngf = self.cfg.ngf
        table = {"rgb": self.cfg.input_nc, "down1": ngf * 2, "down2": ngf * 4}
        tap_order(taps, self.cfg.n_blocks)
        return [table.get(t, ngf * 4) for t in taps]

    def _check_input(self, x):
        if x.dim() != 4 or x.shape[1] != self.cfg.input_nc:
            raise InvalidInputError(f"expected (B, {self.cfg.input_nc}, H, W) input, got {tuple(x.shape)}")

    def _stages(self, x, stop_after: int | None = None):
        """Yield (name, tensor) for every stage, stopping once depth rank ``stop_after`` is produced."""
        yield "rgb", x
        if stop_after == 0:
            return
        h = self.stem(x)
        yield "stem", h
        h = self.down1(h)
        yield "down1_conv", h
        h = self.attn1(h)
        yield "down1", h
        if stop_after == 1:
            return
        h = self.down2(h)
        yield "down2_conv", h
        h = self.attn2(h)
        yield "down2", h
        if stop_after == 2:
            return
        for i, block in enumerate(self.blocks, start=1):
            h = block(h)
            yield f"block{i}", h
            if stop_after == 2 + i:
                return
        h = self.up(h)
        yield "up", h
        yield "out", self.out(h)

    def trace(self, x: torch.Tensor) -> "OrderedDict[str, torch.Tensor]":
        self._check_input(x)
        return OrderedDict(self._stages(x))

    def encode(self, x: torch.Tensor, taps: Sequence[str] | None = None) -> list[torch.Tensor]:
        """Features at ``taps`` (default: the configured taps), in tap order."""
        self._check_input(x)
        taps = tuple(self.cfg.taps if taps is None else taps)
        ranks = tap_order(taps, self.cfg.n_blocks)
        wanted = set(taps)
        found = {name: t for name, t in self._stages(x, stop_after=ranks[-1]) if name in wanted}
        return [found[t] for t in taps]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise InvalidInputError(f"generator input sides must be divisible by 4, got {tuple(x.shape[-2:])}")
        h = self.attn2(self.down2(self.attn1(self.down1(self.stem(x)))))
        for block in self.blocks:
            h = block(h)
        return self.out(self.up(h))


class PatchDiscriminator(nn.Module):
    """PatchGAN: ``n_layers`` stride-2 convs, one stride-1 conv, then a 1-channel logit conv.

    With ``n_layers=3`` each logit sees a 70x70 receptive field and a 256x256
    input yields a 30x30 map.  Output side = ``patch_grid_size(side, n_layers)``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ndf, n = cfg.ndf, cfg.disc_layers
        layers = [nn.Conv2d(cfg.input_nc, ndf, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True)]
        mult = 1
        for i in range(1, n):
            prev, mult = mult, min(2 ** i, 8)
            layers += [nn.Conv2d(ndf * prev, ndf * mult, 4, stride=2, padding=1),
                       nn.InstanceNorm2d(ndf * mult), nn.LeakyReLU(0.2, True)]
        prev, mult = mult, min(2 ** n, 8)
        layers += [nn.Conv2d(ndf * prev, ndf * mult, 4, stride=1, padding=1),
                   nn.InstanceNorm2d(ndf * mult), nn.LeakyReLU(0.2, True),
                   nn.Conv2d(ndf * mult, 1, 4, stride=1, padding=1)]
        self.model = nn.Sequential(*layers)
        init_weights(self, cfg.init_gain)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        side = min(img.shape[-2:])
        if patch_grid_size(side, self.cfg.disc_layers) < 1:
            raise InvalidInputError(
                f"discriminator with {self.cfg.disc_layers} layers needs inputs of at least "
                f"{min_disc_input(self.cfg.disc_layers)} pixels per side"
            )
        return self.model(img)


def patch_grid_size(side: int, n_layers: int) -> int:
    for _ in range(n_layers):
        side = (side + 2 - 4) // 2 + 1
    return side - 2


def min_disc_input(n_layers: int) -> int:
    side = 1
    while patch_grid_size(side, n_layers) < 1:
        side += 1
    return side


def receptive_field(n_layers: int) -> int:
    rf = 1
    for stride in reversed([2] * n_layers + [1, 1]):
        rf = (rf - 1) * stride + 4
    return rf


def gather_patches(feat: torch.Tensor, ids: PatchIndexSet) -> torch.Tensor:
    """``(B, C, H, W)`` feature map -> ``(B, S, C)`` vectors at the sampled row-major positions."""
    b, c, h, w = feat.shape
    ids.check_bounds(h * w)
    idx = torch.as_tensor(ids.indices, dtype=torch.long, device=feat.device)
    return feat.flatten(2).index_select(2, idx).transpose(1, 2)


class PatchProjector(nn.Module):
    """Content projection F: one two-layer MLP per encoder tap."""

    def __init__(self, in_channels: Sequence[int], proj_dim: int = 256, init_gain: float = 0.02):
        super().__init__()
        self.mlps = nn.ModuleList(
            nn.Sequential(nn.Linear(c, proj_dim), nn.ReLU(), nn.Linear(proj_dim, proj_dim)) for c in in_channels
        )
        init_weights(self, init_gain)
        # post-ReLU features can be exactly zero; random biases keep their projections off the origin
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.normal_(m.bias, 0.0, init_gain)

    def __len__(self):
        return len(self.mlps)


def project_patches(stack: Sequence[torch.Tensor], ids: Sequence[PatchIndexSet],
                    head: PatchProjector | None) -> list[torch.Tensor]:
    """Gather sampled patches per layer, map them through that layer's MLP, L2-normalize."""
    if len(stack) != len(ids) or (head is not None and len(head) != len(stack)):
        raise ConsistencyError("feature stack, patch ids and projection head disagree on the number of layers")
    out = []
    for l, (feat, layer_ids) in enumerate(zip(stack, ids)):
        vecs = gather_patches(feat, layer_ids)
        if head is not None:
            vecs = head.mlps[l](vecs)
        out.append(l2_normalize(vecs))
    return out


class DomainHead(nn.Module):
    """Domain projection H: per tap, conv -> ReLU -> global average pool -> three linear layers."""

    def __init__(self, in_channels: Sequence[int], hidden: int = 128, style_dim: int = 128,
                 init_gain: float = 0.02):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(c, hidden, 3, padding=1) for c in in_channels)
        self.mlps = nn.ModuleList(
            nn.Sequential(nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(),
                          nn.Linear(hidden, style_dim))
            for _ in in_channels
        )
        init_weights(self, init_gain)
        # N(0, 0.02) through three stacked linears leaves style vectors near 1e-6; use the fan-in default
        for mlp in self.mlps:
            for m in mlp:
                if isinstance(m, nn.Linear):
                    m.reset_parameters()

    def __len__(self):
        return len(self.convs)

    def conv_stage(self, layer: int, feat: torch.Tensor) -> torch.Tensor:
        return F.relu(self.convs[layer](feat))

    def pool_stage(self, layer: int, conv_out: torch.Tensor) -> torch.Tensor:
        return self.mlps[layer](conv_out.mean(dim=(-2, -1)))


def project_domain(stack: Sequence[torch.Tensor], head: DomainHead) -> list[torch.Tensor]:
    """One ``(B, style_dim)`` style vector per encoder tap."""
    if len(stack) != len(head):
        raise ConsistencyError(f"feature stack has {len(stack)} layers, domain head has {len(head)}")
    return [head.pool_stage(l, head.conv_stage(l, feat)) for l, feat in enumerate(stack)]


@dataclass
class Networks:
    G: ResnetGenerator
    D: PatchDiscriminator
    F: PatchProjector
    Hf: DomainHead
    Hr: DomainHead

    def items(self):
        return [("G", self.G), ("D", self.D), ("F", self.F), ("Hf", self.Hf), ("Hr", self.Hr)]

    def parameter_counts(self) -> dict[str, int]:
        return {name: count_parameters(m) for name, m in self.items()}


def build_networks(cfg: ModelConfig) -> Networks:
    """Build all five sub-networks; initialisation consumes the global torch RNG in a fixed order."""
    G = ResnetGenerator(cfg)
    channels = G.tap_channels()
    D = PatchDiscriminator(cfg)
    Fp = PatchProjector(channels, cfg.proj_dim, cfg.init_gain)
    Hf = DomainHead(channels, cfg.head_hidden, cfg.style_dim, cfg.init_gain)
    Hr = DomainHead(channels, cfg.head_hidden, cfg.style_dim, cfg.init_gain)
    return Networks(G, D, Fp, Hf, Hr)
