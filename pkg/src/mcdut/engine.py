"""Training loop: alternating discriminator / generator updates and checkpointing."""

from __future__ import annotations

import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from .data import DatasetManifest, batches_per_epoch, unpaired_batch_iter
from .errors import AssetError, CheckpointError, DivergedTrainingError, InvalidConfigError, InvalidInputError
from .losses import (GAN_LOSSES, LossReport, LossWeights, domain_consistency_loss, l2_normalize,
                     multicrop_nce_loss, total_generator_objective)
from .multicrop import CropConfig, dump_views, gather_negatives, make_multicrop_views, sample_patch_ids
from .networks import ModelConfig, Networks, build_networks, gather_patches, project_domain, project_patches

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


@dataclass
class TrainConfig:
    epochs: int = 400
    decay_start_epoch: int = 200
    base_lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 1
    load_size: int = 286
    crop_size: int = 256
    flip: bool = True
    seed: int = 0
    num_patches: int = 256
    num_negatives: int = 256
    use_multicrop_nce: bool = True
    use_domain_loss: bool = True
    gan_loss_form: str = "hinge"
    max_steps: int | None = None
    num_workers: int = 0
    device: str = "cpu"
    debug_freeze_check: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    crops: CropConfig = field(default_factory=CropConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1 or not 0 <= self.decay_start_epoch <= self.epochs:
            raise InvalidConfigError(
                f"need epochs >= 1 and 0 <= decay_start_epoch <= epochs, got {self.decay_start_epoch}/{self.epochs}"
            )
        if self.base_lr <= 0:
            raise InvalidConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if self.batch_size < 1:
            raise InvalidConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.crop_size > self.load_size:
            raise InvalidConfigError(f"crop_size {self.crop_size} exceeds load_size {self.load_size}")
        if self.gan_loss_form not in GAN_LOSSES:
            raise InvalidConfigError(f"gan_loss_form must be one of {sorted(GAN_LOSSES)}, got {self.gan_loss_form!r}")
        if self.num_patches < 2 or self.num_negatives < 1:
            raise InvalidConfigError("need num_patches >= 2 and num_negatives >= 1")
        if self.max_steps is not None and self.max_steps < 0:
            raise InvalidConfigError("max_steps must be >= 0")

    @property
    def use_dca(self) -> bool:
        return self.model.attention.startswith("dca")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["crops"]["random_scale_range"] = list(self.crops.random_scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        nested = {"weights": LossWeights, "crops": CropConfig, "model": ModelConfig}
        for key, typ in nested.items():
            if key in d and not isinstance(d[key], typ):
                d[key] = typ(**_known_keys(typ, d[key], key))
        return cls(**_known_keys(cls, d, "train"))


def _known_keys(typ, d: dict, where: str) -> dict:
    names = {f.name for f in fields(typ)}
    unknown = set(d) - names
    if unknown:
        raise InvalidConfigError(f"unknown {where} option(s): {', '.join(sorted(unknown))}")
    return d


def lr_at_epoch(epoch: float, cfg: TrainConfig) -> float:
    """Constant ``base_lr`` up to ``decay_start_epoch``, then linear to 0 at ``epochs``."""
    if not 0 <= epoch <= cfg.epochs:
        raise InvalidInputError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if epoch <= cfg.decay_start_epoch:
        return cfg.base_lr
    return cfg.base_lr * (cfg.epochs - epoch) / (cfg.epochs - cfg.decay_start_epoch)


@dataclass
class TrainState:
    cfg: TrainConfig
    nets: Networks
    opt_G: torch.optim.Adam
    opt_D: torch.optim.Adam
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0

    @property
    def device(self) -> torch.device:
        return torch.device(self.cfg.device)


def init_state(cfg: TrainConfig) -> TrainState:
    torch.manual_seed(cfg.seed)
    nets = build_networks(cfg.model)
    for _, m in nets.items():
        m.to(cfg.device)
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    opt_G = torch.optim.Adam(generator_side_parameters(nets), lr=cfg.base_lr, betas=betas)
    opt_D = torch.optim.Adam(nets.D.parameters(), lr=cfg.base_lr, betas=betas)
    return TrainState(cfg, nets, opt_G, opt_D, np.random.default_rng(cfg.seed))


def generator_side_parameters(nets: Networks) -> list[torch.nn.Parameter]:
    """G, F, Hf and Hr share one optimizer."""
    return [*nets.G.parameters(), *nets.F.parameters(), *nets.Hf.parameters(), *nets.Hr.parameters()]


def _crop_view_batches(src: torch.Tensor, crops: CropConfig, rng: np.random.Generator) -> torch.Tensor:
    """``(B, 3, H, W)`` -> ``(V * B, 3, H, W)``, view-major."""
    per_image = [make_multicrop_views(img, crops, rng) for img in src]
    return torch.cat([torch.stack([views[v].image for views in per_image]) for v in range(crops.num_views)])


def contrastive_term(nets: Networks, cfg: TrainConfig, src: torch.Tensor, src_feats: list[torch.Tensor],
                     translated_feats: list[torch.Tensor], rng: np.random.Generator) -> torch.Tensor:
    """Patch contrastive loss: queries from the translated image, positives from ``src`` at the
    same positions, negatives from the crop views of ``src`` (or from ``src`` itself when
    multi-cropping is disabled)."""
    ids = [sample_patch_ids(f.shape[-2:], min(cfg.num_patches, f.shape[-2] * f.shape[-1]), rng, layer_id=l)
           for l, f in enumerate(src_feats)]
    queries = project_patches(translated_feats, ids, nets.F)
    positives = project_patches(src_feats, ids, nets.F)
    negative_sets = None
    if cfg.use_multicrop_nce:
        views = _crop_view_batches(src, cfg.crops, rng)
        view_feats = nets.G.encode(views)
        negative_sets = []
        for l, feat in enumerate(view_feats):
            per_view = []
            for chunk in feat.chunk(cfg.crops.num_views, dim=0):
                count = min(cfg.num_patches, chunk.shape[-2] * chunk.shape[-1])
                vid = sample_patch_ids(chunk.shape[-2:], count, rng, layer_id=l)
                per_view.append(l2_normalize(nets.F.mlps[l](gather_patches(chunk, vid))))
            pool = sum(e.shape[-2] for e in per_view)
            negative_sets.append(gather_negatives(per_view, l, min(cfg.num_negatives, pool), rng))
    return multicrop_nce_loss(queries, positives, negative_sets, ids, cfg.weights.tau)


def generator_terms(nets: Networks, cfg: TrainConfig, x: torch.Tensor, y: torch.Tensor,
                    rng: np.random.Generator, fake: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
    """All generator-side loss terms for one batch (differentiable)."""
    _, g_loss = GAN_LOSSES[cfg.gan_loss_form]
    w = cfg.weights
    zero = x.new_zeros(())
    if fake is None:
        fake = nets.G(x)
    terms = {"gan_g": g_loss(nets.D(fake)) if w.lambda_gan > 0 else zero}

    feats_x = nets.G.encode(x)
    feats_fake = nets.G.encode(fake)
    terms["nce"] = contrastive_term(nets, cfg, x, feats_x, feats_fake, rng) if w.lambda_nce > 0 else zero

    need_y_feats = w.lambda_ide > 0 or (cfg.use_domain_loss and w.lambda_dom > 0)
    feats_y = nets.G.encode(y) if need_y_feats else None
    if w.lambda_ide > 0:
        feats_idt = nets.G.encode(nets.G(y))
        terms["identity"] = contrastive_term(nets, cfg, y, feats_y, feats_idt, rng)
    else:
        terms["identity"] = zero

    if cfg.use_domain_loss and w.lambda_dom > 0:
        real_style = project_domain(feats_y, nets.Hr)
        fake_style = project_domain(feats_fake, nets.Hf)
        terms["domain"] = domain_consistency_loss(real_style, fake_style)
        spread = min(s.detach().std().item() if s.numel() > 1 else 1.0 for s in real_style + fake_style)
        if spread < 1e-6:
            log.warning("domain head outputs have collapsed (min spread %.2e)", spread)
    else:
        terms["domain"] = zero
    terms["total_g"] = total_generator_objective(terms["gan_g"], terms["nce"], terms["domain"],
                                                 terms["identity"], w)
    return terms


def _check_finite(name: str, value: torch.Tensor, step: int) -> None:
    v = float(value.detach())
    if not math.isfinite(v):
        raise DivergedTrainingError(name, v, step)


def _snapshot(modules) -> list[torch.Tensor]:
    return [p.detach().clone() for m in modules for p in m.parameters()]


def _assert_unchanged(before, modules, what: str) -> None:
    after = [p.detach() for m in modules for p in m.parameters()]
    if any(not torch.equal(a, b) for a, b in zip(before, after)):
        raise RuntimeError(f"{what} parameters changed during the wrong update")


def discriminator_step(state: TrainState, x: torch.Tensor, y: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    nets, cfg = state.nets, state.cfg
    d_loss_fn, _ = GAN_LOSSES[cfg.gan_loss_form]
    nets.D.requires_grad_(True)
    gen_mods = [nets.G, nets.F, nets.Hf, nets.Hr]
    before = _snapshot(gen_mods) if cfg.debug_freeze_check else None
    state.opt_D.zero_grad(set_to_none=True)
    loss_d = d_loss_fn(nets.D(y), nets.D(fake.detach()))
    _check_finite("gan_d", loss_d, state.step)
    loss_d.backward()
    state.opt_D.step()
    if before is not None:
        _assert_unchanged(before, gen_mods, "generator-side")
    return loss_d


def generator_step(state: TrainState, x: torch.Tensor, y: torch.Tensor,
                   fake: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
    nets, cfg = state.nets, state.cfg
    nets.D.requires_grad_(False)
    before = _snapshot([nets.D]) if cfg.debug_freeze_check else None
    state.opt_G.zero_grad(set_to_none=True)
    terms = generator_terms(nets, cfg, x, y, state.rng, fake)
    for name in ("gan_g", "nce", "domain", "identity", "total_g"):
        _check_finite(name, terms[name], state.step)
    terms["total_g"].backward()
    state.opt_G.step()
    nets.D.requires_grad_(True)
    if before is not None:
        _assert_unchanged(before, [nets.D], "discriminator")
    return terms


def set_lr(state: TrainState, lr: float) -> None:
    for opt in (state.opt_G, state.opt_D):
        for group in opt.param_groups:
            group["lr"] = lr


def train_step(state: TrainState, x: torch.Tensor, y: torch.Tensor) -> tuple[TrainState, LossReport]:
    """One discriminator update followed by one joint update of G, F, Hf and Hr."""
    x, y = x.to(state.device), y.to(state.device)
    for _, m in state.nets.items():
        m.train()
    fake = state.nets.G(x)
    loss_d = discriminator_step(state, x, y, fake)
    terms = generator_step(state, x, y, fake)
    state.step += 1
    values = {k: float(v.detach()) for k, v in terms.items()}
    report = LossReport(gan_d=float(loss_d.detach()), **values)
    return state, report


# -- checkpoints ---------------------------------------------------------------------------------

def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    """Write a checkpoint directory atomically: everything goes to a temp dir that is renamed last."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        for name, module in state.nets.items():
            torch.save(module.state_dict(), tmp / f"{name}.pt")
        torch.save(state.opt_G.state_dict(), tmp / "opt_G.pt")
        torch.save(state.opt_D.state_dict(), tmp / "opt_D.pt")
        torch.save(torch.get_rng_state(), tmp / "torch_rng.pt")
        manifest = {
            "format_version": CHECKPOINT_FORMAT,
            "model": state.cfg.model.to_dict(),
            "config": state.cfg.to_dict(),
            "step": state.step,
            "epoch": state.epoch,
            "batch_in_epoch": state.batch_in_epoch,
            "rng_state": state.rng.bit_generator.state,
            "parameter_counts": state.nets.parameter_counts(),
        }
        _write_json(tmp / "manifest.json", manifest)
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            shutil.rmtree(old, ignore_errors=True)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old, ignore_errors=True)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def resolve_checkpoint(path: str | Path) -> Path:
    """Accept a checkpoint dir, a checkpoints dir with ``latest``, or a run output dir."""
    path = Path(path)
    for candidate in (path, path / "checkpoints"):
        if (candidate / "manifest.json").is_file():
            return candidate
        pointer = candidate / "latest"
        if pointer.is_file():
            return candidate / pointer.read_text().strip()
    raise AssetError(f"no checkpoint found at {path}")


def read_manifest(path: str | Path) -> dict:
    path = resolve_checkpoint(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"checkpoint {path} has format version {manifest.get('format_version')}, expected {CHECKPOINT_FORMAT}"
        )
    return manifest


def load_checkpoint(path: str | Path, model: ModelConfig | None = None) -> TrainState:
    """Rebuild a TrainState; ``model`` (if given) must match the stored architecture exactly."""
    path = resolve_checkpoint(path)
    manifest = read_manifest(path)
    cfg = TrainConfig.from_dict(manifest["config"])
    if manifest["model"] != cfg.model.to_dict():
        raise CheckpointError(f"checkpoint {path}: manifest model and config model disagree")
    if model is not None and model.to_dict() != manifest["model"]:
        raise CheckpointError(f"checkpoint {path} was written for a different architecture")
    state = init_state(cfg)
    for name, module in state.nets.items():
        try:
            module.load_state_dict(torch.load(path / f"{name}.pt", map_location=cfg.device, weights_only=True))
        except RuntimeError as exc:
            raise CheckpointError(f"checkpoint {path}: {name} does not fit the architecture: {exc}") from exc
    state.opt_G.load_state_dict(torch.load(path / "opt_G.pt", map_location=cfg.device, weights_only=True))
    state.opt_D.load_state_dict(torch.load(path / "opt_D.pt", map_location=cfg.device, weights_only=True))
    torch.set_rng_state(torch.load(path / "torch_rng.pt", weights_only=True))
    state.rng.bit_generator.state = manifest["rng_state"]
    state.step = manifest["step"]
    state.epoch = manifest["epoch"]
    state.batch_in_epoch = manifest["batch_in_epoch"]
    return state


def _set_latest(ckpt_root: Path, name: str) -> None:
    tmp = ckpt_root / ".latest.tmp"
    tmp.write_text(name + "\n")
    os.replace(tmp, ckpt_root / "latest")


def _checkpoint(state: TrainState, ckpt_root: Path) -> Path:
    name = f"step_{state.step:08d}"
    path = save_checkpoint(state, ckpt_root / name)
    _set_latest(ckpt_root, name)
    return path


# -- fit -----------------------------------------------------------------------------------------

def fit(cfg: TrainConfig, manifest: DatasetManifest, out_dir: str | Path, checkpoint_interval: int = 0,
        resume: str | Path | None = None, dump_crops: str | Path | None = None,
        on_step: Callable[[dict], None] | None = None) -> TrainState:
    """Train for ``cfg.epochs`` epochs (or ``cfg.max_steps`` steps, whichever ends first).

    Streams one JSON object per step to ``out_dir/metrics.jsonl`` and writes
    checkpoints to ``out_dir/checkpoints/step_XXXXXXXX`` every
    ``checkpoint_interval`` steps (0 = only at the end).
    """
    out_dir = Path(out_dir)
    ckpt_root = out_dir / "checkpoints"
    ckpt_root.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        state = load_checkpoint(resume, cfg.model)
        # schedule/bookkeeping options may change on resume; the architecture may not
        state.cfg = cfg
    else:
        state = init_state(cfg)
    n_batches = batches_per_epoch(manifest, cfg.batch_size)
    metrics_path = out_dir / "metrics.jsonl"

    def done() -> bool:
        return cfg.max_steps is not None and state.step >= cfg.max_steps

    with metrics_path.open("a") as metrics:
        while state.epoch < cfg.epochs and not done():
            lr = lr_at_epoch(state.epoch, cfg)
            set_lr(state, lr)
            batches = unpaired_batch_iter(manifest, cfg.batch_size, cfg.seed, state.epoch, cfg.load_size,
                                          cfg.crop_size, cfg.flip, start_batch=state.batch_in_epoch,
                                          num_workers=cfg.num_workers)
            for x, y in batches:
                if dump_crops is not None and state.step == 0:
                    dump_views(make_multicrop_views(x[0], cfg.crops, np.random.default_rng(cfg.seed)), dump_crops)
                epoch = state.epoch
                state, report = train_step(state, x, y)
                state.batch_in_epoch += 1
                if state.batch_in_epoch >= n_batches:
                    state.epoch += 1
                    state.batch_in_epoch = 0
                record = {"step": state.step, "epoch": epoch, **report.to_dict(), "lr": lr}
                metrics.write(json.dumps(record) + "\n")
                metrics.flush()
                if on_step is not None:
                    on_step(record)
                if checkpoint_interval and state.step % checkpoint_interval == 0:
                    _checkpoint(state, ckpt_root)
                if done():
                    break
    _checkpoint(state, ckpt_root)
    return state


@torch.no_grad()
def translate(G, images: torch.Tensor | Iterable[torch.Tensor], batch_size: int = 8) -> torch.Tensor:
    """Run the generator in eval mode over ``(N, 3, H, W)`` images."""
    G.eval()
    images = images if isinstance(images, torch.Tensor) else torch.stack(list(images))
    device = next(G.parameters()).device
    outs = [G(images[i:i + batch_size].to(device)).cpu() for i in range(0, len(images), batch_size)]
    return torch.cat(outs)
