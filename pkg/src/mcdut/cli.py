"""Command-line entry point: ``mcdut {train,translate,evaluate,lint-presets,serve}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import (AssetError, CheckpointError, DatasetError, DivergedTrainingError, InvalidConfigError,
                     InvalidInputError, McdutError)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("mcdut")


def _overrides(args) -> dict:
    o: dict = {}
    if args.data_root is not None:
        o["data_root"] = args.data_root
    if args.out is not None:
        o["out_dir"] = args.out
    if args.seed is not None:
        o["seed"] = args.seed
    if args.max_steps is not None:
        o["max_steps"] = args.max_steps
    if args.checkpoint_interval is not None:
        o["checkpoint_interval"] = args.checkpoint_interval
    if args.no_domain_loss:
        o["use_domain_loss"] = False
    if args.no_multicrop:
        o["use_multicrop_nce"] = False
    if args.gan_loss is not None:
        o["gan_loss_form"] = args.gan_loss
    if args.no_dca:
        o["model"] = {"attention": "none"}
    return o


def _apply_epochs(file_dict: dict, epochs: int | None) -> dict:
    """``--epochs`` keeps the decay knee at the same fraction of the run."""
    if epochs is None:
        return {}
    from .engine import TrainConfig

    defaults = TrainConfig()
    old_epochs = file_dict.get("epochs", defaults.epochs)
    old_decay = file_dict.get("decay_start_epoch", defaults.decay_start_epoch)
    return {"epochs": epochs, "decay_start_epoch": min(epochs, round(epochs * old_decay / old_epochs))}


def cmd_train(args) -> int:
    from .config import load_config_file, resolve
    from .data import scan_dataset
    from .engine import fit

    file_dict = load_config_file(args.config) if args.config else {}
    overrides = {**_overrides(args), **_apply_epochs(file_dict, args.epochs)}
    run = resolve(file_dict, overrides)
    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run.write(out_dir / "config.resolved.json")
    if args.dry_run:
        print(json.dumps(run.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    if run.data_root is None:
        raise InvalidConfigError("no dataset given: pass --data-root or set data_root in the config")
    manifest = scan_dataset(run.data_root, "train")
    state = fit(run.train, manifest, out_dir, run.checkpoint_interval, resume=args.resume,
                dump_crops=args.dump_crops)
    print(f"finished at step {state.step}; checkpoints in {out_dir / 'checkpoints'}")
    return EXIT_OK


def cmd_translate(args) -> int:
    from PIL import Image

    from .data import IMAGE_EXTENSIONS, load_and_preprocess, to_uint8
    from .engine import load_checkpoint, translate

    state = load_checkpoint(args.checkpoint)
    size = args.size or state.cfg.crop_size
    src = Path(args.input)
    if not src.is_dir():
        raise DatasetError(f"input directory does not exist: {src}")
    paths = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in paths:
        img = load_and_preprocess(p, "eval", load_size=size, crop_size=size)
        fake = translate(state.nets.G, img.unsqueeze(0))[0]
        Image.fromarray(to_uint8(fake)).save(out / f"{p.stem}.png")
    print(f"translated {len(paths)} images into {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .data import scan_dataset
    from .evaluation import evaluate_run, get_extractor

    manifest = scan_dataset(args.data_root, args.split)
    extractor = get_extractor(args.extractor)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = out / "grid.png" if args.grid else None
    report = evaluate_run(args.checkpoint, manifest, extractor, args.size, grid_path=grid)
    report.write(out / "metrics.json")
    print(f"fid: {report.fid:.6f}")
    print(f"kid_x100: {report.kid_x100:.6f}")
    print(f"n_gen: {report.n_gen}  n_real: {report.n_real}  extractor: {report.extractor_id}")
    return EXIT_OK


def cmd_lint_presets(args) -> int:
    from .config import lint_presets

    failures = 0
    for name, err in lint_presets().items():
        print(f"{'ok  ' if err is None else 'FAIL'} {name}" + (f": {err}" if err else ""))
        failures += err is not None
    return EXIT_USAGE if failures else EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(args.workdir), host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcdut", description="Multi-crop contrastive unpaired image translation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a translation model")
    t.add_argument("--config", help="TOML/JSON config file or preset (e.g. presets/horse2zebra.toml)")
    t.add_argument("--data-root", help="dataset root with trainA/ and trainB/")
    t.add_argument("--out", help="output directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int, help="total epochs; the decay start is rescaled proportionally")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--checkpoint-interval", type=int, help="steps between checkpoints (0 = end only)")
    t.add_argument("--no-dca", action="store_true", help="drop the attention blocks from the encoder")
    t.add_argument("--no-domain-loss", action="store_true")
    t.add_argument("--no-multicrop", action="store_true", help="use input-internal negatives instead of crop views")
    t.add_argument("--gan-loss", choices=["hinge", "log"])
    t.add_argument("--dump-crops", metavar="DIR", help="write the first image's crop views as PNGs")
    t.add_argument("--resume", metavar="PATH", help="checkpoint (or run dir) to resume from")
    t.add_argument("--dry-run", action="store_true", help="resolve and archive the config, then exit")
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("translate", help="translate a directory of images")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--input", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--size", type=int, help="working resolution (default: the training crop size)")
    tr.set_defaults(func=cmd_translate)

    ev = sub.add_parser("evaluate", help="FID / KID(x100) of translated testA against testB")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data-root", required=True)
    ev.add_argument("--split", default="test", choices=["train", "test"])
    ev.add_argument("--extractor", default="inception", choices=["inception", "identity", "random-projection"])
    ev.add_argument("--out", default=".")
    ev.add_argument("--size", type=int)
    ev.add_argument("--grid", action="store_true", help="also write grid.png of (input, translated) pairs")
    ev.set_defaults(func=cmd_evaluate)

    lp = sub.add_parser("lint-presets", help="parse and validate every bundled preset")
    lp.set_defaults(func=cmd_lint_presets)

    sv = sub.add_parser("serve", help="run the HTTP service")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8000)
    sv.add_argument("--workdir", default="runs")
    sv.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvalidConfigError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergedTrainingError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DatasetError, AssetError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except McdutError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
