"""Run configuration files and presets.

A config file is TOML (or the JSON written as ``config.resolved.json``).
Top-level keys are TrainConfig fields plus the run keys below; the
``[weights]``, ``[crops]`` and ``[model]`` tables map onto the nested configs.
A ``base = "<preset>"`` key inherits from another preset first.

Precedence: command-line flags > file > defaults.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .engine import TrainConfig
from .errors import InvalidConfigError

RUN_KEYS = ("data_root", "out_dir", "checkpoint_interval", "preset")
NESTED = ("weights", "crops", "model")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data_root: str | None = None
    out_dir: str = "runs/default"
    checkpoint_interval: int = 0
    preset: str | None = None

    def to_dict(self) -> dict:
        return {"data_root": self.data_root, "out_dir": self.out_dir,
                "checkpoint_interval": self.checkpoint_interval, "preset": self.preset,
                "train": self.train.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Accepts the flat file layout or the nested ``to_dict`` layout."""
        return cls(**resolve_run_dict(flatten_run_dict(d) if "train" in d else d))

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("mcdut.presets").iterdir() if p.name.endswith(".toml"))


def _preset_path(name: str):
    stem = Path(name).name
    stem = stem[:-5] if stem.endswith(".toml") else stem
    res = resources.files("mcdut.presets") / f"{stem}.toml"
    if not res.is_file():
        raise InvalidConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return res, stem


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_toml(text: str, origin: str) -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise InvalidConfigError(f"{origin}: {exc}") from exc


def _expand(raw: dict, origin: str, seen: tuple[str, ...] = ()) -> dict:
    raw = dict(raw)
    base = raw.pop("base", None)
    if base is None:
        return raw
    res, stem = _preset_path(base)
    if stem in seen:
        raise InvalidConfigError(f"{origin}: circular preset inheritance through {stem!r}")
    parent = _expand(_parse_toml(res.read_text(), stem), stem, seen + (stem,))
    return _deep_merge(parent, raw)


def load_preset(name: str) -> dict:
    res, stem = _preset_path(name)
    d = _expand(_parse_toml(res.read_text(), stem), stem, (stem,))
    d.setdefault("preset", stem)
    return d


def load_config_file(path: str | Path) -> dict:
    """Flat config dictionary from a TOML/JSON file or a bundled preset name/path."""
    p = Path(path)
    if p.is_file():
        text = p.read_text()
        if p.suffix == ".json":
            try:
                d = json.loads(text)
            except json.JSONDecodeError as exc:
                raise InvalidConfigError(f"{p}: {exc}") from exc
            return flatten_run_dict(d) if "train" in d else d
        return _expand(_parse_toml(text, str(p)), str(p))
    if p.parent.name in ("", "presets"):
        return load_preset(p.name)
    raise InvalidConfigError(f"config file not found: {path}")


def flatten_run_dict(d: dict) -> dict:
    """Inverse of RunConfig.to_dict: lift the ``train`` table to the top level."""
    d = dict(d)
    train = d.pop("train", {})
    return {**train, **d}


def resolve_run_dict(flat: dict) -> dict:
    flat = dict(flat)
    run = {k: flat.pop(k) for k in RUN_KEYS if k in flat}
    run["train"] = TrainConfig.from_dict(flat)
    return run


def resolve(file_dict: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults <- file <- overrides (overrides use the same flat/nested key layout)."""
    merged = _deep_merge(file_dict or {}, overrides or {})
    return RunConfig.from_dict(merged)


def lint_presets() -> dict[str, str | None]:
    """Parse and validate every bundled preset; maps name -> error message or None."""
    results = {}
    for name in preset_names():
        try:
            resolve(load_preset(name))
            results[name] = None
        except InvalidConfigError as exc:
            results[name] = str(exc)
    return results
