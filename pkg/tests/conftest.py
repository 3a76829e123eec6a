import sys

import numpy as np
import pytest
import torch

from mcdut.engine import TrainConfig
from mcdut.losses import LossWeights
from mcdut.multicrop import CropConfig
from mcdut.networks import ModelConfig
from mcdut.synthetic import make_shapes_dataset


def toy_model(**kw) -> ModelConfig:
    base = dict(ngf=4, ndf=4, n_blocks=2, taps=("rgb", "down1", "down2", "block1", "block2"),
                disc_layers=2, proj_dim=16, style_dim=8, head_hidden=8, attention_reduction=2)
    base.update(kw)
    return ModelConfig(**base)


def toy_config(**kw) -> TrainConfig:
    model = kw.pop("model", toy_model())
    base = dict(epochs=4, decay_start_epoch=2, load_size=20, crop_size=16, num_patches=8, num_negatives=8,
                crops=CropConfig(), weights=LossWeights(), model=model, flip=True)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def shapes_root(tmp_path_factory):
    return make_shapes_dataset(tmp_path_factory.mktemp("shapes"), n_per_domain=8, size=24, n_test=4)


@pytest.fixture
def toy_tree(tmp_path):
    """trainA with 3 images, trainB with 2 (plus a stray text file)."""
    from PIL import Image

    for domain, n in (("A", 3), ("B", 2)):
        d = tmp_path / f"train{domain}"
        d.mkdir()
        for i in range(n):
            Image.new("RGB", (20, 20), (i * 40, 0, 0)).save(d / f"{i}.png")
    (tmp_path / "trainA" / "notes.txt").write_text("not an image")
    return tmp_path


@pytest.fixture(autouse=True)
def _deterministic():
    torch.use_deterministic_algorithms(True)
    yield


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("tests.test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[number])
