"""Shared fixtures: tiny datasets, tiny bundles, isolated artifact root"""
import numpy as np
import pytest

from app.augment import AugmentationPolicy
from app.config import build_run_config
from app.dataset import LabeledDataset
from app.models import BackboneConfig, HeadConfig, init_bundle
from app.trainer import TrainSchedule
from app.utils import settings

IMAGE_SIZE = 8
NUM_CLASSES = 4


@pytest.fixture(autouse=True)
def artifact_root(tmp_path, monkeypatch):
    """Every test writes run directories under its own tmp dir"""
    root = tmp_path / "artifacts"
    monkeypatch.setattr(settings, "ARTIFACT_ROOT", str(root))
    monkeypatch.setattr(settings, "DEVICE", "cpu")
    monkeypatch.setattr(settings, "NUM_WORKERS", 0)
    return root


def make_dataset(per_class: int = 6, num_classes: int = NUM_CLASSES, image_size: int = IMAGE_SIZE, seed: int = 0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), per_class)
    images = rng.integers(0, 256, size=(len(labels), image_size, image_size, 3), dtype=np.uint8)
    return LabeledDataset(images=images, labels=labels, num_classes=num_classes)


def make_bundle(seed: int = 0, output_dim: int = 16, use_predictor: bool = True, num_classes: int = NUM_CLASSES):
    return init_bundle(
        BackboneConfig(family="tiny-conv", output_dim=output_dim),
        HeadConfig(use_predictor=use_predictor),
        seed,
        num_classes=num_classes,
        image_size=IMAGE_SIZE,
    )


@pytest.fixture
def tiny_dataset():
    return make_dataset()


@pytest.fixture
def tiny_bundle():
    return make_bundle()


@pytest.fixture
def identity_policy():
    return AugmentationPolicy.identity()


@pytest.fixture
def fast_schedule():
    return TrainSchedule(epochs=2, batch_size=8, seed=0)


def tiny_run_data(**changes):
    """A complete run config small enough for a unit test"""
    data = {
        "name": "tiny",
        "method": "simsiam+c+d",
        "seed": 0,
        "output_dir": "runs/tiny",
        "dataset": {
            "num_classes": NUM_CLASSES,
            "image_size": IMAGE_SIZE,
            "synthetic": {"train_per_class": 12, "test_per_class": 4},
        },
        "subset": {"kind": "imbalanced", "p": 4},
        "model": {"backbone": {"family": "tiny-conv", "output_dim": 16}},
        "pretrain": {"batch_size": 16},
        "budget": 3,
        "split": {"base": 1, "expert": 1, "distill": 1},
        "cluster": {"k": 2, "n_init": 2},
        "lineval": {"epochs": 2, "batch_size": 16, "augment_train": False},
    }
    data.update(changes)
    return data


@pytest.fixture
def tiny_run_config():
    return build_run_config(tiny_run_data())
