"""Test suite for augmentation views"""
import numpy as np
import pytest
import torch
from hypothesis import given, settings as hyp_settings, strategies as st
from pydantic import ValidationError

from app.augment import (
    AugmentationPolicy,
    Normalization,
    ViewDataset,
    eval_view,
    single_view,
    two_view,
)
from app.utils import make_generator
from tests.conftest import make_dataset


def _image(size: int = 8, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 256, size=(size, size, 3), dtype=np.uint8)


def test_identity_policy_is_exact():
    """Identity policy returns the image scaled to [0, 1]"""
    img = _image()
    pair = two_view(img, AugmentationPolicy.identity(), make_generator(0))
    expected = torch.from_numpy(img).permute(2, 0, 1).float() / 255.0
    assert torch.allclose(pair.v, expected)
    assert torch.allclose(pair.v_prime, expected)


def test_two_view_deterministic_given_generator():
    img = _image()
    policy = AugmentationPolicy()
    a = two_view(img, policy, make_generator(11))
    b = two_view(img, policy, make_generator(11))
    assert torch.equal(a.v, b.v)
    assert torch.equal(a.v_prime, b.v_prime)


def test_two_views_differ():
    """The two chains of a pair are sampled independently"""
    img = _image(size=16)
    pair = two_view(img, AugmentationPolicy(), make_generator(5))
    assert not torch.equal(pair.v, pair.v_prime)


def test_flip_only_policy():
    img = _image()
    policy = AugmentationPolicy.identity().model_copy(update={"flip_probability": 1.0})
    view = single_view(img, policy, make_generator(0))
    expected = torch.from_numpy(img).permute(2, 0, 1).float().div(255.0).flip(-1)
    assert torch.allclose(view, expected)


def test_eval_view_normalizes():
    img = np.full((4, 4, 3), 255, dtype=np.uint8)
    view = eval_view(img, Normalization(mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5)))
    assert torch.allclose(view, torch.ones(3, 4, 4))


@given(size=st.sampled_from([4, 8, 16, 32]), seed=st.integers(min_value=0, max_value=2**31))
@hyp_settings(max_examples=25, deadline=None)
def test_views_keep_shape(size, seed):
    """Every chain maps H×W×3 to 3×H×W"""
    pair = two_view(_image(size, seed % 7), AugmentationPolicy(), make_generator(seed))
    assert pair.v.shape == (3, size, size)
    assert pair.v_prime.shape == (3, size, size)
    assert torch.isfinite(pair.v).all()


def test_policy_validation():
    with pytest.raises(ValidationError):
        AugmentationPolicy(flip_probability=1.5)
    with pytest.raises(ValidationError):
        AugmentationPolicy(crop_scale_range=(0.0, 1.0))
    with pytest.raises(ValidationError):
        AugmentationPolicy(color_jitter=(0.4, 0.4, 0.4, 0.6))
    with pytest.raises(ValidationError):
        Normalization(std=(0.0, 1.0, 1.0))


def test_linear_eval_policy_is_crop_and_flip():
    policy = AugmentationPolicy.linear_eval()
    assert policy.jitter_probability == 0.0
    assert policy.grayscale_probability == 0.0
    assert policy.flip_probability == 0.5


def test_view_dataset_modes():
    ds = make_dataset(per_class=2)
    two = ViewDataset(ds, AugmentationPolicy(), mode="two", seed=0)
    v, v_prime, label, index = two[3]
    assert v.shape == v_prime.shape == (3, 8, 8)
    assert label == int(ds.labels[3]) and index == 3

    single = ViewDataset(ds, AugmentationPolicy(), mode="single", seed=0)
    assert len(single[0]) == 3
    with pytest.raises(ValueError):
        ViewDataset(ds, AugmentationPolicy(), mode="three")


def test_view_dataset_epoch_changes_views():
    """Same (seed, epoch, index) gives the same view; a new epoch gives a new one"""
    ds = make_dataset(per_class=2, image_size=16)
    views = ViewDataset(ds, AugmentationPolicy(), mode="single", seed=4)
    first = views[0][0]
    assert torch.equal(first, views[0][0])
    views.set_epoch(1)
    assert not torch.equal(first, views[0][0])
