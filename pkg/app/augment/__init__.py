"""Stochastic augmentation set and two-view / single-view sampling

Every random draw comes from an explicit torch.Generator, so a view is a pure
function of (record, policy, seed).
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from torch.utils.data import Dataset
from torchvision.transforms import InterpolationMode
from torchvision.transforms.v2 import functional as TF

from app.dataset import ImageRecord, LabeledDataset
from app.utils import derive_seed, make_generator

logger = logging.getLogger(__name__)

CORPUS_MEAN = (0.4914, 0.4822, 0.4465)
CORPUS_STD = (0.2470, 0.2435, 0.2616)


class Normalization(BaseModel):
    """Per-channel (mean, std)"""
    model_config = ConfigDict(extra="forbid", frozen=True)

    mean: Tuple[float, float, float] = CORPUS_MEAN
    std: Tuple[float, float, float] = CORPUS_STD

    @field_validator("std")
    @classmethod
    def _positive_std(cls, v):
        if any(s <= 0 for s in v):
            raise ValueError("std must be positive")
        return v


class AugmentationPolicy(BaseModel):
    """Parameterized transform set

    Defaults: resized crop (0.2, 1.0), flip 0.5, colour jitter (0.4, 0.4, 0.4, 0.1)
    applied with p=0.8, grayscale 0.2, no blur.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    crop_scale_range: Tuple[float, float] = (0.2, 1.0)
    crop_ratio_range: Tuple[float, float] = (3 / 4, 4 / 3)
    flip_probability: float = 0.5
    color_jitter: Tuple[float, float, float, float] = (0.4, 0.4, 0.4, 0.1)
    jitter_probability: float = 0.8
    grayscale_probability: float = 0.2
    normalization: Normalization = Normalization()

    @field_validator("flip_probability", "jitter_probability", "grayscale_probability")
    @classmethod
    def _probability(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        return v

    @field_validator("color_jitter")
    @classmethod
    def _jitter(cls, v):
        if any(s < 0 for s in v) or v[3] > 0.5:
            raise ValueError("jitter strengths must be >= 0 and hue <= 0.5")
        return v

    @model_validator(mode="after")
    def _crop(self):
        lo, hi = self.crop_scale_range
        if not (0 < lo <= hi <= 1):
            raise ValueError("crop_scale_range must satisfy 0 < min <= max <= 1")
        if not (0 < self.crop_ratio_range[0] <= self.crop_ratio_range[1]):
            raise ValueError("crop_ratio_range must be positive and ordered")
        return self

    @classmethod
    def identity(cls) -> "AugmentationPolicy":
        """Full-area crop, no stochastic ops, unit normalization"""
        return cls(
            crop_scale_range=(1.0, 1.0),
            flip_probability=0.0,
            jitter_probability=0.0,
            grayscale_probability=0.0,
            normalization=Normalization(mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0)),
        )

    @classmethod
    def linear_eval(cls, normalization: Optional[Normalization] = None) -> "AugmentationPolicy":
        """Crop + flip only"""
        return cls(
            crop_scale_range=(0.2, 1.0),
            flip_probability=0.5,
            jitter_probability=0.0,
            grayscale_probability=0.0,
            normalization=normalization or Normalization(),
        )


@dataclass
class ViewPair:
    v: torch.Tensor
    v_prime: torch.Tensor


def _uniform(generator: torch.Generator, low: float, high: float) -> float:
    return low + (high - low) * torch.rand(1, generator=generator).item()


def _coin(generator: torch.Generator, p: float) -> bool:
    return torch.rand(1, generator=generator).item() < p


def _to_tensor(x) -> torch.Tensor:
    pixels = x.pixels if isinstance(x, ImageRecord) else x
    return torch.from_numpy(np.ascontiguousarray(pixels)).permute(2, 0, 1).float().div(255.0)


def _crop_box(height: int, width: int, policy: AugmentationPolicy, generator: torch.Generator):
    """Random resized crop box (top, left, h, w), ten attempts then full image"""
    area = height * width
    log_lo, log_hi = (math.log(r) for r in policy.crop_ratio_range)
    for _ in range(10):
        target = area * _uniform(generator, *policy.crop_scale_range)
        ratio = math.exp(_uniform(generator, log_lo, log_hi))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= width and 0 < h <= height:
            top = int(torch.randint(0, height - h + 1, (1,), generator=generator).item())
            left = int(torch.randint(0, width - w + 1, (1,), generator=generator).item())
            return top, left, h, w
    return 0, 0, height, width


def _color_jitter(img: torch.Tensor, policy: AugmentationPolicy, generator: torch.Generator):
    brightness, contrast, saturation, hue = policy.color_jitter
    for op in torch.randperm(4, generator=generator).tolist():
        if op == 0 and brightness > 0:
            img = TF.adjust_brightness(img, _uniform(generator, max(0.0, 1 - brightness), 1 + brightness))
        elif op == 1 and contrast > 0:
            img = TF.adjust_contrast(img, _uniform(generator, max(0.0, 1 - contrast), 1 + contrast))
        elif op == 2 and saturation > 0:
            img = TF.adjust_saturation(img, _uniform(generator, max(0.0, 1 - saturation), 1 + saturation))
        elif op == 3 and hue > 0:
            img = TF.adjust_hue(img, _uniform(generator, -hue, hue))
    return img


def _normalize(img: torch.Tensor, normalization: Normalization) -> torch.Tensor:
    return TF.normalize(img, mean=list(normalization.mean), std=list(normalization.std))


def _chain(img: torch.Tensor, policy: AugmentationPolicy, generator: torch.Generator) -> torch.Tensor:
    _, height, width = img.shape
    top, left, h, w = _crop_box(height, width, policy, generator)
    if (top, left, h, w) != (0, 0, height, width):
        img = TF.resized_crop(
            img, top, left, h, w, [height, width],
            interpolation=InterpolationMode.BILINEAR, antialias=True,
        )
    if _coin(generator, policy.flip_probability):
        img = TF.horizontal_flip(img)
    if _coin(generator, policy.jitter_probability):
        img = _color_jitter(img, policy, generator)
    if _coin(generator, policy.grayscale_probability):
        img = TF.rgb_to_grayscale(img, num_output_channels=3)
    return _normalize(img.clamp(0.0, 1.0), policy.normalization)


def two_view(x, policy: AugmentationPolicy, rng_state: torch.Generator) -> ViewPair:
    """Two independently sampled chains applied to one record"""
    img = _to_tensor(x)
    return ViewPair(v=_chain(img, policy, rng_state), v_prime=_chain(img, policy, rng_state))


def single_view(x, policy: AugmentationPolicy, rng_state: torch.Generator) -> torch.Tensor:
    return _chain(_to_tensor(x), policy, rng_state)


def eval_view(x, normalization: Normalization) -> torch.Tensor:
    """Deterministic normalize-only view"""
    return _normalize(_to_tensor(x), normalization)


class ViewDataset(Dataset):
    """Torch dataset yielding augmented views of a LabeledDataset

    Each item's generator is seeded from (seed, epoch, index), so batches do
    not depend on the number of loader workers.

    mode: "two" -> (v, v', label, index); "single" -> (v, label, index);
          "eval" -> (v, label, index)
    """

    MODES = ("two", "single", "eval")

    def __init__(self, dataset: LabeledDataset, policy: AugmentationPolicy, mode: str = "two", seed: int = 0):
        if mode not in self.MODES:
            raise ValueError(f"mode must be one of {self.MODES}")
        self.dataset = dataset
        self.policy = policy
        self.mode = mode
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.dataset)

    def __getitem__(self, index: int):
        record = self.dataset[index]
        if self.mode == "eval":
            return eval_view(record, self.policy.normalization), record.label, index

        generator = make_generator(derive_seed(self.seed, self.epoch, index))
        if self.mode == "two":
            pair = two_view(record, self.policy, generator)
            return pair.v, pair.v_prime, record.label, index
        return single_view(record, self.policy, generator), record.label, index
