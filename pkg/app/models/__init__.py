"""Network bundle: backbone f, projector g, predictor h, regression heads r, linear head"""
import copy
import logging
from typing import Any, Dict, Literal, Optional, Union

import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, PositiveInt, field_validator, model_validator

from app.errors import IncompatibleBundleError, InvalidConfigError, ShapeMismatchError, UnknownHeadError
from app.models.backbones import ResNetCifar, TinyConv, mlp
from app.utils import seeded

logger = logging.getLogger(__name__)

RESNET = "resnet-cifar-18-variant"
TINY = "tiny-conv"
FAMILY_ALIASES = {"resnet19": RESNET, "resnet18": RESNET}

HeadIndex = Union[int, Literal["base"]]


class BackboneConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    family: Literal["resnet-cifar-18-variant", "tiny-conv"] = RESNET
    output_dim: PositiveInt = 512
    stem_3x3_no_maxpool: bool = True

    @field_validator("family", mode="before")
    @classmethod
    def _alias(cls, v):
        return FAMILY_ALIASES.get(v, v)

    @model_validator(mode="after")
    def _dims(self):
        if self.family == RESNET and self.output_dim % 8:
            raise ValueError("resnet output_dim must be a multiple of 8")
        if not self.stem_3x3_no_maxpool:
            raise ValueError("only the 3×3 stem without max-pool is supported")
        return self


class HeadConfig(BaseModel):
    """MLP head sizes; None hidden sizes default to d (projector, regression) and d/4 (predictor)"""
    model_config = ConfigDict(extra="forbid")

    projector_hidden_dim: Optional[PositiveInt] = None
    projector_batch_norm: bool = True
    use_predictor: bool = True
    predictor_hidden_dim: Optional[PositiveInt] = None
    predictor_batch_norm: bool = True
    regression_hidden_dim: Optional[PositiveInt] = None
    regression_batch_norm: bool = False
    num_regression_heads: int = 0

    @field_validator("num_regression_heads")
    @classmethod
    def _heads(cls, v):
        if v < 0:
            raise ValueError("num_regression_heads must be >= 0")
        return v


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    backbone: BackboneConfig = BackboneConfig()
    heads: HeadConfig = HeadConfig()
    num_classes: PositiveInt = 10
    image_size: PositiveInt = 32


def build_backbone(cfg: BackboneConfig) -> nn.Module:
    if cfg.family == RESNET:
        return ResNetCifar(cfg.output_dim)
    if cfg.family == TINY:
        return TinyConv(cfg.output_dim)
    raise InvalidConfigError(f"unknown backbone family: {cfg.family}")


class ModelBundle(nn.Module):
    """All parameter sets of one model plus its config snapshot and step counter"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.backbone.output_dim
        heads = config.heads

        self.backbone = build_backbone(config.backbone)
        self.projector = mlp(d, heads.projector_hidden_dim or d, d, heads.projector_batch_norm)
        self.predictor = (
            mlp(d, heads.predictor_hidden_dim or max(d // 4, 1), d, heads.predictor_batch_norm)
            if heads.use_predictor else None
        )
        self.regression_heads = nn.ModuleList([
            mlp(d, heads.regression_hidden_dim or d, d, heads.regression_batch_norm)
            for _ in range(heads.num_regression_heads)
        ])
        self.classifier = nn.Linear(d, config.num_classes)

        self.step = 0
        self.metadata: Dict[str, Any] = {}

    @property
    def output_dim(self) -> int:
        return self.config.backbone.output_dim

    @property
    def num_experts(self) -> int:
        """K, the number of expert heads (r_1..r_K)"""
        return max(len(self.regression_heads) - 1, 0)


def init_bundle(
    backbone_cfg: BackboneConfig,
    head_cfg: HeadConfig,
    seed: int,
    num_classes: int = 10,
    image_size: int = 32,
) -> ModelBundle:
    """Deterministic initialization given seed; global RNG state untouched"""
    config = ModelConfig(
        backbone=backbone_cfg, heads=head_cfg, num_classes=num_classes, image_size=image_size
    )
    with seeded(seed):
        bundle = ModelBundle(config)
    bundle.metadata.update(seed=seed, epoch=0)
    logger.debug(f"Bundle initialized: {backbone_cfg.family} d={backbone_cfg.output_dim} seed={seed}")
    return bundle


def attach_regression_heads(bundle: ModelBundle, num_heads: int, seed: int) -> ModelBundle:
    """Replace the regression heads with `num_heads` freshly initialized ones (in place)"""
    d = bundle.output_dim
    heads_cfg = bundle.config.heads.model_copy(update={"num_regression_heads": num_heads})
    with seeded(seed):
        bundle.regression_heads = nn.ModuleList([
            mlp(d, heads_cfg.regression_hidden_dim or d, d, heads_cfg.regression_batch_norm)
            for _ in range(num_heads)
        ])
    bundle.config = bundle.config.model_copy(update={"heads": heads_cfg})
    device = next(bundle.backbone.parameters()).device
    bundle.regression_heads.to(device)
    return bundle


def copy_bundle(bundle: ModelBundle) -> ModelBundle:
    return copy.deepcopy(bundle)


def freeze(bundle: nn.Module) -> nn.Module:
    """Eval mode, no gradients"""
    bundle.eval()
    for param in bundle.parameters():
        param.requires_grad_(False)
    return bundle


def _check_width(x: torch.Tensor, width: int, what: str) -> None:
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeMismatchError(f"{what} expects B×{width}, got {tuple(x.shape)}")


def encode(bundle: ModelBundle, batch: torch.Tensor) -> torch.Tensor:
    """B×3×H×W -> B×d representation"""
    size = bundle.config.image_size
    if batch.ndim != 4 or tuple(batch.shape[1:]) != (3, size, size):
        raise ShapeMismatchError(f"encode expects B×3×{size}×{size}, got {tuple(batch.shape)}")
    return bundle.backbone(batch)


def project(bundle: ModelBundle, features: torch.Tensor) -> torch.Tensor:
    _check_width(features, bundle.output_dim, "project")
    return bundle.projector(features)


def predict(bundle: ModelBundle, projections: torch.Tensor) -> torch.Tensor:
    if bundle.predictor is None:
        raise IncompatibleBundleError("bundle has no predictor head")
    _check_width(projections, bundle.output_dim, "predict")
    return bundle.predictor(projections)


def head_position(bundle: ModelBundle, head_index: HeadIndex) -> int:
    """'base' -> 0, k in 1..K -> k"""
    if head_index == "base":
        position = 0
    elif isinstance(head_index, int) and not isinstance(head_index, bool) and 1 <= head_index <= bundle.num_experts:
        position = head_index
    else:
        raise UnknownHeadError(
            f"head {head_index!r} not in {{base, 1..{bundle.num_experts}}}"
        )
    if position >= len(bundle.regression_heads):
        raise UnknownHeadError("bundle has no regression heads")
    return position


def regress(bundle: ModelBundle, head_index: HeadIndex, projections: torch.Tensor) -> torch.Tensor:
    position = head_position(bundle, head_index)
    _check_width(projections, bundle.output_dim, "regress")
    return bundle.regression_heads[position](projections)


def classify(bundle: ModelBundle, features: torch.Tensor) -> torch.Tensor:
    _check_width(features, bundle.output_dim, "classify")
    return bundle.classifier(features)
