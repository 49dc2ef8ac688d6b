"""Linear evaluation: frozen backbone, fresh linear head, top-1 accuracy"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, PositiveFloat, PositiveInt, field_validator

from app.augment import AugmentationPolicy, Normalization, ViewDataset
from app.cluster import extract_features
from app.dataset import LabeledDataset
from app.errors import EmptyDatasetError, LabelError
from app.models import ModelBundle, encode
from app.optim import SGD, CosineSchedule
from app.trainer import EpochBatchSampler, append_log, make_loader, reset_log
from app.utils import derive_seed, resolve_device, seeded

logger = logging.getLogger(__name__)


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: PositiveInt = 100
    batch_size: PositiveInt = 256
    # used as-is, no batch scaling
    lr: PositiveFloat = 30.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    augment_train: bool = True
    seed: int = 0

    @field_validator("momentum")
    @classmethod
    def _momentum(cls, v):
        if not 0 <= v < 1:
            raise ValueError("momentum must lie in [0, 1)")
        return v


@dataclass
class EvalResult:
    accuracy: float
    head: nn.Linear
    losses: List[float] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)


def top1_accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    """Percent of rows whose argmax equals the label (first maximum wins ties)"""
    if len(labels) == 0:
        return 0.0
    predictions = logits.argmax(dim=1)
    return 100.0 * (predictions == labels.to(predictions.device)).sum().item() / len(labels)


def _fresh_head(dim: int, num_classes: int, seed: int) -> nn.Linear:
    with seeded(seed):
        return nn.Linear(dim, num_classes)


def _check_labels(dataset: LabeledDataset, num_classes: int, what: str) -> None:
    labels = dataset.labels
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"{what} labels must lie in [0, {num_classes})")


def train_linear_head(
    features: torch.Tensor,
    labels: torch.Tensor,
    num_classes: int,
    cfg: EvalConfig,
    log_path: Optional[Union[str, Path]] = None,
) -> EvalResult:
    """Fit a linear classifier on fixed features; accuracy is the training accuracy"""
    if len(features) == 0:
        raise EmptyDatasetError("no features to train on")
    labels = labels.to(torch.int64)
    if labels.min() < 0 or labels.max() >= num_classes:
        raise LabelError(f"labels must lie in [0, {num_classes})")

    head = _fresh_head(features.shape[1], num_classes, derive_seed(cfg.seed, "linear-head")).to(features.device)
    optimizer = SGD(head.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sampler = EpochBatchSampler(len(features), cfg.batch_size, derive_seed(cfg.seed, "linear-batches"))
    schedule = CosineSchedule(optimizer, cfg.epochs, len(sampler))
    result = EvalResult(accuracy=0.0, head=head)
    reset_log(log_path)

    for epoch in range(cfg.epochs):
        sampler.set_epoch(epoch)
        lr = schedule.apply(epoch)
        epoch_losses = []
        for batch in sampler:
            rows = torch.as_tensor(batch, device=features.device)
            loss = F.cross_entropy(head(features[rows]), labels[rows])
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss.item())
        result.losses.append(sum(epoch_losses) / len(epoch_losses))
        result.lrs.append(lr)
        append_log(log_path, {"epoch": epoch, "loss": result.losses[-1], "lr": lr})

    with torch.no_grad():
        result.accuracy = top1_accuracy(head(features), labels)
    return result


def _train_augmented(
    bundle: ModelBundle,
    train_ds: LabeledDataset,
    cfg: EvalConfig,
    policy: AugmentationPolicy,
    dev: torch.device,
    log_path,
) -> EvalResult:
    head = _fresh_head(bundle.output_dim, train_ds.num_classes, derive_seed(cfg.seed, "linear-head")).to(dev)
    optimizer = SGD(head.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    views = ViewDataset(train_ds, policy, mode="single", seed=derive_seed(cfg.seed, "linear-views"))
    sampler = EpochBatchSampler(len(train_ds), cfg.batch_size, derive_seed(cfg.seed, "linear-batches"))
    loader = make_loader(views, sampler)
    schedule = CosineSchedule(optimizer, cfg.epochs, len(sampler))
    result = EvalResult(accuracy=0.0, head=head)
    reset_log(log_path)

    for epoch in range(cfg.epochs):
        views.set_epoch(epoch)
        sampler.set_epoch(epoch)
        lr = schedule.apply(epoch)
        epoch_losses = []
        for v, labels, _ in loader:
            with torch.no_grad():
                features = encode(bundle, v.to(dev))
            loss = F.cross_entropy(head(features), labels.to(dev))
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss.item())
        result.losses.append(sum(epoch_losses) / len(epoch_losses))
        result.lrs.append(lr)
        append_log(log_path, {"epoch": epoch, "loss": result.losses[-1], "lr": lr})
        logger.debug(f"[lineval] epoch {epoch + 1}/{cfg.epochs} loss {result.losses[-1]:.5f}")
    return result


def linear_eval(
    bundle: ModelBundle,
    train_ds: LabeledDataset,
    test_ds: LabeledDataset,
    cfg: Optional[EvalConfig] = None,
    normalization: Optional[Normalization] = None,
    log_path: Optional[Union[str, Path]] = None,
    device: Optional[str] = None,
) -> EvalResult:
    """Top-1 test accuracy (percent) of a linear head trained on frozen features

    The trained head is installed as the bundle's classifier; backbone
    parameters and batch-norm statistics are left untouched.
    """
    cfg = cfg or EvalConfig()
    if len(train_ds) == 0:
        raise EmptyDatasetError("linear evaluation needs a non-empty training set")
    num_classes = train_ds.num_classes
    _check_labels(train_ds, num_classes, "train")
    _check_labels(test_ds, num_classes, "test")
    normalization = normalization or Normalization()
    dev = resolve_device(device)

    was_training = bundle.training
    grad_flags = [p.requires_grad for p in bundle.backbone.parameters()]
    bundle.to(dev).eval()
    for param in bundle.backbone.parameters():
        param.requires_grad_(False)

    try:
        if cfg.augment_train:
            policy = AugmentationPolicy.linear_eval(normalization)
            result = _train_augmented(bundle, train_ds, cfg, policy, dev, log_path)
        else:
            train_features = torch.from_numpy(extract_features(bundle, train_ds, normalization, device=str(dev)).values).float()
            result = train_linear_head(
                train_features.to(dev), torch.from_numpy(train_ds.labels).to(dev), num_classes, cfg, log_path
            )

        if len(test_ds):
            test_features = torch.from_numpy(extract_features(bundle, test_ds, normalization, device=str(dev)).values).float()
            with torch.no_grad():
                logits = result.head(test_features.to(dev))
            result.accuracy = top1_accuracy(logits, torch.from_numpy(test_ds.labels))
        else:
            result.accuracy = 0.0
    finally:
        for param, flag in zip(bundle.backbone.parameters(), grad_flags):
            param.requires_grad_(flag)
        bundle.train(was_training)

    if bundle.classifier.out_features == num_classes:
        bundle.classifier.load_state_dict(result.head.state_dict())
    logger.info(f"[lineval] top-1 accuracy {result.accuracy:.2f}% ({len(test_ds)} test records)")
    return result
