"""Pre-training loops: SimCLR / SimSiam base training and per-cluster experts"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Union

import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, PositiveFloat, PositiveInt
from torch.utils.data import DataLoader, Sampler

from app.augment import AugmentationPolicy, ViewDataset
from app.dataset import LabeledDataset
from app.errors import DivergenceError, EmptyDatasetError, EmptyPartitionError, IncompatibleBundleError
from app.models import ModelBundle, copy_bundle, encode, predict, project
from app.models.checkpoint import load_checkpoint, save_checkpoint
from app.objectives import interleave_views, nt_xent, simsiam_loss
from app.optim import CosineSchedule, OptimizerConfig, build_optimizer
from app.utils import derive_seed, make_generator, resolve_device, settings

logger = logging.getLogger(__name__)

Method = Literal["simclr", "simsiam"]


class TrainSchedule(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: PositiveInt
    batch_size: PositiveInt = 1024
    optimizer: OptimizerConfig = OptimizerConfig()
    method: Method = "simsiam"
    seed: int = 0
    temperature: PositiveFloat = 0.5
    lr_per_step: bool = False


@dataclass
class TrainResult:
    bundle: ModelBundle
    losses: List[float] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    resumed_from: int = 0


class EpochBatchSampler(Sampler):
    """Per-epoch shuffled index batches

    The shuffle seed is derived from (seed, epoch). The last incomplete batch
    is kept; with merge_singleton a trailing batch of one joins the previous
    batch (batch-norm cannot train on a single row).
    """

    def __init__(self, n: int, batch_size: int, seed: int, merge_singleton: bool = False, shuffle: bool = True):
        self.n = n
        self.batch_size = min(batch_size, n) if n else batch_size
        self.seed = seed
        self.merge_singleton = merge_singleton
        self.shuffle = shuffle
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def batches(self) -> List[List[int]]:
        if self.shuffle:
            order = torch.randperm(self.n, generator=make_generator(derive_seed(self.seed, "shuffle", self.epoch)))
        else:
            order = torch.arange(self.n)
        order = order.tolist()
        batches = [order[i:i + self.batch_size] for i in range(0, self.n, self.batch_size)]
        if self.merge_singleton and len(batches) > 1 and len(batches[-1]) == 1:
            batches[-2].extend(batches.pop())
        return batches

    def __iter__(self):
        return iter(self.batches())

    def __len__(self) -> int:
        return len(self.batches())


def make_loader(view_dataset: ViewDataset, sampler: EpochBatchSampler) -> DataLoader:
    # own generator: iterators otherwise draw their worker seed from the global RNG
    return DataLoader(
        view_dataset,
        batch_sampler=sampler,
        num_workers=settings.NUM_WORKERS,
        generator=make_generator(sampler.seed),
    )


def reset_log(path: Optional[Union[str, Path]]) -> None:
    """Start a fresh CSV log (a rerun stage must not inherit rows)"""
    if path is not None and Path(path).exists():
        Path(path).unlink()


def append_log(path: Optional[Union[str, Path]], row: Dict) -> None:
    """Append one row to a CSV log, writing the header on first use"""
    if path is None:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([row]).to_csv(path, mode="a", header=not path.exists(), index=False)


def optimizer_state_path(checkpoint_path: Union[str, Path]) -> Path:
    """Sidecar next to a snapshot: optimizer state, epoch and loss/lr traces"""
    return Path(f"{checkpoint_path}.optim")


def save_training_state(
    bundle: ModelBundle,
    optimizer: torch.optim.Optimizer,
    result: TrainResult,
    checkpoint_path: Union[str, Path],
) -> None:
    save_checkpoint(bundle, checkpoint_path)
    torch.save(
        {
            "optimizer": optimizer.state_dict(),
            "epoch": len(result.losses),
            "losses": result.losses,
            "lrs": result.lrs,
        },
        optimizer_state_path(checkpoint_path),
    )


def clear_training_state(checkpoint_path: Union[str, Path]) -> None:
    Path(checkpoint_path).unlink(missing_ok=True)
    optimizer_state_path(checkpoint_path).unlink(missing_ok=True)


def _restore(
    bundle: ModelBundle,
    optimizer: torch.optim.Optimizer,
    result: TrainResult,
    checkpoint_path: Path,
    log_path: Optional[Union[str, Path]],
    dev: torch.device,
) -> int:
    """Load a snapshot into bundle/optimizer in place; returns the epoch to continue from"""
    snapshot = load_checkpoint(checkpoint_path)
    state = torch.load(optimizer_state_path(checkpoint_path), map_location=dev)
    bundle.load_state_dict(snapshot.state_dict())
    bundle.step = snapshot.step
    bundle.metadata = snapshot.metadata
    optimizer.load_state_dict(state["optimizer"])
    result.losses = list(state["losses"])
    result.lrs = list(state["lrs"])
    start = int(state["epoch"])
    # the log keeps exactly the epochs the snapshot has seen
    reset_log(log_path)
    for epoch, (loss, lr) in enumerate(zip(result.losses, result.lrs)):
        append_log(log_path, {"epoch": epoch, "loss": loss, "lr": lr})
    return start


def check_compatible(method: str, bundle: ModelBundle) -> None:
    if method == "simsiam" and bundle.predictor is None:
        raise IncompatibleBundleError("simsiam needs a predictor head")
    if method not in ("simclr", "simsiam"):
        raise IncompatibleBundleError(f"unknown method: {method}")


def trainable_parameters(bundle: ModelBundle, method: str) -> List[torch.nn.Parameter]:
    params = list(bundle.backbone.parameters()) + list(bundle.projector.parameters())
    if method == "simsiam":
        params += list(bundle.predictor.parameters())
    # a bundle copied from a frozen teacher comes back trainable
    for param in params:
        param.requires_grad_(True)
    return params


def ssl_loss(bundle: ModelBundle, method: str, v1: torch.Tensor, v2: torch.Tensor, temperature: float = 0.5) -> torch.Tensor:
    """Both views go through one forward pass; the target branch is detached inside the loss"""
    z = project(bundle, encode(bundle, torch.cat([v1, v2])))
    z1, z2 = z.chunk(2)
    if method == "simclr":
        return nt_xent(interleave_views(z1, z2), temperature)
    p1, p2 = predict(bundle, z).chunk(2)
    return simsiam_loss(p1, p2, z1, z2)


def pretrain(
    method: str,
    dataset: LabeledDataset,
    bundle: ModelBundle,
    schedule: TrainSchedule,
    policy: Optional[AugmentationPolicy] = None,
    log_path: Optional[Union[str, Path]] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
    checkpoint_every: int = 0,
    device: Optional[str] = None,
    tag: str = "pretrain",
    resume: bool = False,
) -> TrainResult:
    """Train `bundle` in place for schedule.epochs epochs of two-view batches

    Returns the bundle with the per-epoch mean loss and learning-rate traces.
    Every `checkpoint_every` epochs the model, optimizer state and traces are
    snapshotted to checkpoint_path; with resume, an existing snapshot is
    loaded and training continues from its epoch, giving the same parameters
    as an uninterrupted run.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError(f"{tag}: dataset is empty")
    check_compatible(method, bundle)
    policy = policy or AugmentationPolicy()
    dev = resolve_device(device)
    bundle.to(dev)

    views = ViewDataset(dataset, policy, mode="two", seed=derive_seed(schedule.seed, tag, "views"))
    sampler = EpochBatchSampler(len(dataset), schedule.batch_size, derive_seed(schedule.seed, tag, "batches"))
    loader = make_loader(views, sampler)

    optimizer = build_optimizer(trainable_parameters(bundle, method), schedule.optimizer, schedule.batch_size)
    lr_schedule = CosineSchedule(optimizer, schedule.epochs, len(sampler), schedule.lr_per_step)
    result = TrainResult(bundle=bundle)
    start_epoch = 0
    if resume and checkpoint_path and optimizer_state_path(checkpoint_path).exists() and Path(checkpoint_path).exists():
        start_epoch = _restore(bundle, optimizer, result, Path(checkpoint_path), log_path, dev)
        result.resumed_from = start_epoch
        logger.info(f"▶️ [{tag}] resuming from snapshot at epoch {start_epoch}/{schedule.epochs}")
    else:
        reset_log(log_path)

    logger.info(
        f"[{tag}] {method}: {len(dataset)} records, {schedule.epochs} epochs × {len(sampler)} steps, "
        f"base lr {lr_schedule.base_lr:.4g}"
    )
    for epoch in range(start_epoch, schedule.epochs):
        bundle.train()
        views.set_epoch(epoch)
        sampler.set_epoch(epoch)
        epoch_lr = lr_schedule.apply(epoch)
        step_losses = []
        for step, (v1, v2, _, _) in enumerate(loader):
            if schedule.lr_per_step:
                lr_schedule.apply(epoch, step)
            loss = ssl_loss(bundle, method, v1.to(dev), v2.to(dev), schedule.temperature)
            if not torch.isfinite(loss):
                raise DivergenceError(f"[{tag}] non-finite loss at epoch {epoch} step {step}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            bundle.step += 1
            step_losses.append(loss.item())
            logger.debug(f"[{tag}] epoch {epoch} step {step} loss {step_losses[-1]:.5f}")

        epoch_loss = sum(step_losses) / len(step_losses)
        result.losses.append(epoch_loss)
        result.lrs.append(epoch_lr)
        bundle.metadata["epoch"] = bundle.metadata.get("epoch", 0) + 1
        append_log(log_path, {"epoch": epoch, "loss": epoch_loss, "lr": epoch_lr})
        logger.info(f"[{tag}] epoch {epoch + 1}/{schedule.epochs} loss {epoch_loss:.5f} lr {epoch_lr:.4g}")

        if checkpoint_path and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
            save_training_state(bundle, optimizer, result, checkpoint_path)

    if checkpoint_path and checkpoint_every:
        save_training_state(bundle, optimizer, result, checkpoint_path)
    elif checkpoint_path:
        save_checkpoint(bundle, checkpoint_path)
    return result


def train_experts(
    base: ModelBundle,
    partitions: Sequence[LabeledDataset],
    schedule: TrainSchedule,
    policy: Optional[AugmentationPolicy] = None,
    log_dir: Optional[Union[str, Path]] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    max_workers: int = 1,
    device: Optional[str] = None,
    resume: bool = False,
) -> List[TrainResult]:
    """Expert k = copy of base, pretrained on partition k

    With resume, an expert whose checkpoint already exists in checkpoint_dir
    is loaded instead of retrained (its loss trace comes back empty).
    """
    if not partitions:
        raise EmptyPartitionError("need at least one partition")
    for k, part in enumerate(partitions):
        if len(part) == 0:
            raise EmptyPartitionError(f"partition {k} is empty")

    def _train(k: int) -> TrainResult:
        checkpoint = Path(checkpoint_dir) / f"expert_{k}.ckpt" if checkpoint_dir else None
        if resume and checkpoint is not None and checkpoint.exists():
            logger.info(f"[expert {k}] checkpoint found, skipping training")
            return TrainResult(bundle=load_checkpoint(checkpoint))
        expert = copy_bundle(base)
        expert.metadata["expert"] = k
        return pretrain(
            schedule.method,
            partitions[k],
            expert,
            schedule.model_copy(update={"seed": derive_seed(schedule.seed, "expert", k)}),
            policy,
            log_path=Path(log_dir) / f"expert_{k}.csv" if log_dir else None,
            checkpoint_path=checkpoint,
            device=device,
            tag=f"expert {k}",
        )

    logger.info(f"Training {len(partitions)} experts: sizes {[len(p) for p in partitions]}")
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(_train, range(len(partitions))))
    return [_train(k) for k in range(len(partitions))]
