"""Multi-teacher distillation: fixed base teacher plus one routed expert teacher per sample

The student starts from the base teacher's parameters with K+1 fresh
regression heads (position 0 regresses the base teacher, position k the
expert of cluster k-1). Each step draws one single-view augmentation per
sample; student and both teachers see that same view.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Literal, Optional, Sequence, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict

from app.augment import AugmentationPolicy, ViewDataset
from app.dataset import LabeledDataset
from app.errors import AssignmentError, DegenerateInputError, DivergenceError, IncompatibleBundleError
from app.models import ModelBundle, attach_regression_heads, copy_bundle, encode, freeze, project, regress
from app.models.checkpoint import save_checkpoint
from app.objectives import distill_terms
from app.optim import CosineSchedule, build_optimizer
from app.trainer import EpochBatchSampler, TrainSchedule, append_log, make_loader, reset_log, train_experts
from app.utils import derive_seed, resolve_device

logger = logging.getLogger(__name__)


class DistillConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # q is the projector output by default; "backbone" regresses f(v) instead
    target: Literal["projector", "backbone"] = "projector"
    # False distills from the base teacher alone
    use_experts: bool = True


@dataclass
class DistillSetup:
    student: ModelBundle
    base_teacher: ModelBundle
    expert_teachers: List[ModelBundle]
    assignments: np.ndarray
    dataset: LabeledDataset
    schedule: TrainSchedule
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    config: DistillConfig = field(default_factory=DistillConfig)

    @property
    def num_experts(self) -> int:
        return len(self.expert_teachers)


@dataclass
class DistillBatch:
    """What one optimization step consumed; handed to the on_batch callback"""
    epoch: int
    step: int
    positions: torch.Tensor
    clusters: torch.Tensor
    head_indices: torch.Tensor
    views: torch.Tensor
    loss: float
    base_term: float
    expert_term: Optional[float]


@dataclass
class DistillResult:
    student: ModelBundle
    losses: List[float] = field(default_factory=list)
    base_terms: List[float] = field(default_factory=list)
    expert_terms: List[Optional[float]] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)


def _same_architecture(a: ModelBundle, b: ModelBundle) -> bool:
    return (
        a.config.backbone == b.config.backbone
        and a.config.heads.projector_hidden_dim == b.config.heads.projector_hidden_dim
        and a.config.heads.projector_batch_norm == b.config.heads.projector_batch_norm
        and a.config.image_size == b.config.image_size
    )


def build_setup(
    base_teacher: ModelBundle,
    expert_teachers: Sequence[ModelBundle],
    dataset: LabeledDataset,
    assignments: Sequence[int],
    schedule: TrainSchedule,
    policy: Optional[AugmentationPolicy] = None,
    config: Optional[DistillConfig] = None,
) -> DistillSetup:
    """Validate teachers and routing, freeze teachers, and create the student"""
    config = config or DistillConfig()
    experts = list(expert_teachers) if config.use_experts else []
    assignments = np.asarray(assignments, dtype=np.int64)

    if config.use_experts and not experts:
        raise IncompatibleBundleError("use_experts is set but no expert teachers were given")
    for k, expert in enumerate(experts):
        if not _same_architecture(base_teacher, expert):
            raise IncompatibleBundleError(f"expert {k} architecture differs from the base teacher")
    if len(assignments) != len(dataset):
        raise AssignmentError(f"{len(assignments)} assignments for {len(dataset)} records")
    if experts and assignments.size and (assignments.min() < 0 or assignments.max() >= len(experts)):
        raise AssignmentError(f"assignments must index one of {len(experts)} experts")

    student = copy_bundle(base_teacher)
    for param in student.parameters():
        param.requires_grad_(True)
    student.train()
    attach_regression_heads(student, len(experts) + 1, derive_seed(schedule.seed, "regression-heads"))
    student.step = 0
    student.metadata = {**base_teacher.metadata, "stage": "distill", "epoch": 0}

    freeze(base_teacher)
    for expert in experts:
        freeze(expert)

    return DistillSetup(
        student=student,
        base_teacher=base_teacher,
        expert_teachers=experts,
        assignments=assignments,
        dataset=dataset,
        schedule=schedule,
        policy=policy or AugmentationPolicy(),
        config=config,
    )


def _output(bundle: ModelBundle, views: torch.Tensor, target: str) -> torch.Tensor:
    features = encode(bundle, views)
    return project(bundle, features) if target == "projector" else features


def _student_parameters(setup: DistillSetup) -> List[torch.nn.Parameter]:
    student = setup.student
    params = list(student.backbone.parameters()) + list(student.regression_heads.parameters())
    if setup.config.target == "projector":
        params += list(student.projector.parameters())
    return params


def distill_step(setup: DistillSetup, views: torch.Tensor, clusters: torch.Tensor):
    """Loss terms for one batch; expert targets and heads are routed per sample"""
    target = setup.config.target
    student = setup.student

    q_s = _output(student, views, target)
    r_base = regress(student, "base", q_s)
    with torch.no_grad():
        q_base = _output(setup.base_teacher, views, target)

    if not setup.expert_teachers:
        return distill_terms(q_s, r_base, None, q_base, None)

    r_expert = torch.zeros_like(q_s)
    q_expert = torch.zeros_like(q_base)
    for k in torch.unique(clusters).tolist():
        rows = (clusters == k).nonzero(as_tuple=True)[0]
        with torch.no_grad():
            q_expert = q_expert.index_copy(0, rows, _output(setup.expert_teachers[k], views[rows], target))
        r_expert = r_expert.index_copy(0, rows, regress(student, k + 1, q_s[rows]))
    return distill_terms(q_s, r_base, r_expert, q_base, q_expert)


def distill(
    setup: DistillSetup,
    log_path: Optional[Union[str, Path]] = None,
    on_batch: Optional[Callable[[DistillBatch], None]] = None,
    checkpoint_path: Optional[Union[str, Path]] = None,
    device: Optional[str] = None,
) -> DistillResult:
    """Train the student for schedule.epochs epochs against the frozen teachers"""
    n = len(setup.dataset)
    if n < 2:
        raise DegenerateInputError("distillation needs at least two records")
    schedule = setup.schedule
    dev = resolve_device(device)
    student = setup.student.to(dev)
    setup.base_teacher.to(dev).eval()
    for expert in setup.expert_teachers:
        expert.to(dev).eval()
    assignments = torch.as_tensor(setup.assignments, dtype=torch.int64, device=dev)

    views = ViewDataset(setup.dataset, setup.policy, mode="single", seed=derive_seed(schedule.seed, "distill", "views"))
    sampler = EpochBatchSampler(n, schedule.batch_size, derive_seed(schedule.seed, "distill", "batches"), merge_singleton=True)
    loader = make_loader(views, sampler)
    optimizer = build_optimizer(_student_parameters(setup), schedule.optimizer, schedule.batch_size)
    lr_schedule = CosineSchedule(optimizer, schedule.epochs, len(sampler), schedule.lr_per_step)
    result = DistillResult(student=student)
    reset_log(log_path)

    logger.info(
        f"[distill] {n} records, K={setup.num_experts}, target={setup.config.target}, "
        f"{schedule.epochs} epochs × {len(sampler)} steps"
    )
    for epoch in range(schedule.epochs):
        student.train()
        views.set_epoch(epoch)
        sampler.set_epoch(epoch)
        epoch_lr = lr_schedule.apply(epoch)
        totals, bases, experts = [], [], []
        for step, (v, _, positions) in enumerate(loader):
            if schedule.lr_per_step:
                lr_schedule.apply(epoch, step)
            v = v.to(dev)
            positions = positions.to(dev)
            clusters = assignments[positions]
            loss, base_term, expert_term = distill_step(setup, v, clusters)
            if not torch.isfinite(loss):
                raise DivergenceError(f"[distill] non-finite loss at epoch {epoch} step {step}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            student.step += 1

            totals.append(loss.item())
            bases.append(base_term.item())
            experts.append(expert_term.item() if expert_term is not None else None)
            if on_batch is not None:
                on_batch(DistillBatch(
                    epoch=epoch,
                    step=step,
                    positions=positions.cpu(),
                    clusters=clusters.cpu(),
                    head_indices=(clusters + 1).cpu(),
                    views=v.detach().cpu(),
                    loss=totals[-1],
                    base_term=bases[-1],
                    expert_term=experts[-1],
                ))

        epoch_loss = float(np.mean(totals))
        epoch_base = float(np.mean(bases))
        epoch_expert = float(np.mean(experts)) if setup.expert_teachers else None
        result.losses.append(epoch_loss)
        result.base_terms.append(epoch_base)
        result.expert_terms.append(epoch_expert)
        result.lrs.append(epoch_lr)
        student.metadata["epoch"] = epoch + 1
        append_log(log_path, {
            "epoch": epoch,
            "loss": epoch_loss,
            "base_term": epoch_base,
            "expert_term": epoch_expert,
            "lr": epoch_lr,
        })
        logger.info(f"[distill] epoch {epoch + 1}/{schedule.epochs} loss {epoch_loss:.5f} lr {epoch_lr:.4g}")

    if checkpoint_path:
        save_checkpoint(student, checkpoint_path)
    return result


def distill_no_cluster(
    base_teacher: ModelBundle,
    dataset: LabeledDataset,
    expert_schedule: TrainSchedule,
    distill_schedule: TrainSchedule,
    policy: Optional[AugmentationPolicy] = None,
    log_dir: Optional[Union[str, Path]] = None,
    checkpoint_dir: Optional[Union[str, Path]] = None,
    device: Optional[str] = None,
) -> DistillResult:
    """The clustered pipeline with K=1: one expert on the whole dataset, then distillation"""
    expert = train_experts(
        base_teacher, [dataset], expert_schedule, policy,
        log_dir=log_dir, checkpoint_dir=checkpoint_dir, device=device,
    )[0].bundle
    setup = build_setup(
        base_teacher, [expert], dataset, np.zeros(len(dataset), dtype=np.int64), distill_schedule, policy
    )
    return distill(
        setup,
        log_path=Path(log_dir) / "distill.csv" if log_dir else None,
        checkpoint_path=Path(checkpoint_dir) / "student.ckpt" if checkpoint_dir else None,
        device=device,
    )
