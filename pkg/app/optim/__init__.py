"""SGD with momentum, LARS, and the cosine learning-rate schedule

The update rules live in sgd_step / lars_step (functional, in place) and the
torch Optimizer classes below only route parameter groups through them.
"""
import logging
import math
from dataclasses import dataclass
from typing import Iterable, Literal, Optional, Sequence

import torch
from pydantic import BaseModel, ConfigDict, PositiveFloat, field_validator
from torch.optim.optimizer import Optimizer

from app.errors import ShapeMismatchError

logger = logging.getLogger(__name__)

REFERENCE_BATCH = 256


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["lars", "sgd"] = "sgd"
    base_lr: PositiveFloat = 0.03
    weight_decay: float = 1e-5
    momentum: float = 0.9
    trust_coefficient: PositiveFloat = 0.001
    lr_scaling: Literal["linear-by-batch", "none"] = "linear-by-batch"

    @field_validator("weight_decay")
    @classmethod
    def _wd(cls, v):
        if v < 0:
            raise ValueError("weight_decay must be >= 0")
        return v

    @field_validator("momentum")
    @classmethod
    def _momentum(cls, v):
        if not 0 <= v < 1:
            raise ValueError("momentum must lie in [0, 1)")
        return v


@dataclass
class ScheduleState:
    current_step: int
    total_steps: int
    base_lr: float

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError("total_steps must be > 0")
        if not 0 <= self.current_step <= self.total_steps:
            raise ValueError("current_step must lie in [0, total_steps]")


def cosine_lr(state: ScheduleState) -> float:
    """base_lr · ½·(1 + cos(π·step/total))"""
    return state.base_lr * 0.5 * (1.0 + math.cos(math.pi * state.current_step / state.total_steps))


def scaled_lr(base_lr: float, batch_size: int, rule: str = "linear-by-batch") -> float:
    """base_lr·batch/256 under linear-by-batch scaling"""
    if rule == "linear-by-batch":
        return base_lr * batch_size / REFERENCE_BATCH
    return base_lr


def _check_shapes(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], buffers: Sequence[torch.Tensor]):
    if not (len(params) == len(grads) == len(buffers)):
        raise ShapeMismatchError("params, grads and buffers differ in length")
    for p, g, b in zip(params, grads, buffers):
        if p.shape != g.shape or p.shape != b.shape:
            raise ShapeMismatchError(f"shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}, buffer {tuple(b.shape)}")


@torch.no_grad()
def sgd_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    lr: float,
    momentum: float,
    weight_decay: float,
    buffers: Sequence[torch.Tensor],
) -> None:
    """buffer ← momentum·buffer + (grad + wd·param); param ← param − lr·buffer"""
    _check_shapes(params, grads, buffers)
    for p, g, buf in zip(params, grads, buffers):
        buf.mul_(momentum).add_(g + weight_decay * p)
        p.sub_(lr * buf)


@torch.no_grad()
def trust_ratio(param: torch.Tensor, grad: torch.Tensor, weight_decay: float, trust_coefficient: float) -> float:
    """η·‖w‖ / (‖g‖ + wd·‖w‖), 0 when ‖w‖ = 0 or the denominator is 0"""
    w_norm = torch.linalg.vector_norm(param).item()
    g_norm = torch.linalg.vector_norm(grad).item()
    denominator = g_norm + weight_decay * w_norm
    if w_norm == 0 or denominator == 0:
        return 0.0
    return trust_coefficient * w_norm / denominator


@torch.no_grad()
def lars_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    lr: float,
    momentum: float,
    weight_decay: float,
    trust_coefficient: float,
    exclusions: Sequence[bool],
    buffers: Sequence[torch.Tensor],
) -> None:
    """Layer-wise adaptive SGD

    Non-excluded layers: d = local_lr·(grad + wd·param), then the SGD momentum
    recurrence with lr. Excluded layers (biases, normalization) use plain SGD
    with wd = 0.
    """
    _check_shapes(params, grads, buffers)
    if len(exclusions) != len(params):
        raise ShapeMismatchError("exclusions must flag every parameter")
    for p, g, buf, excluded in zip(params, grads, buffers, exclusions):
        if excluded:
            buf.mul_(momentum).add_(g)
        else:
            local_lr = trust_ratio(p, g, weight_decay, trust_coefficient)
            buf.mul_(momentum).add_(local_lr * (g + weight_decay * p))
        p.sub_(lr * buf)


def is_lars_excluded(param: torch.Tensor) -> bool:
    """Biases and normalization gains/shifts are the ≤1-D tensors"""
    return param.ndim <= 1


class SGD(Optimizer):
    """SGD with momentum and coupled weight decay"""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params, dict(lr=lr, momentum=momentum, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        for group in self.param_groups:
            params = [p for p in group["params"] if p.grad is not None]
            if not params:
                continue
            sgd_step(
                params,
                [p.grad for p in params],
                group["lr"],
                group["momentum"],
                group["weight_decay"],
                [self._buffer(p) for p in params],
            )
        return loss

    def _buffer(self, p: torch.Tensor) -> torch.Tensor:
        state = self.state[p]
        if "momentum_buffer" not in state:
            state["momentum_buffer"] = torch.zeros_like(p)
        return state["momentum_buffer"]


class LARS(SGD):
    """LARS; ≤1-D tensors skip trust-ratio adaptation and weight decay"""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 trust_coefficient: float = 0.001):
        Optimizer.__init__(self, params, dict(
            lr=lr, momentum=momentum, weight_decay=weight_decay, trust_coefficient=trust_coefficient
        ))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        for group in self.param_groups:
            params = [p for p in group["params"] if p.grad is not None]
            if not params:
                continue
            lars_step(
                params,
                [p.grad for p in params],
                group["lr"],
                group["momentum"],
                group["weight_decay"],
                group["trust_coefficient"],
                [is_lars_excluded(p) for p in params],
                [self._buffer(p) for p in params],
            )
        return loss


def build_optimizer(params: Iterable[torch.Tensor], cfg: OptimizerConfig, batch_size: int) -> Optimizer:
    """Optimizer at the (batch-scaled) base learning rate"""
    lr = scaled_lr(cfg.base_lr, batch_size, cfg.lr_scaling)
    params = list(params)
    if cfg.kind == "lars":
        return LARS(params, lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                    trust_coefficient=cfg.trust_coefficient)
    return SGD(params, lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def set_lr(optimizer: Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


class CosineSchedule:
    """Cosine decay over epochs (default) or over steps"""

    def __init__(self, optimizer: Optimizer, epochs: int, steps_per_epoch: int, per_step: bool = False):
        self.optimizer = optimizer
        self.base_lr = optimizer.param_groups[0]["lr"]
        self.per_step = per_step
        self.total = epochs * steps_per_epoch if per_step else epochs
        self.steps_per_epoch = steps_per_epoch

    def lr_at(self, epoch: int, step_in_epoch: int = 0) -> float:
        current = epoch * self.steps_per_epoch + step_in_epoch if self.per_step else epoch
        return cosine_lr(ScheduleState(current, self.total, self.base_lr))

    def apply(self, epoch: int, step_in_epoch: int = 0) -> float:
        lr = self.lr_at(epoch, step_in_epoch)
        set_lr(self.optimizer, lr)
        return lr
