"""Training objectives: NT-Xent, SimSiam negative cosine, two-teacher regression"""
import logging
from typing import Optional, Tuple

import torch
import torch.nn.functional as F

from app.errors import DegenerateInputError, ShapeMismatchError

logger = logging.getLogger(__name__)


def stop_gradient(tensor: torch.Tensor) -> torch.Tensor:
    """Same values, no gradient flow"""
    return tensor.detach()


def _unit_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = torch.linalg.vector_norm(x, dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise DegenerateInputError(f"{what} has a zero-norm row")
    return x / norms


def nt_xent(projections: torch.Tensor, temperature: float = 0.5) -> torch.Tensor:
    """Normalized-temperature cross entropy

    Rows 2i and 2i+1 are the positive pair of sample i. Each anchor's own
    similarity is excluded from its denominator; the positive stays in.
    """
    if projections.ndim != 2 or projections.shape[0] < 2 or projections.shape[0] % 2:
        raise ShapeMismatchError(f"nt_xent expects 2B×d with B >= 1, got {tuple(projections.shape)}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")

    z = _unit_rows(projections, "projections")
    n = z.shape[0]
    logits = (z @ z.T) / temperature
    self_mask = torch.eye(n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(self_mask, float("-inf"))
    positives = torch.arange(n, device=z.device) ^ 1
    return F.cross_entropy(logits, positives)


def interleave_views(z1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    """[z1_0, z2_0, z1_1, z2_1, ...] so rows 2i, 2i+1 are positives"""
    return torch.stack([z1, z2], dim=1).reshape(-1, z1.shape[1])


def negative_cosine(p: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """mean_B(−cos(p, sg(z)))"""
    z = stop_gradient(z)
    return -(_unit_rows(p, "predictions") * _unit_rows(z, "targets")).sum(dim=1).mean()


def simsiam_loss(p1: torch.Tensor, p2: torch.Tensor, z1: torch.Tensor, z2: torch.Tensor) -> torch.Tensor:
    """½·mean(−cos(p1, sg(z2))) + ½·mean(−cos(p2, sg(z1)))"""
    if not (p1.shape == p2.shape == z1.shape == z2.shape) or p1.ndim != 2:
        raise ShapeMismatchError(
            f"simsiam_loss expects equal B×d shapes, got {[tuple(t.shape) for t in (p1, p2, z1, z2)]}"
        )
    return negative_cosine(p1, z2) / 2 + negative_cosine(p2, z1) / 2


def distill_terms(
    q_s: torch.Tensor,
    r_base: torch.Tensor,
    r_expert: Optional[torch.Tensor],
    q_base: torch.Tensor,
    q_expert: Optional[torch.Tensor],
) -> Tuple[torch.Tensor, torch.Tensor, Optional[torch.Tensor]]:
    """(total, base MSE, expert MSE)

    total = ½·MSE(r_base(q_s), q_base) + ½·MSE(r_k(q_s), q_expert); with no
    expert term the base MSE carries full weight. Targets are detached.
    """
    shapes = [t.shape for t in (q_s, r_base, q_base)]
    if r_expert is not None or q_expert is not None:
        if r_expert is None or q_expert is None:
            raise ShapeMismatchError("expert head output and expert target must be given together")
        shapes += [r_expert.shape, q_expert.shape]
    if len(set(shapes)) != 1 or q_s.ndim != 2:
        raise ShapeMismatchError(f"distill_loss expects equal B×d shapes, got {[tuple(s) for s in shapes]}")

    base_term = F.mse_loss(r_base, stop_gradient(q_base))
    if r_expert is None:
        return base_term, base_term, None
    expert_term = F.mse_loss(r_expert, stop_gradient(q_expert))
    return base_term / 2 + expert_term / 2, base_term, expert_term


def distill_loss(
    q_s: torch.Tensor,
    r_base: torch.Tensor,
    r_expert: Optional[torch.Tensor],
    q_base: torch.Tensor,
    q_expert: Optional[torch.Tensor],
) -> torch.Tensor:
    return distill_terms(q_s, r_base, r_expert, q_base, q_expert)[0]
