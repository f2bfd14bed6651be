"""Self-distillation objective with an EMA teacher.

Student and teacher each run the feature extractor's CLS token through a
projection head. The teacher sees global views only; its outputs are
centred and sharpened, and every (teacher global view, other student
view) pair contributes one cross-entropy term.

Single-image and cross-batch modes share the same formula. In
cross-batch mode the view set holds the views of two images of one
treatment from different batches, so the teacher's view of one image
supervises the student's views of the other.
"""

from __future__ import annotations

import copy
from collections.abc import Sequence
from dataclasses import dataclass

import structlog
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import CodaError
from .models import FeatureExtractor
from .views import ViewBatch, ViewSet

logger = structlog.get_logger()

__all__ = [
    "DistillConfig",
    "DistillState",
    "NoGlobalView",
    "ProjectionHead",
    "ShapeMismatch",
    "center_update",
    "distill_loss",
    "distill_loss_cross_batch",
    "ema_update",
    "pair_loss",
]


class ObjectiveError(CodaError):
    """Base class for objective errors."""


class NoGlobalView(ObjectiveError, ValueError):
    """Raised when a view set yields no (teacher, student) pair."""


class ShapeMismatch(ObjectiveError, ValueError):
    """Raised when teacher and student parameters do not line up."""


@dataclass(frozen=True)
class DistillConfig:
    teacher_temp: float = 0.04
    student_temp: float = 0.1
    ema_decay: float = 0.996
    center_momentum: float = 0.9

    def __post_init__(self) -> None:
        if not 0 < self.teacher_temp < self.student_temp:
            raise ValueError("teacher_temp: must be > 0 and below student_temp")
        if not 0 <= self.ema_decay <= 1:
            raise ValueError("ema_decay: must be in [0, 1]")
        if not 0 <= self.center_momentum <= 1:
            raise ValueError("center_momentum: must be in [0, 1]")


class ProjectionHead(nn.Module):
    """3-layer MLP, L2-normalised bottleneck, then a weight-normalised linear layer."""

    def __init__(
        self, in_dim: int, out_dim: int = 256, hidden_dim: int = 512, bottleneck_dim: int = 128
    ) -> None:
        super().__init__()
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, bottleneck_dim),
        )
        self.last_layer = nn.Linear(bottleneck_dim, out_dim, bias=False)
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        nn.init.trunc_normal_(self.last_layer.weight, std=0.02)

    @property
    def out_dim(self) -> int:
        return self.last_layer.out_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = F.normalize(self.mlp(x), dim=-1, p=2)
        return F.linear(z, F.normalize(self.last_layer.weight, dim=1, p=2))


class DistillState(nn.Module):
    """Student, EMA teacher and running center of one training run.

    The student backbone is the dual model's feature extractor itself
    (shared, not copied). The teacher is a deep copy taken at
    construction and never receives gradients.
    """

    def __init__(
        self,
        backbone: FeatureExtractor,
        head: ProjectionHead,
        config: DistillConfig | None = None,
    ) -> None:
        super().__init__()
        self.config = config or DistillConfig()
        self.student_backbone = backbone
        self.student_head = head
        self.teacher_backbone = copy.deepcopy(backbone).requires_grad_(False)
        self.teacher_head = copy.deepcopy(head).requires_grad_(False)
        self.register_buffer("center", torch.zeros(1, head.out_dim))

    def student(self, x: torch.Tensor) -> torch.Tensor:
        return self.student_head(self.student_backbone(x)[:, 0])

    @torch.no_grad()
    def teacher(self, x: torch.Tensor) -> torch.Tensor:
        return self.teacher_head(self.teacher_backbone(x)[:, 0])

    def student_parameters(self) -> list[nn.Parameter]:
        return list(self.student_backbone.parameters()) + list(self.student_head.parameters())

    def teacher_parameters(self) -> list[nn.Parameter]:
        return list(self.teacher_backbone.parameters()) + list(self.teacher_head.parameters())

    def reset_teacher(self) -> None:
        """Copy the student into the teacher (start of a phase)."""
        with torch.no_grad():
            for t, s in zip(self.teacher_parameters(), self.student_parameters(), strict=True):
                t.copy_(s)


def pair_loss(
    teacher_probs: Sequence[torch.Tensor],
    student_log_probs: Sequence[torch.Tensor],
    teacher_positions: Sequence[int],
) -> torch.Tensor:
    """Mean of ``H(p_t(v), p_s(u))`` over ordered pairs with ``u != v``.

    Args:
        teacher_probs: One ``(B, P)`` distribution per teacher view.
        student_log_probs: One ``(B, P)`` log-distribution per student view.
        teacher_positions: Index of each teacher view within the student views.

    Raises:
        NoGlobalView: No valid pair exists.
    """
    total = None
    n_terms = 0
    for p_t, v in zip(teacher_probs, teacher_positions, strict=True):
        for u, log_q in enumerate(student_log_probs):
            if u == v:
                continue
            term = torch.sum(-p_t * log_q, dim=-1).mean()
            total = term if total is None else total + term
            n_terms += 1
    if total is None:
        raise NoGlobalView(
            "no (teacher global view, student view) pairs; need >= 1 global and >= 2 views"
        )
    return total / n_terms


def _as_batch(views: ViewSet | ViewBatch) -> ViewBatch:
    if isinstance(views, ViewBatch):
        return views
    return ViewBatch(
        tuple(v.unsqueeze(0) for v in views.global_views),
        tuple(v.unsqueeze(0) for v in views.local_views),
        (views.provenance,),
    )


def distill_loss(
    state: DistillState,
    views: ViewSet | ViewBatch,
    *,
    return_teacher: bool = False,
) -> torch.Tensor | tuple[torch.Tensor, torch.Tensor]:
    """Self-distillation loss over one ViewSet or a collated batch.

    Args:
        state: Student, teacher and center.
        views: Global views first; the teacher consumes only those.
        return_teacher: Also return the raw teacher outputs ``(G * B, P)``
            for :func:`center_update`.

    Raises:
        NoGlobalView: No global view, or fewer than two views in total.
    """
    batch = _as_batch(views)
    if not batch.global_views or len(batch) < 2:
        raise NoGlobalView(
            f"need >= 1 global view and >= 2 views, got {len(batch.global_views)} global "
            f"of {len(batch)}"
        )
    cfg = state.config
    dtype = state.center.dtype
    device = state.center.device
    with torch.no_grad():
        teacher_out = [state.teacher(v.to(device=device, dtype=dtype)) for v in batch.global_views]
        teacher_probs = [F.softmax((t - state.center) / cfg.teacher_temp, dim=-1) for t in teacher_out]
    student_log_probs = [
        F.log_softmax(state.student(v.to(device=device, dtype=dtype)) / cfg.student_temp, dim=-1)
        for v in batch.views
    ]
    loss = pair_loss(teacher_probs, student_log_probs, range(len(batch.global_views)))
    if return_teacher:
        return loss, torch.cat(teacher_out, dim=0)
    return loss


def distill_loss_cross_batch(
    state: DistillState,
    views: ViewSet | ViewBatch,
    *,
    return_teacher: bool = False,
) -> torch.Tensor | tuple[torch.Tensor, torch.Tensor]:
    """:func:`distill_loss` over the combined views of a cross-batch pair.

    Raises:
        NoGlobalView: The view set has no usable pair.
        ValueError: The view set does not come from a pair (two provenance ids,
            an even number of global and local views).
    """
    batch = _as_batch(views)
    if len(batch.global_views) % 2 or len(batch.local_views) % 2:
        raise ValueError("cross-batch view sets hold the same number of views per pair member")
    if any(len(p) != 2 for p in batch.provenance):
        raise ValueError("cross-batch view sets must name exactly two source records")
    return distill_loss(state, batch, return_teacher=return_teacher)


@torch.no_grad()
def ema_update(state: DistillState, decay: float | None = None) -> None:
    """``teacher <- decay * teacher + (1 - decay) * student``, element-wise.

    Raises:
        ShapeMismatch: Teacher and student parameter lists differ in length or shape.
    """
    decay = state.config.ema_decay if decay is None else decay
    teacher = state.teacher_parameters()
    student = state.student_parameters()
    if len(teacher) != len(student):
        raise ShapeMismatch(f"teacher has {len(teacher)} tensors, student {len(student)}")
    for t, s in zip(teacher, student, strict=True):
        if t.shape != s.shape:
            raise ShapeMismatch(f"teacher shape {tuple(t.shape)} != student {tuple(s.shape)}")
        t.mul_(decay).add_(s.detach(), alpha=1 - decay)


@torch.no_grad()
def center_update(
    state: DistillState, teacher_output: torch.Tensor, momentum: float | None = None
) -> None:
    """``c <- m * c + (1 - m) * mean(teacher_output)``."""
    momentum = state.config.center_momentum if momentum is None else momentum
    batch_center = teacher_output.mean(dim=0, keepdim=True)
    state.center.mul_(momentum).add_(batch_center, alpha=1 - momentum)
