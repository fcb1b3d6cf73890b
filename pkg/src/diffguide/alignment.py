"""Feature-level and object-level knowledge transfer from a frozen teacher detector."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import torch
from torch.nn import functional as F

from .detector.boxes import BoxList
from .detector.model import HeadOutputs, TwoStageDetector, detection_loss
from .fusion import ConfigurationError

NORM_EPS = 1e-12


def normalize_feature_map(m: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Standardize each channel over its spatial extent (per sample if batched).

    Channels that are exactly constant map to zeros.
    """
    flat = m.flatten(-2)
    mean = flat.mean(dim=-1, keepdim=True)
    centered = flat - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    out = centered / torch.sqrt(var + eps)
    const = flat.amax(dim=-1, keepdim=True) == flat.amin(dim=-1, keepdim=True)
    out = torch.where(const, torch.zeros_like(out), out)
    return out.reshape(m.shape)


def feature_align_loss(student: Sequence[torch.Tensor], teacher: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum over levels of the mean squared difference of standardized features.

    The per-level mean divides by the element count of that level. The teacher
    side is detached.
    """
    if len(student) != len(teacher):
        raise ValueError(f"{len(student)} student levels vs {len(teacher)} teacher levels")
    total = student[0].new_zeros(())
    for s, t in zip(student, teacher):
        if s.shape != t.shape:
            raise ValueError(f"level shape mismatch {tuple(s.shape)} vs {tuple(t.shape)}")
        d = normalize_feature_map(s) - normalize_feature_map(t.detach())
        total = total + (d * d).mean()
    return total


def cross_feature_loss(teacher_pyramid, student: TwoStageDetector, gt, generator: torch.Generator,
                       image_size) -> torch.Tensor:
    """Student RPN + RoI losses evaluated on the teacher's (detached) neck features."""
    feats = [f.detach() for f in teacher_pyramid]
    if feats[0].shape[-3] != student.cfg.fpn_channels:
        raise ConfigurationError(
            f"teacher neck has {feats[0].shape[-3]} channels, student heads expect "
            f"{student.cfg.fpn_channels}"
        )
    return detection_loss(feats, gt, student, generator, image_size)["l_det"]


def shared_roi_predictions(proposals: Sequence[BoxList] | BoxList, teacher_pyr, student_pyr,
                           teacher: TwoStageDetector) -> tuple[HeadOutputs, HeadOutputs]:
    """Push teacher- and student-pooled features through the teacher's heads.

    The same proposals are pooled from both pyramids. ``P`` (teacher features)
    carries no gradient; ``Q`` (student features) back-propagates into the
    student pyramid through the frozen teacher head.
    """
    if isinstance(proposals, BoxList):
        proposals = [proposals]
    proposals = [BoxList(p.boxes.detach()) for p in proposals]
    with torch.no_grad():
        p_out = teacher.roi_head(teacher.pool([f.detach() for f in teacher_pyr], proposals))
    q_out = teacher.roi_head(teacher.pool(student_pyr, proposals))
    return p_out, q_out


def kd_cls_loss(q_cat: torch.Tensor, p_cat: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """``tau**2 * mean_i KL(softmax(Q_i/tau) || softmax(P_i/tau))``; P is detached.

    The student distribution is the first KL argument.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if q_cat.shape != p_cat.shape:
        raise ValueError(f"shape mismatch {tuple(q_cat.shape)} vs {tuple(p_cat.shape)}")
    if q_cat.shape[0] == 0:
        return q_cat.sum() * 0.0
    log_q = F.log_softmax(q_cat / tau, dim=1)
    log_p = F.log_softmax(p_cat.detach() / tau, dim=1)
    kl = (log_q.exp() * (log_q - log_p)).sum(dim=1)
    return tau**2 * kl.mean()


def kd_reg_loss(q_bbox: torch.Tensor, p_bbox: torch.Tensor) -> torch.Tensor:
    if q_bbox.shape != p_bbox.shape:
        raise ValueError(f"shape mismatch {tuple(q_bbox.shape)} vs {tuple(p_bbox.shape)}")
    if q_bbox.shape[0] == 0:
        return q_bbox.sum() * 0.0
    return (q_bbox - p_bbox.detach()).abs().sum(dim=1).mean()


@dataclass
class LossReport:
    l_det: float
    l_align: float
    l_cross: float
    l_cls: float
    l_reg: float
    lambda_feature: float
    lambda_object: float
    total: float

    def record(self, iteration: int) -> dict:
        rec = {"iteration": iteration}
        for f in fields(self):
            v = getattr(self, f.name)
            rec[f.name] = float(v.detach()) if torch.is_tensor(v) else float(v)
        return rec


def total_loss(parts: dict, lambda_feature: float = 0.5, lambda_object: float = 1.0) -> LossReport:
    """Compose the joint objective. ``parts`` values may be floats or 0-d tensors;
    the returned report keeps whatever type was given, so ``report.total`` can be
    back-propagated when the parts are tensors.
    """
    if lambda_feature < 0 or lambda_object < 0:
        raise ValueError("loss weights must be non-negative")
    p = {k: parts.get(k, 0.0) for k in ("l_det", "l_align", "l_cross", "l_cls", "l_reg")}
    total = (p["l_det"] + lambda_feature * (p["l_align"] + p["l_cross"])
             + lambda_object * (p["l_cls"] + p["l_reg"]))
    return LossReport(**p, lambda_feature=lambda_feature, lambda_object=lambda_object, total=total)
