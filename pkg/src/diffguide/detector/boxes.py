"""Box geometry: (x1, y1, x2, y2) pixel boxes, delta coding, IoU, NMS."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torchvision.ops import batched_nms, nms

BBOX_CLAMP = float(np.log(1000.0 / 16))


@dataclass
class BoxList:
    boxes: torch.Tensor  # [N, 4]
    labels: torch.Tensor | None = None  # [N] int64
    scores: torch.Tensor | None = None  # [N]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def __getitem__(self, idx) -> "BoxList":
        return BoxList(
            self.boxes[idx],
            None if self.labels is None else self.labels[idx],
            None if self.scores is None else self.scores[idx],
        )

    def clip(self, image_size: tuple[int, int]) -> "BoxList":
        h, w = image_size
        b = self.boxes.clone()
        b[:, 0::2] = b[:, 0::2].clamp(0, w)
        b[:, 1::2] = b[:, 1::2].clamp(0, h)
        return BoxList(b, self.labels, self.scores)

    @staticmethod
    def empty(dtype=torch.float32) -> "BoxList":
        return BoxList(torch.zeros((0, 4), dtype=dtype), torch.zeros((0,), dtype=torch.long))


def _as_tensor(b) -> torch.Tensor:
    if isinstance(b, BoxList):
        return b.boxes
    return torch.as_tensor(b)


def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[:, 2] - boxes[:, 0]).clamp(min=0) * (boxes[:, 3] - boxes[:, 1]).clamp(min=0)


def encode_boxes(gt, anchors) -> torch.Tensor:
    """Deltas ``(dx/w_a, dy/h_a, log(w_g/w_a), log(h_g/h_a))`` of gt relative to anchors."""
    g, a = _as_tensor(gt), _as_tensor(anchors)
    if g.shape != a.shape:
        raise ValueError(f"count mismatch: {tuple(g.shape)} vs {tuple(a.shape)}")
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    if bool(((aw <= 0) | (ah <= 0)).any()):
        raise ValueError("degenerate anchor with non-positive width or height")
    gw, gh = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
    if bool(((gw <= 0) | (gh <= 0)).any()):
        raise ValueError("degenerate target box with non-positive width or height")
    acx, acy = a[:, 0] + 0.5 * aw, a[:, 1] + 0.5 * ah
    gcx, gcy = g[:, 0] + 0.5 * gw, g[:, 1] + 0.5 * gh
    return torch.stack(
        [(gcx - acx) / aw, (gcy - acy) / ah, torch.log(gw / aw), torch.log(gh / ah)], dim=1
    )


def decode_boxes(deltas: torch.Tensor, anchors) -> torch.Tensor:
    a = _as_tensor(anchors)
    if deltas.shape[0] != a.shape[0]:
        raise ValueError("count mismatch between deltas and anchors")
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    if bool(((aw <= 0) | (ah <= 0)).any()):
        raise ValueError("degenerate anchor with non-positive width or height")
    acx, acy = a[:, 0] + 0.5 * aw, a[:, 1] + 0.5 * ah
    dw = deltas[:, 2].clamp(max=BBOX_CLAMP)
    dh = deltas[:, 3].clamp(max=BBOX_CLAMP)
    cx = acx + deltas[:, 0] * aw
    cy = acy + deltas[:, 1] * ah
    w, h = aw * torch.exp(dw), ah * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def iou_matrix(a, b) -> torch.Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return torch.zeros((a.shape[0], b.shape[0]), dtype=a.dtype)
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def iou_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same as :func:`iou_matrix` on float64 numpy arrays (used by the metrics)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area = lambda x: np.clip(x[:, 2] - x[:, 0], 0, None) * np.clip(x[:, 3] - x[:, 1], 0, None)
    union = area(a)[:, None] + area(b)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


__all__ = [
    "BoxList",
    "box_area",
    "encode_boxes",
    "decode_boxes",
    "iou_matrix",
    "iou_numpy",
    "nms",
    "batched_nms",
]
