"""Minimal two-stage detector: backbone -> FPN -> RPN -> RoI head.

The same class hosts the student (trainable conv backbone) and the diffusion
teacher (:class:`~diffguide.fusion.DiffusionBackbone`). All sampling draws from
an explicit ``torch.Generator`` so that losses are reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import torch
from torch import nn
from torch.nn import functional as F
from torchvision.ops import roi_align

from ..fusion import ConfigurationError, check_pyramid
from .boxes import BoxList, batched_nms, decode_boxes, encode_boxes, iou_matrix

STRIDES = (4, 8, 16, 32)


@dataclass
class DetectorConfig:
    num_classes: int = 3
    base_channels: int = 256  # C_1 of the backbone pyramid; C_l = base * 2**(l-1)
    fpn_channels: int = 256
    anchor_scale: float = 8.0
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    rpn_pre_nms_top_n: int = 1000  # per level
    rpn_post_nms_train: int = 512
    rpn_post_nms_test: int = 1000
    rpn_nms_iou: float = 0.7
    rpn_min_size: float = 0.0
    rpn_batch_size: int = 256
    rpn_pos_fraction: float = 0.5
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_min_pos_iou: float = 0.3
    roi_batch_size: int = 512
    roi_pos_fraction: float = 0.25
    roi_pos_iou: float = 0.5
    roi_output_size: int = 7
    roi_sampling_ratio: int = 2
    finest_scale: float = 56.0
    head_hidden: int = 1024
    roi_target_stds: tuple = (0.1, 0.1, 0.2, 0.2)
    test_score_thr: float = 0.05
    test_nms_iou: float = 0.5
    max_per_image: int = 100

    @classmethod
    def from_dict(cls, d: dict | None) -> "DetectorConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown detector keys: {sorted(unknown)}")
        for k in ("anchor_ratios", "roi_target_stds"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_ratios)

    @property
    def roi_feature_dim(self) -> int:
        return self.fpn_channels * self.roi_output_size**2


def _kaiming(module: nn.Module, gen: torch.Generator) -> None:
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()


class ConvBackbone(nn.Module):
    """Desk-scale student backbone emitting a 4-level pyramid at strides 4..32."""

    def __init__(self, base_channels: int = 256):
        super().__init__()
        c = base_channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, c // 2, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c // 2, c, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c, c, 3, padding=1), nn.ReLU(),
        )
        self.stages = nn.ModuleList()
        for l in range(1, 4):
            cin, cout = c * 2 ** (l - 1), c * 2**l
            self.stages.append(nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.ReLU(),
                nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(),
            ))

    def forward(self, images: torch.Tensor, noise_seed: int = 0) -> list[torch.Tensor]:
        x = self.stem(images * 2.0 - 1.0)
        out = [x]
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out


class FPN(nn.Module):
    def __init__(self, in_channels: Sequence[int], out_channels: int):
        super().__init__()
        self.lateral = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in in_channels)
        self.output = nn.ModuleList(nn.Conv2d(out_channels, out_channels, 3, padding=1)
                                    for _ in in_channels)

    def forward(self, feats: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        lat = [conv(f) for conv, f in zip(self.lateral, feats)]
        for i in range(len(lat) - 1, 0, -1):
            lat[i - 1] = lat[i - 1] + F.interpolate(lat[i], size=lat[i - 1].shape[-2:], mode="nearest")
        return [conv(x) for conv, x in zip(self.output, lat)]


def make_anchors(feat_sizes: Sequence[tuple[int, int]], cfg: DetectorConfig,
                 dtype=torch.float32) -> list[torch.Tensor]:
    """Per-level anchors ordered (y, x, ratio), matching the head's flattening."""
    out = []
    ratios = torch.tensor(cfg.anchor_ratios, dtype=dtype)
    for (h, w), stride in zip(feat_sizes, STRIDES):
        size = cfg.anchor_scale * stride
        ws = size / torch.sqrt(ratios)
        hs = size * torch.sqrt(ratios)
        ys = (torch.arange(h, dtype=dtype) + 0.5) * stride
        xs = (torch.arange(w, dtype=dtype) + 0.5) * stride
        cy, cx = torch.meshgrid(ys, xs, indexing="ij")
        cx, cy = cx[..., None], cy[..., None]
        anchors = torch.stack([cx - ws / 2, cy - hs / 2, cx + ws / 2, cy + hs / 2], dim=-1)
        out.append(anchors.reshape(-1, 4))
    return out


class RPNHead(nn.Module):
    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.cls = nn.Conv2d(channels, num_anchors, 1)
        self.reg = nn.Conv2d(channels, 4 * num_anchors, 1)

    def forward(self, feats: Sequence[torch.Tensor]):
        """Returns per-level ``[B, H*W*A]`` objectness and ``[B, H*W*A, 4]`` deltas."""
        objs, deltas = [], []
        for f in feats:
            h = F.relu(self.conv(f))
            b = f.shape[0]
            objs.append(self.cls(h).permute(0, 2, 3, 1).reshape(b, -1))
            d = self.reg(h).permute(0, 2, 3, 1).reshape(b, f.shape[2], f.shape[3], -1, 4)
            deltas.append(d.reshape(b, -1, 4))
        return objs, deltas


class RoIHead(nn.Module):
    """Two shared hidden projections followed by the cls and class-agnostic reg branches."""

    def __init__(self, in_dim: int, hidden: int, num_classes: int):
        super().__init__()
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.cls = nn.Linear(hidden, num_classes + 1)
        self.reg = nn.Linear(hidden, 4)

    def forward(self, pooled: torch.Tensor):
        if pooled.shape[-1] != self.in_dim:
            raise ConfigurationError(f"RoI feature width {pooled.shape[-1]} != head input {self.in_dim}")
        x = F.relu(self.fc2(F.relu(self.fc1(pooled))))
        return HeadOutputs(self.cls(x), self.reg(x))


@dataclass
class HeadOutputs:
    cls_logits: torch.Tensor  # [N, C+1], background last
    box_deltas: torch.Tensor  # [N, 4]


def roi_head_forward(pooled: torch.Tensor, head_params: RoIHead) -> HeadOutputs:
    return head_params(pooled)


def map_roi_levels(boxes: torch.Tensor, finest_scale: float, num_levels: int = 4) -> torch.Tensor:
    scale = torch.sqrt((boxes[:, 2] - boxes[:, 0]).clamp(min=0) * (boxes[:, 3] - boxes[:, 1]).clamp(min=0))
    lvl = torch.floor(torch.log2(scale / finest_scale + 1e-6))
    return lvl.clamp(0, num_levels - 1).long()


def pool_roi_features(pyramid: Sequence[torch.Tensor], proposals: Sequence[BoxList] | BoxList,
                      output_size: int = 7, sampling_ratio: int = 2,
                      finest_scale: float = 56.0) -> torch.Tensor:
    """RoIAlign each proposal on its scale-assigned level; returns ``[N, C*S*S]``.

    ``pyramid`` levels are ``[B, C, H, W]`` (or unbatched ``[C, H, W]`` with a
    single BoxList). Output rows follow the concatenated per-image proposal order.
    """
    if isinstance(proposals, BoxList):
        proposals = [proposals]
    if pyramid[0].dim() == 3:
        pyramid = [p[None] for p in pyramid]
    rois = torch.cat([
        torch.cat([torch.full((len(p), 1), i, dtype=pyramid[0].dtype), p.boxes.to(pyramid[0].dtype)], 1)
        for i, p in enumerate(proposals)
    ]) if proposals else torch.zeros((0, 5), dtype=pyramid[0].dtype)
    c = pyramid[0].shape[1]
    out = pyramid[0].new_zeros((rois.shape[0], c, output_size, output_size))
    if rois.shape[0] == 0:
        return out.reshape(0, c * output_size**2)
    levels = map_roi_levels(rois[:, 1:], finest_scale, len(pyramid))
    for lvl, feat in enumerate(pyramid):
        idx = torch.nonzero(levels == lvl).flatten()
        if idx.numel() == 0:
            continue
        stride = STRIDES[lvl] if len(pyramid) == len(STRIDES) else 2 ** (lvl + 2)
        pooled = roi_align(feat, rois[idx], output_size, spatial_scale=1.0 / stride,
                           sampling_ratio=sampling_ratio, aligned=True)
        out = out.index_copy(0, idx, pooled)
    return out.flatten(1)


def _sample(labels: torch.Tensor, batch_size: int, pos_fraction: float,
            gen: torch.Generator, bg_value) -> torch.Tensor:
    """Indices of a random subset with at most ``pos_fraction`` positives."""
    pos = torch.nonzero((labels >= 0) & (labels != bg_value)).flatten()
    neg = torch.nonzero(labels == bg_value).flatten()
    n_pos = min(pos.numel(), int(batch_size * pos_fraction))
    pos = pos[torch.randperm(pos.numel(), generator=gen)[:n_pos]]
    n_neg = min(neg.numel(), batch_size - n_pos)
    neg = neg[torch.randperm(neg.numel(), generator=gen)[:n_neg]]
    return torch.cat([pos, neg])


def assign_anchors(anchors: torch.Tensor, gt: torch.Tensor, cfg: DetectorConfig):
    """RPN labels (1 fg, 0 bg, -1 ignore) and matched gt index per anchor."""
    n = anchors.shape[0]
    labels = torch.full((n,), -1, dtype=torch.long)
    matched = torch.zeros((n,), dtype=torch.long)
    if gt.shape[0] == 0:
        labels[:] = 0
        return labels, matched
    iou = iou_matrix(anchors, gt)
    max_iou, matched = iou.max(dim=1)
    labels[max_iou < cfg.rpn_neg_iou] = 0
    labels[max_iou >= cfg.rpn_pos_iou] = 1
    gt_best, _ = iou.max(dim=0)
    for j in range(gt.shape[0]):
        if gt_best[j] >= cfg.rpn_min_pos_iou:
            hit = iou[:, j] == gt_best[j]
            labels[hit] = 1
            matched[hit] = j
    return labels, matched


def rpn_loss(objectness: torch.Tensor, deltas: torch.Tensor, anchors: torch.Tensor,
             gts: Sequence[BoxList], cfg: DetectorConfig, gen: torch.Generator):
    """Objectness BCE and L1 box loss over sampled anchors, averaged over all samples.

    ``objectness`` is ``[B, A]`` and ``deltas`` ``[B, A, 4]`` over the
    concatenated anchors of all levels.
    """
    logit_list, label_list, reg_pred, reg_tgt = [], [], [], []
    for b, gt in enumerate(gts):
        labels, matched = assign_anchors(anchors, gt.boxes.to(anchors.dtype), cfg)
        keep = _sample(labels, cfg.rpn_batch_size, cfg.rpn_pos_fraction, gen, bg_value=0)
        logit_list.append(objectness[b, keep])
        label_list.append(labels[keep].to(objectness.dtype))
        pos = keep[labels[keep] == 1]
        if pos.numel():
            reg_pred.append(deltas[b, pos])
            reg_tgt.append(encode_boxes(gt.boxes.to(anchors.dtype)[matched[pos]], anchors[pos]))
    logits = torch.cat(logit_list)
    n = max(logits.numel(), 1)
    loss_cls = F.binary_cross_entropy_with_logits(logits, torch.cat(label_list), reduction="sum") / n
    if reg_pred:
        loss_box = (torch.cat(reg_pred) - torch.cat(reg_tgt)).abs().sum() / n
    else:
        loss_box = deltas.sum() * 0.0
    return loss_cls, loss_box


def sample_rois(proposals: Sequence[BoxList], gts: Sequence[BoxList], cfg: DetectorConfig,
                gen: torch.Generator):
    """Add gt boxes to the proposals, assign labels (background = C) and subsample."""
    out = []
    for props, gt in zip(proposals, gts):
        gt_boxes = gt.boxes.to(props.boxes.dtype)
        boxes = torch.cat([props.boxes, gt_boxes])
        labels = torch.full((boxes.shape[0],), cfg.num_classes, dtype=torch.long)
        targets = boxes.clone()
        if gt_boxes.shape[0]:
            iou = iou_matrix(boxes, gt_boxes)
            max_iou, matched = iou.max(dim=1)
            fg = max_iou >= cfg.roi_pos_iou
            labels[fg] = gt.labels[matched[fg]]
            targets = gt_boxes[matched]
        keep = _sample(labels, cfg.roi_batch_size, cfg.roi_pos_fraction, gen, bg_value=cfg.num_classes)
        out.append((BoxList(boxes[keep]), labels[keep], targets[keep]))
    return out


def roi_loss(head_out: HeadOutputs, rois: torch.Tensor, labels: torch.Tensor,
             targets: torch.Tensor, cfg: DetectorConfig):
    """Cross-entropy over sampled RoIs and L1 on normalized deltas of foreground RoIs."""
    n = max(labels.numel(), 1)
    if labels.numel() == 0:
        zero = head_out.cls_logits.sum() * 0.0
        return zero, zero
    loss_cls = F.cross_entropy(head_out.cls_logits, labels, reduction="sum") / n
    fg = labels != cfg.num_classes
    if bool(fg.any()):
        stds = torch.tensor(cfg.roi_target_stds, dtype=rois.dtype)
        tgt = encode_boxes(targets[fg], rois[fg]) / stds
        loss_box = (head_out.box_deltas[fg] - tgt).abs().sum() / n
    else:
        loss_box = head_out.box_deltas.sum() * 0.0
    return loss_cls, loss_box


class TwoStageDetector(nn.Module):
    def __init__(self, backbone: nn.Module, cfg: DetectorConfig, init_seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.backbone = backbone
        in_ch = [cfg.base_channels * 2**l for l in range(4)]
        self.neck = FPN(in_ch, cfg.fpn_channels)
        self.rpn = RPNHead(cfg.fpn_channels, cfg.num_anchors)
        self.roi_head = RoIHead(cfg.roi_feature_dim, cfg.head_hidden, cfg.num_classes)
        gen = torch.Generator().manual_seed(init_seed)
        trainable = [self.neck, self.rpn, self.roi_head]
        if isinstance(backbone, ConvBackbone):
            trainable.insert(0, backbone)
        else:
            trainable.insert(0, backbone.projectors)
        for m in trainable:
            _kaiming(m, gen)
        with torch.no_grad():
            # small output layers keep the first iterations stable
            self.rpn.cls.weight.mul_(0.1)
            self.rpn.reg.weight.mul_(0.1)
            self.roi_head.cls.weight.mul_(0.1)
            self.roi_head.reg.weight.mul_(0.01)

    # -- feature extraction
    def backbone_features(self, images: torch.Tensor, noise_seed: int = 0) -> list[torch.Tensor]:
        pyr = self.backbone(images, noise_seed=noise_seed)
        check_pyramid(pyr, self.cfg.base_channels)
        return pyr

    def extract(self, images: torch.Tensor, noise_seed: int = 0) -> list[torch.Tensor]:
        """Neck (FPN) features: the pyramid every head and loss consumes."""
        return self.neck(self.backbone_features(images, noise_seed))

    # -- proposals
    def anchors_for(self, feats: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        return make_anchors([tuple(f.shape[-2:]) for f in feats], self.cfg, feats[0].dtype)

    def proposals(self, feats, image_size, training: bool, rpn_out=None) -> list[BoxList]:
        cfg = self.cfg
        objs, deltas = rpn_out if rpn_out is not None else self.rpn(feats)
        anchors = self.anchors_for(feats)
        post_n = cfg.rpn_post_nms_train if training else cfg.rpn_post_nms_test
        out = []
        for b in range(feats[0].shape[0]):
            boxes, scores, lvls = [], [], []
            for lvl, (o, d, a) in enumerate(zip(objs, deltas, anchors)):
                o, d = o[b].detach(), d[b].detach()
                k = min(cfg.rpn_pre_nms_top_n, o.numel())
                top_s, top_i = o.topk(k)
                bx = decode_boxes(d[top_i], a[top_i])
                boxes.append(bx)
                scores.append(top_s)
                lvls.append(torch.full((k,), lvl, dtype=torch.long))
            bl = BoxList(torch.cat(boxes), scores=torch.sigmoid(torch.cat(scores))).clip(image_size)
            lv = torch.cat(lvls)
            wh = bl.boxes[:, 2:] - bl.boxes[:, :2]
            valid = (wh[:, 0] > cfg.rpn_min_size) & (wh[:, 1] > cfg.rpn_min_size)
            bl, lv = bl[valid], lv[valid]
            keep = batched_nms(bl.boxes, bl.scores, lv, cfg.rpn_nms_iou)
            keep = keep[bl.scores[keep].argsort(descending=True, stable=True)][:post_n]
            out.append(bl[keep])
        return out

    def pool(self, feats, proposals) -> torch.Tensor:
        c = self.cfg
        return pool_roi_features(feats, proposals, c.roi_output_size, c.roi_sampling_ratio, c.finest_scale)

    # -- training
    def losses(self, feats, gts: Sequence[BoxList], gen: torch.Generator, image_size, proposals=None):
        """Standard two-stage losses on given neck features; also returns the proposals.

        Proposals are constants for the gradient. Passing ``proposals`` skips
        proposal generation and uses those boxes instead.
        """
        cfg = self.cfg
        objs, deltas = self.rpn(feats)
        anchors = torch.cat(self.anchors_for(feats))
        rpn_cls, rpn_box = rpn_loss(torch.cat(objs, 1), torch.cat(deltas, 1), anchors, gts, cfg, gen)
        if proposals is None:
            props = self.proposals(feats, image_size, training=True, rpn_out=(objs, deltas))
        else:
            props = [BoxList(p.boxes.detach()) for p in proposals]
        sampled = sample_rois(props, gts, cfg, gen)
        rois = [s[0] for s in sampled]
        labels = torch.cat([s[1] for s in sampled])
        targets = torch.cat([s[2] for s in sampled])
        head_out = self.roi_head(self.pool(feats, rois))
        roi_cls, roi_box = roi_loss(head_out, torch.cat([r.boxes for r in rois]), labels, targets, cfg)
        parts = {"rpn_cls": rpn_cls, "rpn_bbox": rpn_box, "roi_cls": roi_cls, "roi_bbox": roi_box}
        parts["l_det"] = rpn_cls + rpn_box + roi_cls + roi_box
        return parts, props

    # -- inference
    @torch.no_grad()
    def detect(self, images: torch.Tensor, noise_seed: int = 0) -> list[BoxList]:
        cfg = self.cfg
        size = tuple(images.shape[-2:])
        feats = self.extract(images, noise_seed)
        props = self.proposals(feats, size, training=False)
        head = self.roi_head(self.pool(feats, props))
        probs = torch.softmax(head.cls_logits, dim=1)
        stds = torch.tensor(cfg.roi_target_stds, dtype=probs.dtype)
        out, start = [], 0
        for p in props:
            n = len(p)
            pr = probs[start:start + n, :cfg.num_classes]
            boxes = BoxList(decode_boxes(head.box_deltas[start:start + n] * stds, p.boxes)).clip(size).boxes
            start += n
            scores = pr.flatten()
            labels = torch.arange(cfg.num_classes).repeat(n)
            bx = boxes[:, None, :].expand(n, cfg.num_classes, 4).reshape(-1, 4)
            keep = scores > cfg.test_score_thr
            wh = bx[:, 2:] - bx[:, :2]
            keep &= (wh[:, 0] > 0) & (wh[:, 1] > 0)
            bx, scores, labels = bx[keep], scores[keep], labels[keep]
            k = batched_nms(bx, scores, labels, cfg.test_nms_iou)
            k = k[scores[k].argsort(descending=True, stable=True)][:cfg.max_per_image]
            out.append(BoxList(bx[k], labels[k], scores[k]))
        return out


def detection_loss(pyramid, gt, detector: TwoStageDetector, generator: torch.Generator,
                   image_size: tuple[int, int], proposals=None) -> dict:
    """L_det on the given neck pyramid (RPN objectness + RPN box + RoI cls + RoI box)."""
    gts = [gt] if isinstance(gt, BoxList) else list(gt)
    parts, _ = detector.losses(pyramid, gts, generator, image_size, proposals)
    return parts


def generate_proposals(pyramid, detector: TwoStageDetector, image_size, training: bool = False):
    return detector.proposals(pyramid, image_size, training)


@dataclass
class DetectorState:
    """Parameter snapshot of a detector, for frozen-ness checks."""

    params: dict = field(default_factory=dict)
    frozen: bool = False

    @classmethod
    def of(cls, model: nn.Module) -> "DetectorState":
        sd = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(sd, not any(p.requires_grad for p in model.parameters()))

    def identical_to(self, model: nn.Module) -> bool:
        cur = model.state_dict()
        return cur.keys() == self.params.keys() and all(
            torch.equal(cur[k], v) for k, v in self.params.items()
        )
