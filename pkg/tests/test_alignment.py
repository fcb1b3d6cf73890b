import pytest
import torch

from diffguide.alignment import (
    LossReport,
    cross_feature_loss,
    feature_align_loss,
    kd_cls_loss,
    kd_reg_loss,
    normalize_feature_map,
    shared_roi_predictions,
    total_loss,
)
from diffguide.detector import BoxList, ConvBackbone, DetectorConfig, TwoStageDetector
from diffguide.fusion import ConfigurationError

from oracles import gradient_agrees, kl_loss
from test_detector import SMALL, gt_list, small_detector


def pyramid(seed=0, dtype=torch.float32, batch=2, ch=4):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(batch, ch, s, s, generator=g, dtype=dtype) for s in (8, 4, 2, 2)]


def test_normalize_statistics_and_constant_channel():
    m = torch.randn(2, 3, 5, 5, dtype=torch.float64)
    m[1, 2] = 4.0
    n = normalize_feature_map(m)
    assert torch.all(n[1, 2] == 0)
    flat = n[0].flatten(1)
    assert torch.allclose(flat.mean(1), torch.zeros(3, dtype=torch.float64), atol=1e-12)
    assert torch.allclose(flat.var(1, unbiased=False), torch.ones(3, dtype=torch.float64), atol=1e-9)


def test_align_loss_identity_and_affine_invariance():
    s = pyramid(0)
    assert feature_align_loss(s, s).item() == 0.0
    t = [2.5 * x + 1.0 for x in s]
    assert abs(feature_align_loss(s, t).item()) < 1e-6
    assert feature_align_loss(s, pyramid(1)).item() > 0


def test_align_loss_value_oracle():
    # anti-correlated levels: standardized maps are negatives, mean squared difference is 4
    s = [torch.tensor([[[[0.0, 1.0], [2.0, 3.0]]]])]
    t = [-s[0]]
    assert feature_align_loss(s, t).item() == pytest.approx(4.0, rel=1e-6)


def test_align_loss_shape_checks():
    with pytest.raises(ValueError):
        feature_align_loss(pyramid(0), pyramid(0)[:3])
    with pytest.raises(ValueError):
        feature_align_loss(pyramid(0), pyramid(0, ch=5))


def test_align_loss_gradients():
    s, t = pyramid(0, torch.float64), pyramid(1, torch.float64)
    sizes = [x.numel() for x in s]

    def f(v):
        parts = [p.reshape(x.shape) for p, x in zip(torch.split(v, sizes), s)]
        return feature_align_loss(parts, t)

    assert gradient_agrees(f, torch.cat([x.flatten() for x in s])) < 1e-3
    t = [x.clone().requires_grad_(True) for x in t]
    s = [x.clone().requires_grad_(True) for x in s]
    feature_align_loss(s, t).backward()
    assert all(x.grad is None for x in t)


def test_kd_cls_oracle_and_identity():
    q = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    p = torch.tensor([[0.0, 0.0]], dtype=torch.float64)
    assert kd_cls_loss(q, p).item() == pytest.approx(kl_loss([[1, 0]], [[0, 0]]), abs=1e-12)
    assert kd_cls_loss(p, p).item() == 0.0
    g = torch.Generator().manual_seed(0)
    q, p = torch.randn(5, 4, generator=g, dtype=torch.float64), torch.randn(5, 4, generator=g, dtype=torch.float64)
    for tau in (0.5, 1.0, 3.0):
        assert kd_cls_loss(q, p, tau).item() == pytest.approx(kl_loss(q.tolist(), p.tolist(), tau), abs=1e-12)


def test_kd_cls_direction_matters():
    q = torch.tensor([[3.0, 0.0, 0.0]])
    p = torch.tensor([[0.0, 1.0, 0.0]])
    assert kd_cls_loss(q, p).item() != pytest.approx(kd_cls_loss(p, q).item())


def test_kd_cls_errors_and_empty():
    with pytest.raises(ValueError):
        kd_cls_loss(torch.zeros(2, 3), torch.zeros(2, 3), tau=0.0)
    with pytest.raises(ValueError):
        kd_cls_loss(torch.zeros(2, 3), torch.zeros(2, 4))
    assert kd_cls_loss(torch.zeros(0, 3), torch.zeros(0, 3)).item() == 0.0


def test_kd_reg_value_and_gradients():
    q = torch.tensor([[0.0, 1.0, 2.0, 3.0], [1.0, 1.0, 1.0, 1.0]])
    p = torch.zeros(2, 4)
    assert kd_reg_loss(q, p).item() == pytest.approx((6 + 4) / 2)
    assert kd_reg_loss(q, q).item() == 0.0
    g = torch.Generator().manual_seed(1)
    q = torch.randn(6, 4, generator=g, dtype=torch.float64)
    p = torch.randn(6, 4, generator=g, dtype=torch.float64, requires_grad=True)
    assert gradient_agrees(lambda v: kd_reg_loss(v, p), q) < 1e-3
    assert gradient_agrees(lambda v: kd_cls_loss(v, p), q) < 1e-3
    q = q.requires_grad_(True)
    (kd_reg_loss(q, p) + kd_cls_loss(q, p)).backward()
    assert p.grad is None


def test_total_loss_composition():
    parts = {"l_det": 1.0, "l_align": 2.0, "l_cross": 3.0, "l_cls": 4.0, "l_reg": 5.0}
    r = total_loss(parts, 0.5, 2.0)
    assert r.total == pytest.approx(1 + 0.5 * 5 + 2 * 9)
    assert total_loss(parts, 0.0, 0.0).total == 1.0
    assert total_loss({"l_det": 1.5}).total == 1.5
    with pytest.raises(ValueError):
        total_loss(parts, -1.0, 1.0)
    rec = r.record(7)
    assert rec["iteration"] == 7 and rec["total"] == pytest.approx(r.total)


def test_total_loss_keeps_tensors_differentiable():
    x = torch.tensor(2.0, requires_grad=True)
    r = total_loss({"l_det": x * 3, "l_align": x}, 0.5, 1.0)
    r.total.backward()
    assert x.grad.item() == pytest.approx(3.5)
    assert isinstance(r, LossReport)


def test_shared_roi_predictions_gradients_only_reach_student():
    teacher = small_detector(seed=1)
    teacher.requires_grad_(False)
    props = [BoxList(torch.tensor([[4.0, 4.0, 30.0, 30.0], [20.0, 10.0, 60.0, 50.0]]))]
    t_pyr = [f.detach().requires_grad_(True) for f in teacher.extract(torch.rand(1, 3, 64, 64))]
    s_pyr = [f.detach().clone().requires_grad_(True) for f in t_pyr]
    p_out, q_out = shared_roi_predictions(props, t_pyr, s_pyr, teacher)
    # identical pyramids give identical predictions, hence zero object-level losses
    assert torch.equal(p_out.cls_logits, q_out.cls_logits)
    assert kd_cls_loss(q_out.cls_logits, p_out.cls_logits).item() == 0.0
    assert kd_reg_loss(q_out.box_deltas, p_out.box_deltas).item() == 0.0
    s_pyr2 = [(f * 1.3).detach().requires_grad_(True) for f in t_pyr]
    p_out, q_out = shared_roi_predictions(props, t_pyr, s_pyr2, teacher)
    loss = kd_cls_loss(q_out.cls_logits, p_out.cls_logits) + kd_reg_loss(q_out.box_deltas, p_out.box_deltas)
    loss.backward()
    assert all(f.grad is None for f in t_pyr)
    assert any(f.grad is not None and f.grad.abs().sum() > 0 for f in s_pyr2)
    assert all(p.grad is None for p in teacher.parameters())


def test_cross_feature_loss_trains_student_heads_only():
    student = small_detector(seed=2)
    teacher = small_detector(seed=3)
    t_pyr = [f.detach().requires_grad_(True) for f in teacher.extract(torch.rand(1, 3, 64, 64))]
    loss = cross_feature_loss(t_pyr, student, gt_list(), torch.Generator().manual_seed(0), (64, 64))
    loss.backward()
    assert all(f.grad is None for f in t_pyr)
    assert student.roi_head.fc1.weight.grad is not None
    assert student.backbone.stem[0].weight.grad is None


def test_cross_feature_loss_checks_width():
    cfg = DetectorConfig.from_dict(SMALL | {"fpn_channels": 16})
    student = TwoStageDetector(ConvBackbone(cfg.base_channels), cfg)
    with pytest.raises(ConfigurationError):
        cross_feature_loss(pyramid(0, batch=1, ch=8), student, gt_list(), torch.Generator(), (64, 64))
