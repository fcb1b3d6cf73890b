import pytest
import torch

from diffguide.diffusion import ToyDenoiser, build_noise_schedule, sample_timesteps
from diffguide.fusion import (
    AggregationWeights,
    Bottleneck,
    ConfigurationError,
    DiffusionBackbone,
    PyramidProjector,
    aggregate_timesteps,
    check_pyramid,
    pyramid_shapes,
)


def test_pyramid_shapes_formula():
    assert pyramid_shapes(512, 512) == [(256, 128, 128), (512, 64, 64), (1024, 32, 32), (2048, 16, 16)]
    assert pyramid_shapes(64, 96, base_channels=16) == [(16, 16, 24), (32, 8, 12), (64, 4, 6), (128, 2, 3)]


def test_check_pyramid_rejects_wrong_channels():
    good = [torch.zeros(1, c, h, w) for c, h, w in pyramid_shapes(64, 64, 8)]
    check_pyramid(good, 8)
    bad = list(good)
    bad[2] = torch.zeros(1, 33, 4, 4)
    with pytest.raises(ConfigurationError):
        check_pyramid(bad, 8)


def test_bottleneck_resizes_and_sets_channels():
    b = Bottleneck([4, 4, 4], 6, 10)
    taps = [torch.rand(2, 4, 3, 3) for _ in range(3)]
    assert b(taps, (8, 5)).shape == (2, 10, 8, 5)


def test_backbone_output_matches_pyramid_contract():
    d = ToyDenoiser(width=8)
    bb = DiffusionBackbone(d, build_noise_schedule(1000), sample_timesteps(2, 100),
                           reduce_channels=8, base_channels=4)
    pyr = bb(torch.rand(2, 3, 64, 64), noise_seed=0)
    assert [tuple(p.shape[1:]) for p in pyr] == pyramid_shapes(64, 64, 4)
    assert len(bb.projectors) == 2
    shared = DiffusionBackbone(d, build_noise_schedule(1000), sample_timesteps(2, 100),
                               reduce_channels=8, base_channels=4, share_bottleneck=True)
    assert len(shared.projectors) == 1


def test_aggregation_zero_logits_is_mean():
    steps = [[torch.randn(1, 2, 3, 3)] for _ in range(4)]
    w = AggregationWeights(4)
    out = aggregate_timesteps(steps, w)[0]
    assert torch.allclose(out, torch.stack([s[0] for s in steps]).mean(0), atol=1e-6)
    assert torch.allclose(w.normalized().sum(), torch.tensor(1.0))


def test_aggregation_single_timestep_is_identity():
    x = [torch.randn(1, 2, 3, 3), torch.randn(1, 4, 2, 2)]
    out = aggregate_timesteps([x], torch.tensor([3.7]))
    assert all(torch.equal(a, b) for a, b in zip(out, x))


def test_aggregation_per_level_weights():
    steps = [[torch.full((1, 1, 1, 1), float(t)), torch.full((1, 1, 1, 1), float(t))] for t in range(2)]
    logits = torch.tensor([[100.0, -100.0], [-100.0, 100.0]])
    out = aggregate_timesteps(steps, logits)
    assert out[0].item() == pytest.approx(0.0) and out[1].item() == pytest.approx(1.0)


def test_aggregation_length_mismatch():
    with pytest.raises(ValueError):
        aggregate_timesteps([[torch.zeros(1)]] * 3, torch.zeros(2))


def test_aggregation_gradient_matches_finite_differences():
    torch.manual_seed(0)
    steps = [[torch.randn(1, 2, 3, 3, dtype=torch.float64) for _ in range(2)] for _ in range(3)]
    logits = torch.randn(3, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(
        lambda l: sum((o ** 2).sum() for o in aggregate_timesteps(steps, l)), (logits,), eps=1e-6, atol=1e-7
    )


def test_projector_rejects_wrong_stage_count():
    with pytest.raises(ConfigurationError):
        PyramidProjector([[4, 4, 4]] * 3, 8, 4)
