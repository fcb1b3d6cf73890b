import numpy as np
import pytest

from diffguide.evaluation.corruptions import (
    CORRUPTIONS,
    CorruptionSpec,
    all_specs,
    apply_corruption,
    frost_texture,
)


@pytest.fixture(scope="module")
def image():
    rng = np.random.default_rng(0)
    img = np.full((3, 64, 64), 0.6, dtype=np.float32)
    img[:, 16:40, 20:44] = rng.uniform(0.1, 0.3, size=(3, 1, 1))
    img += rng.normal(0, 0.02, size=img.shape).astype(np.float32)
    return np.clip(img, 0, 1)


def test_grid_has_75_cells():
    specs = all_specs()
    assert len(CORRUPTIONS) == 15 and len(specs) == 75
    assert len(set(specs)) == 75


def test_spec_validation():
    with pytest.raises(ValueError):
        CorruptionSpec("fog", 0)
    with pytest.raises(ValueError):
        CorruptionSpec("rain", 1)


@pytest.mark.parametrize("kind", CORRUPTIONS)
def test_each_corruption_is_deterministic_in_range_and_changes_the_image(kind, image):
    for sev in (1, 5):
        a = apply_corruption(image, (kind, sev), 123)
        b = apply_corruption(image, CorruptionSpec(kind, sev), np.random.default_rng(123))
        assert a.shape == image.shape and a.dtype == np.float32
        assert np.array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0
        assert np.abs(a - image).mean() > 1e-4


@pytest.mark.parametrize("kind", CORRUPTIONS)
def test_severity_increases_distortion(kind, image):
    def distortion(out):
        if kind == "frost":
            # a blend can keep the mean level while burying the content, so measure lost correlation
            return 1.0 - np.corrcoef(out.ravel(), image.ravel())[0, 1]
        return np.abs(out - image).mean()

    dist = [distortion(apply_corruption(image, (kind, s), 7)) for s in range(1, 6)]
    assert dist[4] > dist[0]


def test_frost_texture_cached_and_stable():
    a = frost_texture(0, 64)
    b = frost_texture(0, 64)
    assert a is b or np.array_equal(a, b)
    assert a.shape[:2] == (64, 64) and a.min() >= 0 and a.max() <= 1
