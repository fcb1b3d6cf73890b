"""The 15 common corruptions at 5 severities, for ``[3, H, W]`` float images in [0, 1].

Severity tables are the reference common-corruption values. Spatial
parameters (blur radii, pixel displacements) are in pixels, unscaled, so small
images are hit comparatively hard. All randomness comes from the ``rng``
argument. Frost uses procedurally generated ice textures.
"""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter, map_coordinates

NOISE = ("gaussian_noise", "shot_noise", "impulse_noise")
BLUR = ("defocus_blur", "glass_blur", "motion_blur", "zoom_blur")
WEATHER = ("snow", "frost", "fog")
DIGITAL = ("brightness", "contrast", "elastic", "jpeg", "pixelate")
CORRUPTIONS = NOISE + BLUR + WEATHER + DIGITAL

JPEG_QUALITY = (25, 18, 15, 10, 7)


@dataclass(frozen=True, order=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {self.kind!r}")
        if self.severity not in (1, 2, 3, 4, 5):
            raise ValueError(f"severity must be in 1..5, got {self.severity}")


def all_specs() -> list[CorruptionSpec]:
    return [CorruptionSpec(k, s) for k in CORRUPTIONS for s in range(1, 6)]


# -- helpers (HWC float images) ---------------------------------------------

def _disk(radius: float, alias_blur: float) -> np.ndarray:
    if radius <= 8:
        r = np.arange(-8, 8 + 1)
        ksize = (3, 3)
    else:
        r = np.arange(-radius, radius + 1)
        ksize = (5, 5)
    xx, yy = np.meshgrid(r, r)
    k = ((xx**2 + yy**2) <= radius**2).astype(np.float32)
    k /= k.sum()
    return cv2.GaussianBlur(k, ksize=ksize, sigmaX=alias_blur)


def _filter(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return np.stack([cv2.filter2D(x[..., c], -1, kernel, borderType=cv2.BORDER_REFLECT)
                     for c in range(x.shape[2])], axis=2)


def _clipped_zoom(x: np.ndarray, factor: float) -> np.ndarray:
    h, w = x.shape[:2]
    ch, cw = int(math.ceil(h / factor)), int(math.ceil(w / factor))
    top, left = (h - ch) // 2, (w - cw) // 2
    crop = x[top:top + ch, left:left + cw]
    out = cv2.resize(crop, (int(round(cw * factor)), int(round(ch * factor))), interpolation=cv2.INTER_LINEAR)
    if out.ndim == 2 and x.ndim == 3:
        out = out[..., None]
    th, tw = (out.shape[0] - h) // 2, (out.shape[1] - w) // 2
    return out[th:th + h, tw:tw + w]


def _shift(x: np.ndarray, dx: int, dy: int) -> np.ndarray:
    h, w = x.shape[:2]
    ys = np.clip(np.arange(h) - dy, 0, h - 1)
    xs = np.clip(np.arange(w) - dx, 0, w - 1)
    return x[ys][:, xs]


def _motion(x: np.ndarray, radius: float, sigma: float, angle: float) -> np.ndarray:
    width = int(2 * radius + 1)
    kernel = np.exp(-(np.arange(width) ** 2) / (2 * sigma**2))
    kernel /= kernel.sum()
    py, px = width * math.sin(math.radians(angle)), width * math.cos(math.radians(angle))
    hyp = math.hypot(py, px)
    out = np.zeros_like(x, dtype=np.float32)
    used = 0.0
    for i in range(width):
        dy = -math.ceil(i * py / hyp - 0.5)
        dx = -math.ceil(i * px / hyp - 0.5)
        if abs(dy) >= x.shape[0] or abs(dx) >= x.shape[1]:
            break
        out += kernel[i] * _shift(x, dx, dy)
        used += kernel[i]
    return out / used


def _plasma(mapsize: int, wibbledecay: float, rng: np.random.Generator) -> np.ndarray:
    """Diamond-square fractal in [0, 1], ``mapsize`` a power of two."""
    maparray = np.empty((mapsize, mapsize), dtype=np.float64)
    maparray[0, 0] = 0
    stepsize = mapsize
    wibble = 100.0

    def wibbledmean(array):
        return array / 4 + wibble * rng.uniform(-wibble, wibble, array.shape)

    def fillsquares():
        corner = maparray[0:mapsize:stepsize, 0:mapsize:stepsize]
        sq = corner + np.roll(corner, shift=-1, axis=0)
        sq += np.roll(sq, shift=-1, axis=1)
        maparray[stepsize // 2:mapsize:stepsize, stepsize // 2:mapsize:stepsize] = wibbledmean(sq)

    def filldiamonds():
        ms = maparray.shape[0]
        dr = maparray[stepsize // 2:ms:stepsize, stepsize // 2:ms:stepsize]
        ul = maparray[0:ms:stepsize, 0:ms:stepsize]
        ldrsum = dr + np.roll(dr, 1, axis=0)
        lulsum = ul + np.roll(ul, -1, axis=1)
        ltsum = ldrsum + lulsum
        maparray[0:ms:stepsize, stepsize // 2:ms:stepsize] = wibbledmean(ltsum)
        tdrsum = dr + np.roll(dr, 1, axis=1)
        tulsum = ul + np.roll(ul, -1, axis=0)
        ttsum = tdrsum + tulsum
        maparray[stepsize // 2:ms:stepsize, 0:ms:stepsize] = wibbledmean(ttsum)

    while stepsize >= 2:
        fillsquares()
        filldiamonds()
        stepsize //= 2
        wibble /= wibbledecay
    maparray -= maparray.min()
    return maparray / maparray.max()


def _frost_cache_dir() -> Path | None:
    root = os.environ.get("DIFFGUIDE_CACHE")
    return Path(root) / "frost" if root else None


@lru_cache(maxsize=None)
def frost_texture(index: int, size: int = 256) -> np.ndarray:
    """Procedural ice-crystal texture ``[size, size, 3]`` in [0, 1] (seeded by ``index``).

    Persisted under ``$DIFFGUIDE_CACHE/frost`` when that variable is set.
    """
    cache = _frost_cache_dir()
    path = cache / f"frost_{index}_{size}.png" if cache else None
    if path is not None and path.is_file():
        with Image.open(path) as im:
            return np.asarray(im, dtype=np.float32) / 255.0
    rng = np.random.default_rng(1000 + index)
    canvas = np.zeros((size, size), dtype=np.float32)
    for _ in range(60 + 20 * index):
        x0, y0 = rng.uniform(0, size, 2)
        length = rng.uniform(size * 0.05, size * 0.25)
        ang = rng.uniform(0, 2 * np.pi)
        for branch in range(3):
            a = ang + branch * np.pi / 3
            x1, y1 = x0 + length * np.cos(a), y0 + length * np.sin(a)
            x2, y2 = x0 - length * np.cos(a), y0 - length * np.sin(a)
            cv2.line(canvas, (int(x1), int(y1)), (int(x2), int(y2)), float(rng.uniform(0.3, 1.0)), 1)
    canvas = cv2.GaussianBlur(canvas, (0, 0), 1.0)
    haze = gaussian_filter(rng.random((size, size)).astype(np.float32), 6)
    haze = (haze - haze.min()) / (haze.max() - haze.min() + 1e-8)
    tex = np.clip(0.55 * canvas + 0.45 * haze, 0, 1)
    rgb = np.stack([tex * 0.85, tex * 0.93, tex], axis=2).astype(np.float32)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.rint(rgb * 255).astype(np.uint8)).save(path)
        rgb = np.rint(rgb * 255).astype(np.float32) / 255.0
    return rgb


# -- corruptions ------------------------------------------------------------

def gaussian_noise(x, s, rng):
    c = (0.08, 0.12, 0.18, 0.26, 0.38)[s - 1]
    return x + rng.normal(size=x.shape, scale=c)


def shot_noise(x, s, rng):
    c = (60, 25, 12, 5, 3)[s - 1]
    return rng.poisson(np.clip(x, 0, 1) * c) / c


def impulse_noise(x, s, rng):
    c = (0.03, 0.06, 0.09, 0.17, 0.27)[s - 1]
    out = x.copy()
    hit = rng.random(x.shape) < c
    salt = rng.random(x.shape) < 0.5
    out[hit & salt] = 1.0
    out[hit & ~salt] = 0.0
    return out


def defocus_blur(x, s, rng):
    c = ((3, 0.1), (4, 0.5), (6, 0.5), (8, 0.5), (10, 0.5))[s - 1]
    return _filter(x, _disk(*c))


def glass_blur(x, s, rng):
    sigma, delta, iters = ((0.7, 1, 2), (0.9, 2, 1), (1, 2, 3), (1.1, 3, 2), (1.5, 4, 2))[s - 1]
    h, w = x.shape[:2]
    out = gaussian_filter(x, sigma=(sigma, sigma, 0))
    for _ in range(iters):
        for i in range(h - delta, delta, -1):
            d = rng.integers(-delta, delta, size=(w, 2))
            for j in range(w - delta, delta, -1):
                dx, dy = d[j]
                i2, j2 = i + dy, j + dx
                if 0 <= i2 < h and 0 <= j2 < w:
                    out[i, j], out[i2, j2] = out[i2, j2].copy(), out[i, j].copy()
    return gaussian_filter(out, sigma=(sigma, sigma, 0))


def motion_blur(x, s, rng):
    radius, sigma = ((10, 3), (15, 5), (15, 8), (15, 12), (20, 15))[s - 1]
    return _motion(x, radius, sigma, rng.uniform(-45, 45))


def zoom_blur(x, s, rng):
    zooms = (np.arange(1, 1.11, 0.01), np.arange(1, 1.16, 0.01), np.arange(1, 1.21, 0.02),
             np.arange(1, 1.26, 0.02), np.arange(1, 1.31, 0.03))[s - 1]
    out = np.zeros_like(x)
    for z in zooms:
        out += _clipped_zoom(x, float(z))
    return (x + out) / (len(zooms) + 1)


def snow(x, s, rng):
    c = ((0.1, 0.3, 3, 0.5, 10, 4, 0.8), (0.2, 0.3, 2, 0.5, 12, 4, 0.7),
         (0.55, 0.3, 4, 0.9, 12, 8, 0.7), (0.55, 0.3, 4.5, 0.85, 12, 8, 0.65),
         (0.55, 0.3, 2.5, 0.85, 12, 12, 0.55))[s - 1]
    h, w = x.shape[:2]
    layer = rng.normal(size=(h, w), loc=c[0], scale=c[1]).astype(np.float32)
    layer = _clipped_zoom(layer[..., None], c[2])[..., 0]
    layer[layer < c[3]] = 0
    layer = np.clip(layer, 0, 1)[..., None]
    layer = _motion(layer, c[4], c[5], rng.uniform(-135, -45))
    gray = cv2.cvtColor(x.astype(np.float32), cv2.COLOR_RGB2GRAY)[..., None]
    out = c[6] * x + (1 - c[6]) * np.maximum(x, gray * 1.5 + 0.5)
    return out + layer + np.rot90(layer, k=2)


def frost(x, s, rng):
    c = ((1, 0.4), (0.8, 0.6), (0.7, 0.7), (0.65, 0.7), (0.6, 0.75))[s - 1]
    h, w = x.shape[:2]
    size = max(256, 2 ** int(math.ceil(math.log2(max(h, w)))))
    tex = frost_texture(int(rng.integers(6)), size)
    y0 = int(rng.integers(0, tex.shape[0] - h + 1))
    x0 = int(rng.integers(0, tex.shape[1] - w + 1))
    return c[0] * x + c[1] * tex[y0:y0 + h, x0:x0 + w]


def fog(x, s, rng):
    c = ((1.5, 2), (2.0, 2), (2.5, 1.7), (2.5, 1.5), (3.0, 1.4))[s - 1]
    h, w = x.shape[:2]
    mapsize = max(256, 2 ** int(math.ceil(math.log2(max(h, w)))))
    mx = x.max()
    out = x + c[0] * _plasma(mapsize, c[1], rng)[:h, :w][..., None]
    return out * mx / (mx + c[0])


def brightness(x, s, rng):
    c = (0.1, 0.2, 0.3, 0.4, 0.5)[s - 1]
    hsv = cv2.cvtColor(np.clip(x, 0, 1).astype(np.float32), cv2.COLOR_RGB2HSV)
    hsv[..., 2] = np.clip(hsv[..., 2] + c, 0, 1)
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)


def contrast(x, s, rng):
    c = (0.4, 0.3, 0.2, 0.1, 0.05)[s - 1]
    means = x.mean(axis=(0, 1), keepdims=True)
    return (x - means) * c + means


def elastic(x, s, rng):
    h, w = x.shape[:2]
    sigma = np.array([h, w]) * 0.01
    alpha = (250 * 0.05, 250 * 0.065, 250 * 0.085, 250 * 0.1, 250 * 0.12)[s - 1]
    max_d = h * 0.005
    dx = gaussian_filter(rng.uniform(-max_d, max_d, size=(h, w)), sigma, mode="reflect", truncate=3) * alpha
    dy = gaussian_filter(rng.uniform(-max_d, max_d, size=(h, w)), sigma, mode="reflect", truncate=3) * alpha
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.array([yy + dy, xx + dx])
    return np.stack([map_coordinates(x[..., c], coords, order=1, mode="reflect")
                     for c in range(x.shape[2])], axis=2)


def jpeg(x, s, rng):
    quality = JPEG_QUALITY[s - 1]
    u8 = np.clip(np.rint(x * 255), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8).save(buf, format="JPEG", quality=quality)
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def pixelate(x, s, rng):
    c = (0.6, 0.5, 0.4, 0.3, 0.25)[s - 1]
    h, w = x.shape[:2]
    u8 = np.clip(np.rint(x * 255), 0, 255).astype(np.uint8)
    im = Image.fromarray(u8).resize((max(1, int(w * c)), max(1, int(h * c))), Image.BOX)
    return np.asarray(im.resize((w, h), Image.BOX), dtype=np.float32) / 255.0


_FUNCS = {f.__name__: f for f in (
    gaussian_noise, shot_noise, impulse_noise, defocus_blur, glass_blur, motion_blur, zoom_blur,
    snow, frost, fog, brightness, contrast, elastic, jpeg, pixelate,
)}


def apply_corruption(image: np.ndarray, spec: CorruptionSpec | tuple, rng) -> np.ndarray:
    """Corrupt a ``[3, H, W]`` image; ``rng`` is a numpy Generator or an integer seed."""
    if not isinstance(spec, CorruptionSpec):
        spec = CorruptionSpec(*spec)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    x = np.ascontiguousarray(image.transpose(1, 2, 0), dtype=np.float32)
    out = _FUNCS[spec.kind](x, spec.severity, rng)
    out = np.clip(np.asarray(out, dtype=np.float32), 0.0, 1.0)
    return np.ascontiguousarray(out.transpose(2, 0, 1))
