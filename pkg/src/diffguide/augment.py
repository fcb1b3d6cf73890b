"""Strong (color + spatial) augmentation and image-to-image domain augmentation.

Images are float arrays ``[C, H, W]`` in [0, 1]. Geometry uses continuous
pixel coordinates: pixel ``i`` covers ``[i, i+1)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import cv2
import numpy as np

from .harness.data import ImageSample

COLOR_OPS = ("color_jitter", "contrast", "equalize", "sharpness")
SPATIAL_OPS = ("rotate", "shear", "translate")
DOMAIN_OPS = ("fda", "histogram", "pixel_distribution")


@dataclass
class AugmentationConfig:
    probs: dict = field(default_factory=lambda: {
        "color_jitter": 0.5, "contrast": 0.3, "equalize": 0.2, "sharpness": 0.3,
        "rotate": 0.3, "shear": 0.3, "translate": 0.3,
    })
    jitter_brightness: float = 0.4
    jitter_saturation: float = 0.4
    contrast_range: tuple = (0.6, 1.4)
    sharpness_range: tuple = (0.0, 2.0)
    rotate_deg: float = 10.0
    shear_deg: float = 10.0
    translate_frac: float = 0.1
    fill: float = 0.5
    domain_prob: float = 0.5
    domain_ops: tuple = DOMAIN_OPS
    fda_beta: float = 0.01
    rng_seed: int = 0

    def __post_init__(self):
        merged = dict.fromkeys(COLOR_OPS + SPATIAL_OPS, 0.0)
        unknown = set(self.probs) - set(merged)
        if unknown:
            raise ValueError(f"unknown augmentation ops {sorted(unknown)}")
        merged.update(self.probs)
        self.probs = merged
        for name, p in list(merged.items()) + [("domain_prob", self.domain_prob)]:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability for {name} must lie in [0, 1], got {p}")
        if not 0.0 <= self.fda_beta <= 0.5:
            raise ValueError(f"fda_beta must lie in [0, 0.5], got {self.fda_beta}")
        for op in self.domain_ops:
            if op not in DOMAIN_OPS:
                raise ValueError(f"unknown domain augmentation {op!r}")
        self.contrast_range = tuple(self.contrast_range)
        self.sharpness_range = tuple(self.sharpness_range)
        self.domain_ops = tuple(self.domain_ops)

    @classmethod
    def from_dict(cls, d: dict | None) -> "AugmentationConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown augmentation keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(probs={}, domain_prob=0.0)


# -- color ops -------------------------------------------------------------

def _gray(img: np.ndarray) -> np.ndarray:
    if img.shape[0] == 1:
        return img[0]
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def adjust_brightness(img, factor):
    return np.clip(img * factor, 0.0, 1.0)


def adjust_saturation(img, factor):
    g = _gray(img)[None]
    return np.clip(g + factor * (img - g), 0.0, 1.0)


def adjust_contrast(img, factor):
    m = _gray(img).mean()
    return np.clip(m + factor * (img - m), 0.0, 1.0)


def equalize(img):
    u8 = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return np.stack([cv2.equalizeHist(np.ascontiguousarray(c)) for c in u8]).astype(np.float32) / 255.0


_SMOOTH = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float32) / 13.0


def adjust_sharpness(img, factor):
    blurred = np.stack([cv2.filter2D(c, -1, _SMOOTH, borderType=cv2.BORDER_REPLICATE) for c in img])
    return np.clip(blurred + factor * (img - blurred), 0.0, 1.0)


# -- spatial ops -----------------------------------------------------------

def rotation_matrix(deg: float, size: tuple[int, int]) -> np.ndarray:
    """2x3 map rotating the image about its center (positive = counter-clockwise on screen)."""
    h, w = size
    cx, cy = w / 2.0, h / 2.0
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    # y axis points down, so a visual CCW rotation is (x, y) -> (c x + s y, -s x + c y)
    r = np.array([[c, s], [-s, c]])
    t = np.array([cx, cy]) - r @ np.array([cx, cy])
    return np.hstack([r, t[:, None]])


def shear_matrix(deg: float, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    k = math.tan(math.radians(deg))
    cy = h / 2.0
    return np.array([[1.0, k, -k * cy], [0.0, 1.0, 0.0]])


def translation_matrix(dx: float, dy: float) -> np.ndarray:
    return np.array([[1.0, 0.0, dx], [0.0, 1.0, dy]])


def affine_boxes(boxes: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Axis-aligned hull of each box's four corners under the 2x3 map ``m``."""
    if len(boxes) == 0:
        return boxes.reshape(0, 4).astype(np.float32)
    b = boxes.astype(np.float64)
    corners = np.stack([b[:, [0, 1]], b[:, [2, 1]], b[:, [0, 3]], b[:, [2, 3]]], axis=1)
    mapped = corners @ m[:, :2].T + m[:, 2]
    return np.concatenate([mapped.min(axis=1), mapped.max(axis=1)], axis=1).astype(np.float32)


def warp_image(img: np.ndarray, m: np.ndarray, fill: float = 0.5) -> np.ndarray:
    h, w = img.shape[1:]
    # continuous-coordinate map -> pixel-center map used by OpenCV
    shift = np.array([[1.0, 0.0, 0.5], [0.0, 1.0, 0.5], [0.0, 0.0, 1.0]])
    unshift = np.array([[1.0, 0.0, -0.5], [0.0, 1.0, -0.5]])
    mp = unshift @ np.vstack([m, [0.0, 0.0, 1.0]]) @ shift
    hwc = np.ascontiguousarray(img.transpose(1, 2, 0))
    out = cv2.warpAffine(hwc, mp, (w, h), flags=cv2.INTER_LINEAR,
                         borderMode=cv2.BORDER_CONSTANT, borderValue=(fill,) * 3)
    if out.ndim == 2:
        out = out[:, :, None]
    return np.ascontiguousarray(out.transpose(2, 0, 1)).astype(img.dtype)


def warp_sample(sample: ImageSample, m: np.ndarray, fill: float = 0.5, clip: bool = True) -> ImageSample:
    """Warp image and boxes by the same map; clip boxes and drop those under 1 px area."""
    boxes = affine_boxes(sample.boxes, m)
    labels = sample.labels
    if clip:
        h, w = sample.size
        boxes = boxes.copy()
        boxes[:, 0::2] = boxes[:, 0::2].clip(0, w)
        boxes[:, 1::2] = boxes[:, 1::2].clip(0, h)
        area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
        keep = area >= 1.0
        boxes, labels = boxes[keep], labels[keep]
    return sample.replace(image=warp_image(sample.image, m, fill), boxes=boxes, labels=labels)


def strong_augment(sample: ImageSample, cfg: AugmentationConfig, rng: np.random.Generator) -> ImageSample:
    p = cfg.probs
    img = sample.image
    if rng.random() < p["color_jitter"]:
        bf = rng.uniform(1 - cfg.jitter_brightness, 1 + cfg.jitter_brightness)
        sf = rng.uniform(1 - cfg.jitter_saturation, 1 + cfg.jitter_saturation)
        img = adjust_saturation(adjust_brightness(img, bf), sf)
    if rng.random() < p["contrast"]:
        img = adjust_contrast(img, rng.uniform(*cfg.contrast_range))
    if rng.random() < p["equalize"]:
        img = equalize(img)
    if rng.random() < p["sharpness"]:
        img = adjust_sharpness(img, rng.uniform(*cfg.sharpness_range))
    out = sample.replace(image=img.astype(np.float32))
    size = sample.size
    if rng.random() < p["rotate"]:
        out = warp_sample(out, rotation_matrix(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg), size), cfg.fill)
    if rng.random() < p["shear"]:
        out = warp_sample(out, shear_matrix(rng.uniform(-cfg.shear_deg, cfg.shear_deg), size), cfg.fill)
    if rng.random() < p["translate"]:
        h, w = size
        dx = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * w
        dy = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * h
        out = warp_sample(out, translation_matrix(dx, dy), cfg.fill)
    return out


# -- domain-level ops ------------------------------------------------------

def fda_window(beta: float, height: int, width: int) -> int:
    """Half-width ``b`` of the swapped low-frequency square (side ``2b + 1``); -1 for none."""
    if beta == 0:
        return -1
    return int(math.floor(beta * min(height, width)))


def fda_transfer(src: np.ndarray, ref: np.ndarray, beta: float) -> np.ndarray:
    """Replace the low-frequency amplitude of ``src`` with that of ``ref``, keeping src phase."""
    if not 0.0 <= beta <= 0.5:
        raise ValueError(f"beta must lie in [0, 0.5], got {beta}")
    if src.shape != ref.shape:
        raise ValueError(f"src {src.shape} and ref {ref.shape} must match; resize ref first")
    h, w = src.shape[-2:]
    b = fda_window(beta, h, w)
    if b < 0:
        return src.copy()
    axes = (-2, -1)
    fs = np.fft.fftshift(np.fft.fft2(src.astype(np.float64), axes=axes), axes=axes)
    fr = np.fft.fftshift(np.fft.fft2(ref.astype(np.float64), axes=axes), axes=axes)
    amp, pha = np.abs(fs), np.angle(fs)
    ch, cw = h // 2, w // 2
    win = (..., slice(max(ch - b, 0), ch + b + 1), slice(max(cw - b, 0), cw + b + 1))
    amp[win] = np.abs(fr)[win]
    out = np.fft.ifft2(np.fft.ifftshift(amp * np.exp(1j * pha), axes=axes), axes=axes).real
    return np.clip(out, 0.0, 1.0).astype(src.dtype)


def histogram_match(src: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Per-channel monotone remap of ``src`` onto the empirical distribution of ``ref``."""
    out = np.empty_like(src)
    for c in range(src.shape[0]):
        s_vals, s_idx, s_counts = np.unique(src[c].ravel(), return_inverse=True, return_counts=True)
        r_vals, r_counts = np.unique(ref[c].ravel(), return_counts=True)
        s_q = np.cumsum(s_counts) / src[c].size
        r_q = np.cumsum(r_counts) / ref[c].size
        mapped = np.interp(s_q, r_q, r_vals)
        out[c] = mapped[s_idx].reshape(src[c].shape)
    return out


def pixel_distribution_match(src: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Per-channel affine remap matching ``ref``'s mean and standard deviation.

    A constant ``src`` channel is only mean-shifted.
    """
    out = np.empty_like(src)
    for c in range(src.shape[0]):
        mu_s, sd_s = float(src[c].mean()), float(src[c].std())
        mu_r, sd_r = float(ref[c].mean()), float(ref[c].std())
        if sd_s == 0.0:
            out[c] = src[c] - mu_s + mu_r
        else:
            out[c] = (src[c] - mu_s) * (sd_r / sd_s) + mu_r
    return np.clip(out, 0.0, 1.0)


def _match_size(ref: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if ref.shape[1:] == tuple(size):
        return ref
    hwc = cv2.resize(np.ascontiguousarray(ref.transpose(1, 2, 0)), (size[1], size[0]),
                     interpolation=cv2.INTER_LINEAR)
    return hwc.reshape(size[0], size[1], -1).transpose(2, 0, 1)


def domain_augment(sample: ImageSample, ref: np.ndarray, op: str, cfg: AugmentationConfig) -> ImageSample:
    ref = _match_size(ref, sample.size)
    if op == "fda":
        img = fda_transfer(sample.image, ref, cfg.fda_beta)
    elif op == "histogram":
        img = histogram_match(sample.image, ref)
    elif op == "pixel_distribution":
        img = pixel_distribution_match(sample.image, ref)
    else:
        raise ValueError(f"unknown domain augmentation {op!r}")
    return sample.replace(image=img.astype(np.float32))


def augment_sample(sample: ImageSample, pool: list[ImageSample], cfg: AugmentationConfig,
                   rng: np.random.Generator) -> ImageSample:
    """Full training-time pipeline: optional source-to-source domain op, then strong aug."""
    if cfg.domain_prob > 0 and cfg.domain_ops and rng.random() < cfg.domain_prob:
        ref = pool[int(rng.integers(len(pool)))].image
        op = cfg.domain_ops[int(rng.integers(len(cfg.domain_ops)))]
        sample = domain_augment(sample, ref, op, cfg)
    return strong_augment(sample, cfg, rng)
