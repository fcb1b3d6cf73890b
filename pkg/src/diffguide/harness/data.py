"""Dataset ingestion and the synthetic two-domain fixture.

Annotations are stored one image per line (JSON Lines)::

    {"image_id": 3, "file_name": "img_0003.png", "domain": "A", "width": 64, "height": 64,
     "annotations": [{"bbox": [x, y, w, h], "category_id": 1}]}

``bbox`` uses top-left + size; it is converted to corner form on load.
``category_id`` indexes the category list in the config (0-based).
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


@dataclass
class ImageSample:
    image: np.ndarray  # float32 [3, H, W] in [0, 1]
    boxes: np.ndarray  # float32 [N, 4] as (x1, y1, x2, y2)
    labels: np.ndarray  # int64 [N]
    image_id: int | str
    domain_tag: str = ""

    def replace(self, **kw) -> "ImageSample":
        return dataclasses.replace(self, **kw)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_image(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def xywh_to_xyxy(b) -> list[float]:
    x, y, w, h = (float(v) for v in b)
    return [x, y, x + w, y + h]


def load_dataset(annotation_path, image_root=None, num_classes: int | None = None) -> list[ImageSample]:
    """Parse a JSON Lines annotation file and load the referenced images.

    Zero-area boxes are dropped (with a warning count). Every missing image is
    reported in a single error.
    """
    annotation_path = Path(annotation_path)
    image_root = Path(image_root) if image_root is not None else annotation_path.parent
    records = []
    with annotation_path.open("r", encoding="utf-8") as fh:
        offset = 0
        for lineno, line in enumerate(fh, start=1):
            line_offset, offset = offset, offset + len(line.encode("utf-8"))
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rec["image_id"], rec["file_name"]
                anns = rec.get("annotations", [])
                for a in anns:
                    if len(a["bbox"]) != 4:
                        raise ValueError("bbox must have 4 numbers")
                    int(a["category_id"])
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetError(
                    f"{annotation_path}: malformed record at line {lineno} (byte offset {line_offset}): {exc}"
                ) from exc
            records.append(rec)

    missing = [r["image_id"] for r in records if not (image_root / r["file_name"]).is_file()]
    if missing:
        raise DatasetError(f"missing image files for ids: {missing}")

    samples, dropped = [], 0
    for rec in records:
        boxes, labels = [], []
        for a in rec.get("annotations", []):
            b = xywh_to_xyxy(a["bbox"])
            if b[2] <= b[0] or b[3] <= b[1]:
                dropped += 1
                continue
            label = int(a["category_id"])
            if num_classes is not None and not 0 <= label < num_classes:
                raise DatasetError(f"image {rec['image_id']}: label {label} outside [0, {num_classes})")
            boxes.append(b)
            labels.append(label)
        samples.append(ImageSample(
            image=read_image(image_root / rec["file_name"]),
            boxes=np.asarray(boxes, dtype=np.float32).reshape(-1, 4),
            labels=np.asarray(labels, dtype=np.int64),
            image_id=rec["image_id"],
            domain_tag=str(rec.get("domain", "")),
        ))
    if dropped:
        log.warning("dropped %d zero-area annotations from %s", dropped, annotation_path)
    return samples


def write_dataset(samples, annotation_path, image_root=None) -> None:
    annotation_path = Path(annotation_path)
    image_root = Path(image_root) if image_root is not None else annotation_path.parent
    image_root.mkdir(parents=True, exist_ok=True)
    with annotation_path.open("w", encoding="utf-8") as fh:
        for s in samples:
            name = f"img_{s.image_id}.png"
            write_image(image_root / name, s.image)
            anns = [
                {"bbox": [float(b[0]), float(b[1]), float(b[2] - b[0]), float(b[3] - b[1])],
                 "category_id": int(l)}
                for b, l in zip(s.boxes, s.labels)
            ]
            fh.write(json.dumps({
                "image_id": s.image_id, "file_name": name, "domain": s.domain_tag,
                "height": int(s.image.shape[1]), "width": int(s.image.shape[2]),
                "annotations": anns,
            }) + "\n")


# -- synthetic fixture -------------------------------------------------------

CATEGORIES = ("square", "disk", "triangle")

# Each domain: background palette, object palette, texture strength, contrast.
DOMAINS = {
    "A": dict(bg=((0.80, 0.82, 0.86), (0.70, 0.78, 0.70)),
              fg=((0.85, 0.15, 0.15), (0.15, 0.25, 0.85), (0.15, 0.60, 0.20), (0.90, 0.65, 0.10)),
              texture=0.03, stripes=0.0, gain=1.0, offset=0.0),
    "B": dict(bg=((0.52, 0.48, 0.56), (0.58, 0.52, 0.42)),
              fg=((0.75, 0.20, 0.60), (0.10, 0.55, 0.60), (0.45, 0.45, 0.10), (0.35, 0.20, 0.10)),
              texture=0.07, stripes=0.05, gain=0.85, offset=0.05),
}


def _shape_mask(kind: int, x1: float, y1: float, size: float, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32) + 0.5
    if kind == 0:
        return (xx >= x1) & (xx < x1 + size) & (yy >= y1) & (yy < y1 + size)
    if kind == 1:
        r = size / 2
        return (xx - x1 - r) ** 2 + (yy - y1 - r) ** 2 <= r * r
    # upward triangle spanning the box
    rel_y = (yy - y1) / size
    half = 0.5 * rel_y * size
    cx = x1 + size / 2
    return (rel_y >= 0) & (rel_y <= 1) & (np.abs(xx - cx) <= half)


def render_sample(rng: np.random.Generator, image_id, domain: str, size: int = 64,
                  max_objects: int = 3) -> ImageSample:
    d = DOMAINS[domain]
    h = w = size
    bg = np.array(d["bg"][rng.integers(len(d["bg"]))], dtype=np.float32)
    img = np.empty((3, h, w), dtype=np.float32)
    img[:] = bg[:, None, None]
    img += rng.normal(0.0, d["texture"], size=(1, h, w)).astype(np.float32)
    if d["stripes"]:
        period = rng.uniform(5, 9)
        phase = rng.uniform(0, 2 * np.pi)
        xx = np.arange(w, dtype=np.float32)[None, :] + np.arange(h, dtype=np.float32)[:, None]
        img += d["stripes"] * np.sin(2 * np.pi * xx / period + phase)[None]
    boxes, labels = [], []
    n = int(rng.integers(1, max_objects + 1))
    for _ in range(50):
        if len(boxes) == n:
            break
        s = float(rng.integers(12, 27))
        x1 = float(rng.integers(1, w - int(s) - 1))
        y1 = float(rng.integers(1, h - int(s) - 1))
        cand = np.array([x1, y1, x1 + s, y1 + s])
        if any(not (cand[2] + 2 <= b[0] or b[2] + 2 <= cand[0] or cand[3] + 2 <= b[1] or b[3] + 2 <= cand[1])
               for b in boxes):
            continue
        kind = int(rng.integers(len(CATEGORIES)))
        color = np.array(d["fg"][rng.integers(len(d["fg"]))], dtype=np.float32)
        color = np.clip(color + rng.normal(0, 0.04, 3), 0, 1).astype(np.float32)
        mask = _shape_mask(kind, x1, y1, s, h, w)
        img[:, mask] = color[:, None]
        boxes.append(cand)
        labels.append(kind)
    img = np.clip(d["gain"] * img + d["offset"], 0.0, 1.0).astype(np.float32)
    return ImageSample(
        image=img,
        boxes=np.asarray(boxes, dtype=np.float32).reshape(-1, 4),
        labels=np.asarray(labels, dtype=np.int64),
        image_id=image_id,
        domain_tag=domain,
    )


def make_fixture(out_dir, seed: int = 0, n_train: int = 256, n_test: int = 64, size: int = 64) -> dict:
    """Write train (domain A) and test splits (domains A and B) under ``out_dir``.

    Returns the annotation paths by split name.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    splits = {
        "train_A": ("A", n_train),
        "test_A": ("A", n_test),
        "test_B": ("B", n_test),
    }
    paths = {}
    next_id = 0
    for name, (domain, n) in splits.items():
        samples = []
        for _ in range(n):
            samples.append(render_sample(rng, next_id, domain, size))
            next_id += 1
        ann = out_dir / f"{name}.jsonl"
        write_dataset(samples, ann, out_dir / "images")
        paths[name] = ann
    return paths
