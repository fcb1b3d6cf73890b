"""Report emission: clean mAP, the 75-cell corruption grid and calibration."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np
import torch

from ..evaluation.corruptions import CORRUPTIONS, CorruptionSpec, all_specs, apply_corruption
from ..evaluation.metrics import (
    IOU_RANGE,
    ap_range,
    d_ece,
    detections_from_boxlists,
    map50,
    mpc,
    per_class_ap,
    rpc,
)
from ..fusion import ConfigurationError
from .config import RunConfig
from .data import ImageSample
from .train import iteration_seed, load_model, load_split

log = logging.getLogger(__name__)

MODES = ("clean", "corruption", "calibration")


def ground_truth(samples: list[ImageSample]) -> dict:
    return {s.image_id: (s.boxes, s.labels) for s in samples}


def predict(model, samples: list[ImageSample], batch_size: int = 8, noise_seed: int = 0) -> list:
    """Detections for every sample, batched; the diffusion noise seed is fixed per batch index."""
    model.eval()
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        images = torch.from_numpy(np.stack([s.image for s in chunk])).float()
        res = model.detect(images, noise_seed=noise_seed + start)
        out.extend(detections_from_boxlists([s.image_id for s in chunk], res))
    return out


def clean_metrics(dets, samples, num_classes: int) -> dict:
    gts = ground_truth(samples)
    classes = list(range(num_classes))
    pc = per_class_ap(dets, gts, classes, 0.5)
    return {
        "map50": map50(dets, gts, classes),
        "ap50_95": ap_range(dets, gts, classes),
        "per_class_ap50": {str(c): a.ap for c, a in pc.items()},
        "num_images": len(samples),
        "num_detections": len(dets),
    }


def corrupt_samples(samples: list[ImageSample], spec: CorruptionSpec, seed: int) -> list[ImageSample]:
    stream = CORRUPTIONS.index(spec.kind) * 10 + spec.severity
    return [s.replace(image=apply_corruption(s.image, spec, iteration_seed(seed, i, stream)))
            for i, s in enumerate(samples)]


def evaluate_model(model, cfg: RunConfig, samples: list[ImageSample], mode: str, seed: int = 0,
                   out_dir=None, categories=None) -> dict:
    """Compute one report; optionally write it (JSON, plus CSV for clean/corruption)."""
    if mode not in MODES:
        raise ConfigurationError(f"mode must be one of {MODES}")
    ev = cfg.eval
    categories = list(categories or cfg.data["categories"])
    nc = len(categories)
    bs, ns = int(ev["batch_size"]), int(ev["noise_seed"])
    if mode == "clean":
        report = clean_metrics(predict(model, samples, bs, ns), samples, nc)
    elif mode == "calibration":
        dets = predict(model, samples, bs, ns)
        report = d_ece(dets, ground_truth(samples), int(ev["calibration_bins"])).as_dict()
    else:
        limit = ev.get("corruption_max_images")
        subset = samples[:limit] if limit else samples
        # the relative score needs the clean result on the same images, so it is always computed here
        clean = clean_metrics(predict(model, subset, bs, ns), subset, nc)
        cells = []
        for spec in all_specs():
            corrupted = corrupt_samples(subset, spec, seed)
            m = clean_metrics(predict(model, corrupted, bs, ns), corrupted, nc)
            cells.append({"corruption": spec.kind, "severity": spec.severity, **m})
        grid = {(c["corruption"], c["severity"]): c["ap50_95"] for c in cells}
        m_pc = mpc(grid)
        report = {
            "clean": clean,
            "cells": cells,
            "mpc": m_pc,
            "rpc": rpc(m_pc, clean["ap50_95"]) if clean["ap50_95"] > 0 else None,
            "num_images": len(subset),
        }
    report["mode"] = mode
    if out_dir is not None:
        write_report(report, Path(out_dir), categories)
    return report


def write_report(report: dict, out_dir: Path, categories: list[str]) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    mode = report["mode"]
    paths = [out_dir / f"{mode}.json"]
    paths[0].write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if mode == "clean":
        paths.append(out_dir / "clean.csv")
        with paths[-1].open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["category", "ap50"])
            for i, name in enumerate(categories):
                w.writerow([name, f"{report['per_class_ap50'][str(i)]:.6f}"])
            w.writerow(["mean", f"{report['map50']:.6f}"])
            w.writerow(["ap50_95", f"{report['ap50_95']:.6f}"])
    elif mode == "corruption":
        paths.append(out_dir / "corruption.csv")
        with paths[-1].open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["corruption", "severity", *categories, "map50", "ap50_95"])
            for c in report["cells"]:
                w.writerow([c["corruption"], c["severity"],
                            *(f"{c['per_class_ap50'][str(i)]:.6f}" for i in range(len(categories))),
                            f"{c['map50']:.6f}", f"{c['ap50_95']:.6f}"])
    return paths


def evaluate(cfg: RunConfig | None, checkpoint, mode: str, out_dir=None, seed: int = 0,
             samples: list[ImageSample] | None = None) -> dict:
    """Load the EMA model of ``checkpoint`` and write the requested report.

    When ``cfg`` is given it must describe the same model as the checkpoint;
    its data and eval sections are used.
    """
    model, ck_cfg, _ = load_model(checkpoint, "ema")
    if cfg is None:
        cfg = ck_cfg
    elif cfg.model_section() != ck_cfg.model_section():
        raise ConfigurationError("checkpoint was trained with a different model configuration")
    if samples is None:
        samples = load_split(cfg, "eval")
    return evaluate_model(model, cfg, samples, mode, seed, out_dir)


__all__ = ["IOU_RANGE", "MODES", "evaluate", "evaluate_model", "predict", "clean_metrics",
           "corrupt_samples", "write_report"]
