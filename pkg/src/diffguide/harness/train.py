"""Training loops for the baseline, diffusion-detector and guided regimes."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..alignment import (
    cross_feature_loss,
    feature_align_loss,
    kd_cls_loss,
    kd_reg_loss,
    shared_roi_predictions,
    total_loss,
)
from ..augment import augment_sample
from ..detector.boxes import BoxList
from ..detector.model import ConvBackbone, TwoStageDetector
from ..diffusion import ToyDenoiser, build_noise_schedule, sample_timesteps
from ..fusion import ConfigurationError, DiffusionBackbone
from .checkpoint import Checkpoint, load_checkpoint, pack_state, save_checkpoint
from .config import RunConfig, fixture_dir
from .data import ImageSample, load_dataset, make_fixture

log = logging.getLogger(__name__)

KIND_STUDENT = "student"
KIND_DIFFUSION = "diffusion_detector"


# -- model construction ----------------------------------------------------

def build_student(cfg: RunConfig, init_seed: int) -> TwoStageDetector:
    det = cfg.detector_config()
    return TwoStageDetector(ConvBackbone(det.base_channels), det, init_seed)


def build_diffusion_detector(cfg: RunConfig, init_seed: int) -> TwoStageDetector:
    d = cfg.diffusion
    det = cfg.detector_config()
    schedule = build_noise_schedule(d["num_train_steps"], "linear", d["beta_min"], d["beta_max"])
    plan = sample_timesteps(d["T"], d["max_timestep"], d["policy"])
    denoiser = ToyDenoiser(width=d["denoiser_width"], seed=d["denoiser_seed"])
    backbone = DiffusionBackbone(
        denoiser, schedule, plan,
        reduce_channels=d["reduce_channels"], base_channels=det.base_channels,
        share_bottleneck=d["share_bottleneck"], per_level_weights=d["per_level_weights"],
    )
    return TwoStageDetector(backbone, det, init_seed)


def build_model(kind: str, cfg: RunConfig, init_seed: int = 0) -> TwoStageDetector:
    if kind == KIND_STUDENT:
        return build_student(cfg, init_seed)
    if kind == KIND_DIFFUSION:
        return build_diffusion_detector(cfg, init_seed)
    raise ConfigurationError(f"unknown model kind {kind!r}")


def freeze(model: torch.nn.Module) -> torch.nn.Module:
    model.requires_grad_(False)
    model.eval()
    return model


def load_model(path, which: str = "ema") -> tuple[TwoStageDetector, RunConfig, dict]:
    """Rebuild the detector stored in a checkpoint (EMA weights by default)."""
    ckpt = load_checkpoint(path)
    cfg = RunConfig(ckpt.meta["config"])
    model = build_model(ckpt.meta["kind"], cfg)
    state = ckpt.state(which)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise ConfigurationError(f"{path}: checkpoint does not match its config: {exc}") from exc
    return model, cfg, ckpt.meta


# -- EMA -------------------------------------------------------------------

@torch.no_grad()
def ema_update(ema_params: dict, live_params: dict, decay: float) -> dict:
    """In place: ``ema <- decay * ema + (1 - decay) * live`` for floating-point entries."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must lie in [0, 1]")
    if ema_params.keys() != live_params.keys():
        raise ValueError("EMA and live parameter trees differ: "
                         f"{sorted(set(ema_params) ^ set(live_params))[:5]}")
    for k, e in ema_params.items():
        v = live_params[k]
        if e.shape != v.shape:
            raise ValueError(f"shape mismatch for {k}")
        if e.is_floating_point():
            e.mul_(decay).add_(v.detach(), alpha=1.0 - decay)
        else:
            e.copy_(v)
    return ema_params


def effective_ema_decay(decay: float, step: int, warmup: bool) -> float:
    # (1 + n) / (10 + n) ramp keeps early averages from being dominated by the init
    return min(decay, (1.0 + step) / (10.0 + step)) if warmup else decay


# -- data ------------------------------------------------------------------

def resolve_data(cfg: RunConfig, split: str) -> tuple[Path, Path | None]:
    data = cfg.data
    ann = data.get(split)
    images = data.get(f"{split}_images")
    if ann is None:
        fixture = fixture_dir()
        name = "train_A" if split == "train" else "test_B"
        ann = fixture / f"{name}.jsonl"
        if not ann.is_file():
            log.info("generating synthetic fixture under %s", fixture)
            make_fixture(fixture)
        images = fixture / "images"
    return Path(ann), (Path(images) if images else None)


def load_split(cfg: RunConfig, split: str) -> list[ImageSample]:
    ann, images = resolve_data(cfg, split)
    return load_dataset(ann, images, num_classes=len(cfg.data["categories"]))


def to_batch(samples: list[ImageSample]) -> tuple[torch.Tensor, list[BoxList]]:
    images = torch.from_numpy(np.stack([s.image for s in samples])).float()
    gts = [BoxList(torch.from_numpy(s.boxes).float().reshape(-1, 4), torch.from_numpy(s.labels).long())
           for s in samples]
    return images, gts


class BatchSampler:
    """Epoch-wise shuffled batches from a seeded numpy generator."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n == 0:
            raise ConfigurationError("training set is empty")
        self.n, self.bs, self.rng = n, batch_size, rng
        self.order, self.pos = self.rng.permutation(n), 0

    def next(self) -> list[int]:
        out = []
        while len(out) < self.bs:
            if self.pos == self.n:
                self.order, self.pos = self.rng.permutation(self.n), 0
            take = min(self.bs - len(out), self.n - self.pos)
            out.extend(int(i) for i in self.order[self.pos:self.pos + take])
            self.pos += take
        return out


def learning_rate(cfg: RunConfig, it: int) -> float:
    lr = cfg.learning_rate
    for frac in cfg.lr_steps:
        if it >= int(frac * cfg.iterations):
            lr *= 0.1
    if it < cfg.warmup_iters:
        k = it / cfg.warmup_iters
        lr *= cfg.warmup_ratio * (1 - k) + k
    return lr


def iteration_seed(seed: int, it: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, it, stream]).generate_state(1)[0])


# -- training --------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    checkpoints: list


def _load_teacher(source) -> TwoStageDetector:
    if isinstance(source, TwoStageDetector):
        if not isinstance(source.backbone, DiffusionBackbone):
            raise ConfigurationError("teacher must be a diffusion detector")
        return freeze(source)
    if source is None or not Path(source).is_file():
        raise ConfigurationError("guided regime needs an existing diffusion-detector checkpoint")
    teacher, _, meta = load_model(source, "ema")
    if meta["kind"] != KIND_DIFFUSION:
        raise ConfigurationError("teacher checkpoint must hold a diffusion detector")
    return freeze(teacher)


def train(cfg: RunConfig, out_dir, teacher_checkpoint=None, train_data: list[ImageSample] | None = None,
          progress: bool = False) -> TrainResult:
    """Run one regime end to end; writes checkpoints and a JSON-lines loss log.

    ``teacher_checkpoint`` (guided regime only) is a checkpoint path or an
    already loaded diffusion detector; either way the teacher is frozen.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    regime = cfg.regime
    seed = int(cfg.seed)

    teacher = None
    if regime == "guided":
        teacher = _load_teacher(teacher_checkpoint)
        if teacher.cfg.fpn_channels != cfg.detector_config().fpn_channels:
            raise ConfigurationError("teacher and student neck widths differ")

    kind = KIND_DIFFUSION if regime == "diffusion_detector" else KIND_STUDENT
    model = build_model(kind, cfg, init_seed=seed)
    model.train()
    ema = freeze(copy.deepcopy(model))
    ema_state = ema.state_dict()

    data = train_data if train_data is not None else load_split(cfg, "train")
    aug_cfg = cfg.augmentation_config()
    sampler = BatchSampler(len(data), cfg.batch_size, np.random.default_rng(seed))
    det_gen = torch.Generator().manual_seed(iteration_seed(seed, 0, 1))
    cross_gen = torch.Generator().manual_seed(iteration_seed(seed, 0, 2))

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    total_iters = int(cfg.iterations)
    every = max(1, int(round(cfg.checkpoint_fraction * total_iters)))
    log_path = out_dir / "loss_log.jsonl"
    saved = []
    lf, lo = float(cfg.lambda_feature), float(cfg.lambda_object)

    with log_path.open("w", encoding="utf-8") as log_fh:
        for it in range(total_iters):
            idx = sampler.next()
            batch = [augment_sample(data[i], data, aug_cfg,
                                    np.random.default_rng(iteration_seed(seed, it, 100 + k)))
                     for k, i in enumerate(idx)]
            images, gts = to_batch(batch)
            size = tuple(images.shape[-2:])
            noise_seed = iteration_seed(seed, it, 3)
            for g in opt.param_groups:
                g["lr"] = learning_rate(cfg, it)

            if cfg.share_cross_rng:
                cross_gen.set_state(det_gen.get_state())
            feats = model.extract(images, noise_seed)
            parts, props = model.losses(feats, gts, det_gen, size)
            terms = {"l_det": parts["l_det"]}
            if teacher is not None:
                with torch.no_grad():
                    t_feats = teacher.extract(images, noise_seed)
                terms["l_align"] = feature_align_loss(feats, t_feats)
                terms["l_cross"] = cross_feature_loss(t_feats, model, gts, cross_gen, size)
                p_out, q_out = shared_roi_predictions(props, t_feats, feats, teacher)
                terms["l_cls"] = kd_cls_loss(q_out.cls_logits, p_out.cls_logits, cfg.tau)
                terms["l_reg"] = kd_reg_loss(q_out.box_deltas, p_out.box_deltas)
            report = total_loss(terms, lf, lo)
            if not torch.isfinite(report.total):
                raise FloatingPointError(f"non-finite loss at iteration {it}: {report.record(it)}")

            opt.zero_grad(set_to_none=True)
            report.total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            ema_update(ema_state, model.state_dict(),
                       effective_ema_decay(cfg.ema_decay, it, cfg.ema_warmup))

            rec = report.record(it)
            log_fh.write(json.dumps(rec) + "\n")
            if progress and (it % 50 == 0 or it == total_iters - 1):
                log.info("it %d  total %.4f  det %.4f", it, rec["total"], rec["l_det"])
            if (it + 1) % every == 0 or it + 1 == total_iters:
                path = out_dir / f"ckpt_{it + 1:06d}.dgc"
                _save(model, ema, cfg, kind, it + 1, path)
                saved.append(path)

    final = out_dir / "final.dgc"
    _save(model, ema, cfg, kind, total_iters, final)
    return TrainResult(final, log_path, saved)


def _save(model, ema, cfg: RunConfig, kind: str, iteration: int, path: Path) -> None:
    tensors = pack_state("model", model.state_dict()) | pack_state("ema", ema.state_dict())
    meta = {"kind": kind, "iteration": iteration, "config": cfg.to_dict(), "config_hash": cfg.hash()}
    save_checkpoint(Checkpoint(tensors, meta), path)


def read_loss_log(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
