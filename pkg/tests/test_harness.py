import json
import logging

import numpy as np
import pytest
import torch
import yaml

from diffguide.cli import main
from diffguide.detector import BoxList, DetectorState
from diffguide.fusion import ConfigurationError
from diffguide.harness.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from diffguide.harness.config import load_config, preset
from diffguide.harness.data import DatasetError, load_dataset, render_sample, write_dataset
from diffguide.harness.evaluate import evaluate, evaluate_model
from diffguide.harness.train import (
    BatchSampler,
    ema_update,
    effective_ema_decay,
    learning_rate,
    load_model,
    read_loss_log,
    train,
)



# -- data ------------------------------------------------------------------

def write_jsonl(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))


def test_empty_annotation_file(tmp_path):
    (tmp_path / "ann.jsonl").write_text("")
    assert load_dataset(tmp_path / "ann.jsonl") == []


def test_xywh_conversion_and_zero_area_drop(tmp_path, caplog):
    s = render_sample(np.random.default_rng(0), 0, "A", 32)
    write_dataset([s], tmp_path / "x.jsonl")
    write_jsonl(tmp_path / "ann.jsonl", [{"image_id": 0, "file_name": "img_0.png", "annotations": [
        {"bbox": [10, 10, 20, 5], "category_id": 1}, {"bbox": [3, 3, 0, 4], "category_id": 0}]}])
    with caplog.at_level(logging.WARNING):
        (out,) = load_dataset(tmp_path / "ann.jsonl")
    assert out.boxes.tolist() == [[10, 10, 30, 15]] and out.labels.tolist() == [1]
    assert "dropped 1" in caplog.text


def test_fixture_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    samples = [render_sample(rng, i, "AB"[i % 2], 32) for i in range(3)]
    write_dataset(samples, tmp_path / "ann.jsonl", tmp_path / "img")
    back = load_dataset(tmp_path / "ann.jsonl", tmp_path / "img", num_classes=3)
    for a, b in zip(samples, back):
        assert a.image_id == b.image_id and a.domain_tag == b.domain_tag
        assert np.array_equal(a.labels, b.labels) and np.array_equal(a.boxes, b.boxes)
        assert np.max(np.abs(a.image - b.image)) <= 0.5 / 255 + 1e-6  # 8-bit storage


def test_missing_images_listed_together(tmp_path):
    write_jsonl(tmp_path / "ann.jsonl", [{"image_id": i, "file_name": f"{i}.png"} for i in (4, 9)])
    with pytest.raises(DatasetError, match=r"\[4, 9\]"):
        load_dataset(tmp_path / "ann.jsonl")


def test_malformed_record_reports_line_and_offset(tmp_path):
    good = json.dumps({"image_id": 0, "file_name": "a.png"}) + "\n"
    (tmp_path / "ann.jsonl").write_text(good + '{"image_id": 1,\n')
    with pytest.raises(DatasetError, match=f"line 2 \\(byte offset {len(good)}\\)"):
        load_dataset(tmp_path / "ann.jsonl")


def test_label_outside_category_set(tmp_path):
    s = render_sample(np.random.default_rng(0), 0, "A", 32)
    write_dataset([s.replace(labels=np.full_like(s.labels, 5))], tmp_path / "ann.jsonl")
    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "ann.jsonl", num_classes=3)


# -- config ----------------------------------------------------------------

def test_presets_and_yaml(tmp_path):
    full = preset("full")
    assert (full["iterations"], full["batch_size"], full["learning_rate"]) == (20000, 16, 0.02)
    assert full["ema_decay"] == 0.999 and full["diffusion"]["T"] == 5
    desk = load_config()
    assert desk.iterations == 500 and desk.batch_size == 8
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"preset": "full", "lambda_object": 0.25,
                                                     "diffusion": {"T": 3}}))
    cfg = load_config(tmp_path / "c.yaml", seed=4)
    assert cfg.lambda_object == 0.25 and cfg.diffusion["T"] == 3 and cfg.seed == 4
    assert cfg.diffusion["max_timestep"] == 100 and cfg.iterations == 20000


@pytest.mark.parametrize("bad", [{"regime": "semi"}, {"iterations": 0}, {"lambda_feature": -1},
                                 {"tau": 0}, {"ema_decay": 1.5}, {"diffusion": {"T": 200}},
                                 {"detector": {"bogus": 1}}, {"augmentation": {"fda_beta": 0.9}},
                                 {"not_a_key": 1}])
def test_invalid_configs(bad):
    with pytest.raises((ConfigurationError, ValueError)):
        load_config(**bad)


def test_config_hash_tracks_content():
    a, b = load_config(seed=1), load_config(seed=1)
    assert a.hash() == b.hash() and a.hash() != load_config(seed=2).hash()


# -- checkpoint ------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    ck = Checkpoint({"model/w": torch.randn(3, 4), "model/n": torch.tensor(7), "ema/w": torch.rand(2)},
                    {"kind": "student", "config": {"a": [1, 2]}})
    p1 = save_checkpoint(ck, tmp_path / "a.dgc")
    back = load_checkpoint(p1)
    p2 = save_checkpoint(back, tmp_path / "b.dgc")
    assert p1.read_bytes() == p2.read_bytes()
    assert torch.equal(back.state("model")["w"], ck.tensors["model/w"])
    assert back.meta == ck.meta


def test_checkpoint_rejects_foreign_files(tmp_path):
    (tmp_path / "x.dgc").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.dgc")


# -- EMA and schedule ------------------------------------------------------

def test_ema_update_oracles():
    live = {"w": torch.zeros(3), "step": torch.tensor(5)}
    ema = {"w": torch.ones(3), "step": torch.tensor(0)}
    ema_update(ema, live, 1.0)
    assert torch.equal(ema["w"], torch.ones(3))
    ema_update(ema, live, 0.999)
    assert torch.allclose(ema["w"], torch.full((3,), 0.999))
    ema_update(ema, live, 0.0)
    assert torch.equal(ema["w"], live["w"])


def test_ema_update_errors():
    with pytest.raises(ValueError):
        ema_update({"a": torch.zeros(1)}, {"b": torch.zeros(1)}, 0.5)
    with pytest.raises(ValueError):
        ema_update({"a": torch.zeros(1)}, {"a": torch.zeros(2)}, 0.5)
    with pytest.raises(ValueError):
        ema_update({"a": torch.zeros(1)}, {"a": torch.zeros(1)}, 1.5)


def test_ema_warmup_and_lr_schedule():
    assert effective_ema_decay(0.999, 0, True) == pytest.approx(0.1)
    assert effective_ema_decay(0.999, 10**6, True) == 0.999
    assert effective_ema_decay(0.9, 0, False) == 0.9
    cfg = load_config(preset_name="full")
    assert learning_rate(cfg, 0) == pytest.approx(0.02 * 0.001)
    assert learning_rate(cfg, 500) == pytest.approx(0.02)
    assert learning_rate(cfg, 14000) == pytest.approx(0.002)
    assert learning_rate(cfg, 19999) == pytest.approx(0.0002)


def test_batch_sampler_covers_epoch():
    s = BatchSampler(10, 4, np.random.default_rng(0))
    seen = s.next() + s.next() + s.next()[:2]
    assert sorted(seen) == list(range(10))


# -- training and evaluation -----------------------------------------------

@pytest.fixture(scope="module")
def small_data(fixture_dir):
    train_set = load_dataset(fixture_dir / "train_A.jsonl", fixture_dir / "images")[:64]
    eval_set = load_dataset(fixture_dir / "test_B.jsonl", fixture_dir / "images")[:16]
    return train_set, eval_set


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory, small_data):
    out = tmp_path_factory.mktemp("smoke")
    cfg = load_config(regime="baseline", iterations=50, seed=0)
    return cfg, train(cfg, out, train_data=small_data[0])


def test_smoke_run_loss_decreases_and_checkpoints(smoke_run):
    cfg, res = smoke_run
    log = read_loss_log(res.log_path)
    assert [r["iteration"] for r in log] == list(range(50))
    totals = np.array([r["total"] for r in log])
    ma = np.convolve(totals, np.ones(10) / 10, mode="valid")
    assert ma[-1] < ma[0]
    assert len(res.checkpoints) == 10  # every 10% of the run
    meta = load_checkpoint(res.checkpoint).meta
    assert meta["config_hash"] == cfg.hash() and meta["kind"] == "student"


def test_guided_needs_teacher(tmp_path, small_data):
    with pytest.raises(ConfigurationError):
        train(load_config(regime="guided", iterations=2), tmp_path, train_data=small_data[0])
    with pytest.raises(ConfigurationError):
        train(load_config(regime="guided", iterations=2), tmp_path, teacher_checkpoint=tmp_path / "nope.dgc",
              train_data=small_data[0])


def test_guided_regime_trains_only_the_student(tmp_path, small_data):
    teacher = train(load_config(regime="diffusion_detector", iterations=2), tmp_path / "t",
                    train_data=small_data[0])
    t_model, _, _ = load_model(teacher.checkpoint)
    before = DetectorState.of(t_model)
    res = train(load_config(regime="guided", iterations=3), tmp_path / "g", teacher_checkpoint=teacher.checkpoint,
                train_data=small_data[0])
    log = read_loss_log(res.log_path)
    assert all(r["l_align"] > 0 and r["l_cross"] > 0 for r in log)
    t_after, _, _ = load_model(teacher.checkpoint)
    assert before.identical_to(t_after)
    student, _, meta = load_model(res.checkpoint)
    assert meta["kind"] == "student"


def test_diffusion_regime_keeps_denoiser_frozen(tmp_path, small_data):
    res = train(load_config(regime="diffusion_detector", iterations=2), tmp_path, train_data=small_data[0])
    model, cfg, _ = load_model(res.checkpoint, "model")
    fresh = model.backbone.denoiser.__class__(width=cfg.diffusion["denoiser_width"], seed=cfg.diffusion["denoiser_seed"])
    assert DetectorState.of(fresh).identical_to(model.backbone.denoiser)


def test_evaluation_is_deterministic(smoke_run, small_data, tmp_path):
    cfg, res = smoke_run
    a = evaluate(None, res.checkpoint, "clean", tmp_path / "a", samples=small_data[1])
    b = evaluate(None, res.checkpoint, "clean", tmp_path / "b", samples=small_data[1])
    assert a == b
    assert (tmp_path / "a" / "clean.json").read_bytes() == (tmp_path / "b" / "clean.json").read_bytes()
    assert (tmp_path / "a" / "clean.csv").read_text().startswith("category,ap50")
    cal = evaluate(None, res.checkpoint, "calibration", tmp_path / "c", samples=small_data[1])
    assert 0.0 <= cal["d_ece"] <= 1.0


def test_evaluate_rejects_mismatched_model_config(smoke_run, small_data):
    cfg, res = smoke_run
    with pytest.raises(ConfigurationError):
        evaluate(cfg.with_overrides(detector={"head_hidden": 64}), res.checkpoint, "clean", samples=small_data[1])


class PlantedModel:
    """Returns the ground truth of the samples in order, with confidence 1."""

    def __init__(self, samples):
        self.samples, self.pos = samples, 0

    def eval(self):
        return self

    def detect(self, images, noise_seed=0):
        out = []
        for _ in range(images.shape[0]):
            s = self.samples[self.pos % len(self.samples)]
            self.pos += 1
            out.append(BoxList(torch.from_numpy(s.boxes), torch.from_numpy(s.labels), torch.ones(len(s.labels))))
        return out


def test_perfect_detector_report(small_data):
    cfg = load_config()
    samples = small_data[1]
    clean = evaluate_model(PlantedModel(samples), cfg, samples, "clean")
    assert clean["map50"] == 1.0 and clean["ap50_95"] == 1.0
    cal = evaluate_model(PlantedModel(samples), cfg, samples, "calibration")
    assert cal["d_ece"] == 0.0


def test_cli_end_to_end(tmp_path, capsys):
    fx = tmp_path / "fx"
    assert main(["make-fixture", "--out", str(fx), "--n-train", "16", "--n-test", "8", "--size", "64"]) == 0
    cfg = {"iterations": 3, "data": {"train": str(fx / "train_A.jsonl"), "train_images": str(fx / "images"),
                                     "eval": str(fx / "test_B.jsonl"), "eval_images": str(fx / "images")}}
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["train-baseline", "--config", str(tmp_path / "c.yaml"), "--seed", "1", "--out", str(tmp_path / "r")]) == 0
    assert (tmp_path / "r" / "final.dgc").is_file() and (tmp_path / "r" / "loss_log.jsonl").is_file()
    capsys.readouterr()
    assert main(["eval", "--config", str(tmp_path / "c.yaml"), "--checkpoint", str(tmp_path / "r" / "final.dgc"),
                 "--out", str(tmp_path / "e")]) == 0
    assert "map50" in json.loads(capsys.readouterr().out)
    assert main(["train-guided", "--config", str(tmp_path / "c.yaml"), "--checkpoint", str(tmp_path / "none.dgc"),
                 "--out", str(tmp_path / "g")]) == 2
