import json

import numpy as np
import pytest
import torch

from echoone.bundle import ModelBundle
from echoone.data import LabeledImage
from echoone.errors import ConfigError, HashMismatch, NumericalError
from echoone.train import TrainConfig, Trainer, evaluate_mdice, train

from conftest import tiny_model_config


def _cfg(**kw):
    base = dict(epochs=2, input_size=32, batch_size=4, lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_config_invariants():
    with pytest.raises(ConfigError):
        TrainConfig(lam=-1)
    with pytest.raises(ConfigError):
        TrainConfig(seg_dice_weight=0.7)
    with pytest.raises(ConfigError):
        TrainConfig(aug_prob=1.5)
    with pytest.raises(ConfigError):
        TrainConfig(lr_schedule="step")
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.lr, cfg.beta1, cfg.beta2, cfg.lam) == (100, 1e-4, 0.9, 0.999, 0.5)
    assert (cfg.seg_dice_weight, cfg.seg_bce_weight, cfg.aug_prob, cfg.input_size) == (0.8, 0.2, 0.5, 256)


def test_zero_epochs_returns_initial_bundle(toy_images, toy_atlas):
    result = train(_cfg(epochs=0), toy_images, atlas=toy_atlas, model_config=tiny_model_config())
    assert result.log == []
    assert isinstance(result.bundle, ModelBundle)


def test_log_records_and_file(toy_images, toy_atlas, tmp_path):
    result = train(_cfg(), toy_images, toy_images[:4], toy_atlas, model_config=tiny_model_config(),
                   log_path=tmp_path / "log.jsonl")
    lines = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert lines == result.log
    assert set(lines[0]) == {"epoch", "l_seg", "l_pcm", "l_total", "val_mdice"}
    assert lines[0]["l_total"] == pytest.approx(lines[0]["l_seg"] + 0.5 * lines[0]["l_pcm"], rel=1e-6)


def test_same_seed_same_first_epoch(toy_images, toy_atlas):
    logs = [train(_cfg(epochs=1), toy_images, atlas=toy_atlas, model_config=tiny_model_config()).log
            for _ in range(2)]
    assert logs[0][0]["l_total"] == pytest.approx(logs[1][0]["l_total"], abs=1e-6)


def _unet_state(bundle):
    return {k: v.clone() for k, v in bundle.unet.state_dict().items()}


def test_lambda_zero_leaves_unet_untouched(toy_images, toy_atlas):
    trainer = Trainer(_cfg(lam=0.0), tiny_model_config(), toy_atlas)
    before = _unet_state(trainer.bundle)
    trainer.fit(toy_images, epochs=2)
    after = trainer.bundle.unet.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert all(r["l_pcm"] is not None for r in trainer.log)
    assert all(r["l_total"] == r["l_seg"] for r in trainer.log)

    trainer = Trainer(_cfg(lam=0.5), tiny_model_config(), toy_atlas)
    before = _unet_state(trainer.bundle)
    trainer.fit(toy_images, epochs=2)
    after = trainer.bundle.unet.state_dict()
    assert any(not torch.equal(before[k], after[k]) for k in before)


def test_no_pcmask_logs_absent_pcm(toy_images, toy_atlas):
    trainer = Trainer(_cfg(), tiny_model_config(pcmask_enabled=False), toy_atlas)
    before = _unet_state(trainer.bundle)
    trainer.fit(toy_images, epochs=1)
    assert trainer.log[0]["l_pcm"] is None
    after = trainer.bundle.unet.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_freeze_checksums_constant(toy_images, toy_atlas):
    trainer = Trainer(_cfg(freeze_pretrained=True), tiny_model_config(), toy_atlas)
    model = trainer.bundle.model
    frozen = {n for n, p in model.named_parameters() if not p.requires_grad}
    assert frozen
    before = {n: p.clone() for n, p in model.named_parameters() if n in frozen}
    trainer.fit(toy_images, epochs=2)
    for n, p in model.named_parameters():
        if n in frozen:
            assert torch.equal(before[n], p)


def test_resume_replays_trajectory(toy_images, toy_atlas, tmp_path):
    full = Trainer(_cfg(epochs=3), tiny_model_config(), toy_atlas)
    full.fit(toy_images, epochs=3)

    first = Trainer(_cfg(epochs=3), tiny_model_config(), toy_atlas)
    first.fit(toy_images, epochs=1, checkpoint_dir=tmp_path)
    resumed = Trainer(_cfg(epochs=3), tiny_model_config(), toy_atlas)
    resumed.load_checkpoint(tmp_path / "last.ckpt")
    resumed.fit(toy_images, epochs=2)
    assert resumed.log == full.log
    for k, v in full.bundle.model.state_dict().items():
        assert torch.equal(v, resumed.bundle.model.state_dict()[k]), k


def test_corrupt_samples_are_skipped(toy_images, toy_atlas):
    bad = LabeledImage(np.full((32, 32), 2.0, np.float32), np.zeros((32, 32), np.uint8), "2CH", image_id="bad")
    result = train(_cfg(epochs=1), [bad, *toy_images], atlas=toy_atlas, model_config=tiny_model_config())
    assert [s[0] for s in result.skipped] == ["bad"]
    assert result.bundle.meta["skipped"] == 1


def test_nan_loss_fails_fast_and_dumps_state(toy_images, toy_atlas, tmp_path):
    trainer = Trainer(_cfg(), tiny_model_config(), toy_atlas)
    with torch.no_grad():
        trainer.bundle.model.mask_decoder.hypernetworks[0].layers[0].weight.fill_(float("nan"))
    with pytest.raises(NumericalError):
        trainer.fit(toy_images, epochs=1, checkpoint_dir=tmp_path)
    assert (tmp_path / "nan_state.ckpt").exists()


def test_best_on_val_selection(toy_images, toy_atlas):
    trainer = Trainer(_cfg(epochs=3), tiny_model_config(), toy_atlas)
    trainer.fit(toy_images, toy_images[:4], epochs=3)
    best = trainer.best_bundle()
    vals = [r["val_mdice"] for r in trainer.log]
    assert trainer.best_epoch == int(np.argmax(vals)) + 1
    assert evaluate_mdice(best, toy_images[:4], toy_atlas) == pytest.approx(max(vals), abs=1e-9)


def test_bundle_roundtrip_and_lineage(toy_images, toy_atlas, tmp_path):
    bundle = train(_cfg(epochs=1), toy_images, atlas=toy_atlas, model_config=tiny_model_config(),
                   run_config_hash="r1").bundle
    digest = bundle.save(tmp_path / "m.zip")
    assert digest == bundle.save(tmp_path / "m2.zip")
    back = ModelBundle.load(tmp_path / "m.zip")
    assert back.weights_hash() == bundle.weights_hash()
    assert back.run_config_hash == "r1"
    x = np.stack([img.pixels for img in toy_images[:2]])
    assert np.array_equal(back.predict(x, toy_atlas), bundle.predict(x, toy_atlas))
    back.check_lineage(toy_atlas)
    other = type(toy_atlas)(toy_atlas.prototypes + 1, toy_atlas.center_masks, {}, toy_atlas.encoder,
                            toy_atlas.encoder_hash)
    with pytest.raises(HashMismatch):
        back.check_lineage(other)
    with pytest.raises(HashMismatch):
        back.check_lineage(None)
