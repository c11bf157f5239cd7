"""Joint optimization of the segmentation network and the prompt U-Net.

The objective is ``L_seg + lambda * L_pcm``. The dense prompt enters the
segmentation network detached, so the U-Net learns from its own supervision
only and stays untouched when ``lambda == 0`` or PC-Mask is disabled.

Each epoch draws its shuffle order and augmentations from a generator seeded
by ``(seed, epoch)``; resuming from a checkpoint therefore replays the exact
trajectory of an uninterrupted run (single-process loading).
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .archive import load_archive, save_archive
from .atlas import LatentEncoder, PriorAtlas
from .augment import AugmentConfig, augment
from .bundle import ModelBundle, build_unet, prompt_from_atlas
from .data import STRUCTURES, LabeledImage, one_hot
from .errors import ConfigError, DataError, NumericalError
from .losses import seg_loss_terms, total_loss
from .metrics import mean_dice
from .modeling import EchoONE, ModelConfig
from .pcmask import pcm_loss_terms

log = logging.getLogger(__name__)

CKPT_TAG = "ECHOONE-CKPT-v1"


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    lam: float = 0.5
    seg_dice_weight: float = 0.8
    seg_bce_weight: float = 0.2
    pcm_dice_weight: float = 0.8
    pcm_bce_weight: float = 0.2
    aug_prob: float = 0.5
    augment: bool = True
    max_rotation_deg: float = 15.0
    scale_range: tuple = (0.9, 1.1)
    contrast_range: tuple = (0.8, 1.2)
    gamma_range: tuple = (0.8, 1.2)
    input_size: int = 256
    batch_size: int = 8
    seed: int = 0
    freeze_pretrained: bool = False
    lr_schedule: str = "constant"
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    unet_base: int = 16

    def __post_init__(self):
        self.scale_range = tuple(self.scale_range)
        self.contrast_range = tuple(self.contrast_range)
        self.gamma_range = tuple(self.gamma_range)
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        for a, b, name in ((self.seg_dice_weight, self.seg_bce_weight, "seg"),
                           (self.pcm_dice_weight, self.pcm_bce_weight, "pcm")):
            if abs(a + b - 1.0) > 1e-9:
                raise ConfigError(f"{name} dice and BCE weights must sum to 1")
        if not 0.0 <= self.aug_prob <= 1.0:
            raise ConfigError("aug_prob must lie in [0, 1]")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    @property
    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(self.aug_prob, self.max_rotation_deg, self.scale_range, self.contrast_range, self.gamma_range)


@dataclass
class TrainResult:
    bundle: ModelBundle
    log: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_mdice: float | None = None


def _stack(images: Sequence[LabeledImage]):
    x = torch.from_numpy(np.stack([img.pixels for img in images]))[:, None]
    y = torch.from_numpy(np.stack([one_hot(img.mask, STRUCTURES) for img in images]))
    return x, y


def _usable(images, size, skipped):
    out = []
    for img in images:
        try:
            img = img.resized(size)
            img.validate()
        except DataError as exc:
            log.warning("skipping %s: %s", img.image_id, exc)
            skipped.append((img.image_id, str(exc)))
            continue
        out.append(img)
    return out


def evaluate_mdice(bundle: ModelBundle, images: Sequence[LabeledImage], atlas: PriorAtlas | None) -> float:
    """Mean over images of the mean per-structure Dice at threshold 0.5."""
    if not images:
        return float("nan")
    probs = bundle.predict(images, atlas)
    scores = [mean_dice(p > 0.5, one_hot(img.mask, STRUCTURES) > 0.5) for p, img in zip(probs, images)]
    return float(np.mean(scores))


def _lr_at(config: TrainConfig, epoch: int) -> float:
    if config.lr_schedule == "cosine" and config.epochs > 0:
        return 0.5 * config.lr * (1 + math.cos(math.pi * epoch / config.epochs))
    return config.lr


class Trainer:
    """Holds the mutable training state; ``train`` below is the one-call entry point."""

    def __init__(
        self,
        config: TrainConfig,
        model_config: ModelConfig,
        atlas: PriorAtlas | None = None,
        encoder: LatentEncoder | None = None,
        run_config_hash: str = "",
        dtype: torch.dtype = torch.float32,
    ):
        if model_config.input_size != config.input_size:
            raise ConfigError(f"model input_size {model_config.input_size} != train input_size {config.input_size}")
        if model_config.pcmask_enabled and atlas is None:
            raise ConfigError("PC-Mask is enabled but no atlas was given")
        if atlas is not None and encoder is not None and atlas.encoder is None:
            atlas.encoder = encoder
        self.config = config
        self.atlas = atlas
        self.dtype = dtype
        torch.manual_seed(config.seed)
        model = EchoONE(model_config).to(dtype)
        unet = build_unet(model_config, atlas.K, config.unet_base).to(dtype) if atlas is not None else None
        if config.freeze_pretrained:
            model.freeze_pretrained(True)
        self.bundle = ModelBundle(
            model,
            unet,
            atlas.hash if atlas is not None else "",
            atlas.encoder_hash if atlas is not None else "",
            run_config_hash,
            {"train_config": asdict(config)},
        )
        self.train_unet = model_config.pcmask_enabled and unet is not None and config.lam > 0
        params = [p for p in model.parameters() if p.requires_grad]
        if self.train_unet:
            params += list(unet.parameters())
        self.params = params
        self.optimizer = torch.optim.Adam(
            params, lr=config.lr, betas=(config.beta1, config.beta2), weight_decay=config.weight_decay
        )
        self.epoch = 0
        self.step = 0
        self.log: list = []
        self.best_val = None
        self.best_epoch = 0
        self.best_state = None

    # -- one epoch -----------------------------------------------------------

    def _batch_loss(self, x, y):
        cfg = self.config
        model, unet = self.bundle.model, self.bundle.unet
        l_pcm, dense = None, None
        if model.config.pcmask_enabled:
            if self.train_unet:
                prompt = prompt_from_atlas(x, self.atlas, unet)
                l_pcm = pcm_loss_terms(prompt, y, cfg.pcm_dice_weight, cfg.pcm_bce_weight)["total"]
            else:
                with torch.no_grad():
                    prompt = prompt_from_atlas(x, self.atlas, unet)
                    l_pcm = pcm_loss_terms(prompt, y, cfg.pcm_dice_weight, cfg.pcm_bce_weight)["total"]
            dense = prompt.detach()
        logits = model(x, dense)
        l_seg = seg_loss_terms(logits, y, cfg.seg_dice_weight, cfg.seg_bce_weight)["total"]
        if l_pcm is not None and self.train_unet:
            loss = total_loss(l_seg, l_pcm, cfg.lam)
        else:
            loss = l_seg
        return loss, l_seg, l_pcm

    def run_epoch(self, images: Sequence[LabeledImage]) -> dict:
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, self.epoch])
        order = rng.permutation(len(images))
        for group in self.optimizer.param_groups:
            group["lr"] = _lr_at(cfg, self.epoch)
        self.bundle.model.train()
        if self.bundle.unet is not None:
            self.bundle.unet.train(self.train_unet)
        sums = {"l_seg": 0.0, "l_pcm": 0.0, "l_total": 0.0}
        has_pcm = False
        for start in range(0, len(order), cfg.batch_size):
            batch = [images[i] for i in order[start:start + cfg.batch_size]]
            if cfg.augment:
                batch = [
                    LabeledImage(*augment(img.pixels, img.mask, rng, cfg.augment_config), img.plane,
                                 img.subject_id, img.dataset_id, img.source_protocol, img.image_id)
                    for img in batch
                ]
            x, y = _stack(batch)
            x, y = x.to(self.dtype), y.to(self.dtype)
            loss, l_seg, l_pcm = self._batch_loss(x, y)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {self.epoch + 1}, step {self.step + 1}")
            self.optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(self.params, cfg.grad_clip)
            self.optimizer.step()
            self.step += 1
            n = len(batch)
            sums["l_seg"] += l_seg.item() * n
            sums["l_total"] += loss.item() * n
            if l_pcm is not None:
                has_pcm = True
                sums["l_pcm"] += l_pcm.item() * n
        self.epoch += 1
        total = max(len(images), 1)
        return {
            "epoch": self.epoch,
            "l_seg": sums["l_seg"] / total,
            "l_pcm": sums["l_pcm"] / total if has_pcm else None,
            "l_total": sums["l_total"] / total,
        }

    def fit(self, train_images, val_images=(), epochs: int | None = None, log_path=None, checkpoint_dir=None):
        epochs = self.config.epochs if epochs is None else epochs
        for _ in range(epochs):
            try:
                record = self.run_epoch(train_images)
            except NumericalError:
                if checkpoint_dir is not None:
                    path = Path(checkpoint_dir) / "nan_state.ckpt"
                    self.save_checkpoint(path)
                    log.error("non-finite loss; state dumped to %s", path)
                raise
            val = evaluate_mdice(self.bundle, val_images, self.atlas) if len(val_images) else None
            record["val_mdice"] = val
            self.log.append(record)
            if log_path is not None:
                with open(log_path, "a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")
            if val is not None and (self.best_val is None or val > self.best_val):
                self.best_val, self.best_epoch = val, self.epoch
                self.best_state = self._weights()
            if checkpoint_dir is not None:
                self.save_checkpoint(Path(checkpoint_dir) / "last.ckpt")
            log.info("epoch %d: %s", self.epoch, record)
        return self.log

    # -- state ---------------------------------------------------------------

    def _weights(self):
        out = {"model": copy.deepcopy(self.bundle.model.state_dict())}
        if self.bundle.unet is not None:
            out["unet"] = copy.deepcopy(self.bundle.unet.state_dict())
        return out

    def best_bundle(self) -> ModelBundle:
        """The bundle at the best validation epoch (the latest weights without validation)."""
        bundle = self.bundle
        if self.best_state is None:
            return bundle
        best = ModelBundle(
            copy.deepcopy(bundle.model), copy.deepcopy(bundle.unet), bundle.atlas_hash, bundle.encoder_hash,
            bundle.run_config_hash, dict(bundle.meta),
        )
        best.model.load_state_dict(self.best_state["model"])
        if best.unet is not None:
            best.unet.load_state_dict(self.best_state["unet"])
        best.meta.update(best_epoch=self.best_epoch, best_val_mdice=self.best_val)
        return best

    def save_checkpoint(self, path) -> str:
        arrays = {}
        for name, module in (("model", self.bundle.model), ("unet", self.bundle.unet)):
            if module is None:
                continue
            for k, v in module.state_dict().items():
                arrays[f"{name}/{k}"] = v.detach().cpu().numpy()
        if self.best_state is not None:
            for name, state in self.best_state.items():
                for k, v in state.items():
                    arrays[f"best_{name}/{k}"] = v.detach().cpu().numpy()
        opt_state = self.optimizer.state_dict()
        for idx, st in opt_state["state"].items():
            for k, v in st.items():
                arrays[f"optim/{idx}/{k}"] = torch.as_tensor(v).detach().cpu().numpy()
        meta = {
            "epoch": self.epoch,
            "step": self.step,
            "best_val_mdice": self.best_val,
            "best_epoch": self.best_epoch,
            "log": self.log,
            "rng": {"seed": self.config.seed, "next_epoch": self.epoch},
            "train_config": asdict(self.config),
            "run_config_hash": self.bundle.run_config_hash,
        }
        return save_archive(path, CKPT_TAG, arrays, meta)

    def load_checkpoint(self, path) -> None:
        arrays, meta = load_archive(path, CKPT_TAG)

        def state_of(prefix):
            cut = len(prefix) + 1
            return {k[cut:]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(prefix + "/")}

        self.bundle.model.load_state_dict(state_of("model"))
        if self.bundle.unet is not None:
            self.bundle.unet.load_state_dict(state_of("unet"))
        if any(k.startswith("best_model/") for k in arrays):
            self.best_state = {"model": state_of("best_model")}
            if self.bundle.unet is not None:
                self.best_state["unet"] = state_of("best_unet")
        opt_state = self.optimizer.state_dict()
        for idx in opt_state["param_groups"][0]["params"]:
            st = state_of(f"optim/{idx}")
            if st:
                opt_state["state"][idx] = st
        self.optimizer.load_state_dict(opt_state)
        self.epoch = meta["epoch"]
        self.step = meta["step"]
        self.best_val = meta["best_val_mdice"]
        self.best_epoch = meta["best_epoch"]
        self.log = list(meta["log"])


def train(
    config: TrainConfig,
    train_images: Sequence[LabeledImage],
    val_images: Sequence[LabeledImage] = (),
    atlas: PriorAtlas | None = None,
    encoder: LatentEncoder | None = None,
    model_config: ModelConfig | None = None,
    log_path=None,
    checkpoint_dir=None,
    resume=None,
    run_config_hash: str = "",
) -> TrainResult:
    """Train from scratch (or resume) and return the best-on-validation bundle."""
    model_config = model_config or ModelConfig(input_size=config.input_size)
    skipped: list = []
    train_images = _usable(train_images, config.input_size, skipped)
    val_images = _usable(val_images, config.input_size, skipped)
    trainer = Trainer(config, model_config, atlas, encoder, run_config_hash)
    if resume is not None:
        trainer.load_checkpoint(resume)
    remaining = max(config.epochs - trainer.epoch, 0)
    if remaining and not train_images:
        raise DataError("no usable training images")
    trainer.fit(train_images, val_images, remaining, log_path, checkpoint_dir)
    bundle = trainer.best_bundle()
    bundle.meta["skipped"] = len(skipped)
    return TrainResult(bundle, trainer.log, skipped, trainer.best_epoch, trainer.best_val)
