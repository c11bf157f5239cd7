"""Model bundle: segmentation network + prompt U-Net + lineage hashes."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .archive import canonical_json, hash_arrays, load_archive, save_archive
from .atlas import PriorAtlas
from .data import LabeledImage
from .errors import HashMismatch, ShapeMismatch
from .modeling import EchoONE, ModelConfig
from .pcmask import LightUNet, compose_prior_torch, similarity_weights_torch

MODEL_TAG = "ECHOONE-MODEL-v1"


def _state_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().to(torch.float32).numpy() for k, v in module.state_dict().items()}


def _load_state(module: torch.nn.Module, arrays: dict, prefix: str) -> None:
    cut = len(prefix) + 1
    state = {k[cut:]: torch.from_numpy(np.array(v)) for k, v in arrays.items() if k.startswith(prefix + "/")}
    module.load_state_dict(state)


def build_unet(model_config: ModelConfig, K: int, base: int = 16) -> LightUNet:
    s = model_config.num_structures
    return LightUNet(K * s, s, base=base)


def prompt_from_atlas(x: torch.Tensor, atlas: PriorAtlas, unet: LightUNet) -> torch.Tensor:
    """Dense prompt (N, S, H, W) for pixels (N, 1, H, W). Gradients reach the U-Net only."""
    encoder = atlas.encoder
    if encoder is None:
        raise ValueError("atlas carries no latent encoder")
    if tuple(atlas.center_masks.shape[-2:]) != tuple(x.shape[-2:]):
        raise ShapeMismatch(f"atlas masks {atlas.center_masks.shape[-2:]} vs input {tuple(x.shape[-2:])}")
    with torch.no_grad():
        latents = encoder.encode_batch(x.float()).to(x.dtype)
        protos = torch.as_tensor(atlas.prototypes, dtype=x.dtype)
        masks = torch.as_tensor(atlas.center_masks, dtype=x.dtype)
        pe = compose_prior_torch(similarity_weights_torch(latents, protos), masks)
    return unet(pe)


@dataclass
class ModelBundle:
    model: EchoONE
    unet: LightUNet | None = None
    atlas_hash: str = ""
    encoder_hash: str = ""
    run_config_hash: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def weights_hash(self) -> str:
        arrays = _state_arrays(self.model, "model")
        if self.unet is not None:
            arrays.update(_state_arrays(self.unet, "pcmask"))
        return hash_arrays(arrays)

    def check_lineage(self, atlas: PriorAtlas | None) -> None:
        if not self.config.pcmask_enabled:
            return
        if atlas is None:
            raise HashMismatch("bundle was trained with PC-Mask but no atlas was supplied")
        if self.atlas_hash and atlas.hash != self.atlas_hash:
            raise HashMismatch(f"atlas hash {atlas.hash[:12]} != bundle's {self.atlas_hash[:12]}")
        if self.encoder_hash and atlas.encoder_hash != self.encoder_hash:
            raise HashMismatch(f"encoder hash {atlas.encoder_hash[:12]} != bundle's {self.encoder_hash[:12]}")

    @torch.no_grad()
    def predict_logits(self, x: torch.Tensor, atlas: PriorAtlas | None = None) -> torch.Tensor:
        self.model.eval()
        dense = None
        if self.config.pcmask_enabled and self.unet is not None:
            self.unet.eval()
            dense = prompt_from_atlas(x, atlas, self.unet)
        return self.model(x, dense)

    def predict(self, images: Sequence[LabeledImage] | np.ndarray, atlas: PriorAtlas | None = None, batch_size: int = 8):
        """Per-structure probabilities (N, S, H, W) as float32 numpy."""
        if isinstance(images, np.ndarray):
            pix = images.astype(np.float32)
        else:
            size = self.config.input_size
            pix = np.stack([img.resized(size).pixels for img in images]).astype(np.float32)
        out = []
        for i in range(0, len(pix), batch_size):
            x = torch.from_numpy(pix[i:i + batch_size])[:, None]
            out.append(torch.sigmoid(self.predict_logits(x, atlas)).numpy())
        return np.concatenate(out) if out else np.zeros((0, self.config.num_structures) + pix.shape[1:], np.float32)

    def save(self, path) -> str:
        arrays = _state_arrays(self.model, "model")
        if self.unet is not None:
            arrays.update(_state_arrays(self.unet, "pcmask"))
        meta = {
            "config": canonical_json(self.config.to_dict()),
            "atlas_hash": self.atlas_hash,
            "encoder_hash": self.encoder_hash,
            "run_config_hash": self.run_config_hash,
            "lffa_enabled": self.config.lffa_enabled,
            "pcmask_enabled": self.config.pcmask_enabled,
            "unet": None if self.unet is None else {"in": self.unet.in_channels, "out": self.unet.out_channels,
                                                     "base": self.unet.down[0][0].out_channels},
            **self.meta,
        }
        return save_archive(path, MODEL_TAG, arrays, meta)

    @classmethod
    def load(cls, path) -> "ModelBundle":
        arrays, meta = load_archive(path, MODEL_TAG)
        config = ModelConfig.from_dict(json.loads(meta.pop("config")))
        model = EchoONE(config)
        _load_state(model, arrays, "model")
        unet = None
        dims = meta.pop("unet")
        if dims is not None:
            unet = LightUNet(dims["in"], dims["out"], base=dims["base"])
            _load_state(unet, arrays, "pcmask")
        meta.pop("lffa_enabled", None)
        meta.pop("pcmask_enabled", None)
        return cls(model.eval(), unet.eval() if unet else None, meta.pop("atlas_hash"), meta.pop("encoder_hash"),
                   meta.pop("run_config_hash"), meta)
