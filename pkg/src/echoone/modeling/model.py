from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .cnn_branch import CnnBranch
from .config import ModelConfig
from .image_encoder import ImageEncoder
from .mask_decoder import MaskDecoder
from .prompt_encoder import PromptEncoder


class EchoONE(nn.Module):
    """Promptable segmentation network with a CNN side branch.

    ``forward`` maps (N, 1, H, W) pixels in [0, 1] and an optional dense prompt
    (N, S, H, W) to structure logits (N, S, H, W) at the input resolution.
    """

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        self.image_encoder = ImageEncoder(config)
        self.prompt_encoder = PromptEncoder(config)
        self.cnn_branch = CnnBranch(config)
        self.mask_decoder = MaskDecoder(config)

    def embed(self, pixels: torch.Tensor, cnn_features=None, intermediates=None) -> torch.Tensor:
        if cnn_features is None:
            return self.image_encoder(pixels, intermediates=intermediates)
        tune = lambda k, tokens: self.cnn_branch.tune(k, tokens, cnn_features)  # noqa: E731
        return self.image_encoder(pixels, tune, intermediates)

    def forward(self, pixels, dense_prompt=None, points=None, states=None):
        cnn_features = self.cnn_branch(pixels)
        embedding = self.embed(pixels, cnn_features)
        if not self.config.pcmask_enabled:
            dense_prompt = None
        sparse, dense = self.prompt_encoder(pixels.shape[0], points, dense_prompt)
        low = self.mask_decoder(
            embedding, self.prompt_encoder.get_dense_pe(), sparse, dense, cnn_features, states
        )
        size = self.config.input_size
        return F.interpolate(low, size=(size, size), mode="bilinear", align_corners=False)

    # parameter groups -------------------------------------------------------

    def pretrained_modules(self) -> list[nn.Module]:
        """Parts that would carry foundation-model weights: the image encoder,
        the prompt encoders and the original decoder blocks."""
        n = self.config.num_original_decoder_blocks
        return [self.image_encoder, self.prompt_encoder, *self.mask_decoder.blocks[:n]]

    def pretrained_parameters(self) -> list[nn.Parameter]:
        return [p for m in self.pretrained_modules() for p in m.parameters()]

    def added_parameters(self) -> dict[str, list[nn.Parameter]]:
        """Parameters introduced on top of the foundation model, by component."""
        dec = self.mask_decoder
        n = self.config.num_original_decoder_blocks
        return {
            "cnn_branch": list(self.cnn_branch.parameters()),
            "fusion": list(dec.lffa.parameters()),
            "added_blocks": [p for b in dec.blocks[n:] for p in b.parameters()] + list(dec.added_pe.parameters()),
        }

    def freeze_pretrained(self, frozen: bool = True) -> None:
        for p in self.pretrained_parameters():
            p.requires_grad_(not frozen)
