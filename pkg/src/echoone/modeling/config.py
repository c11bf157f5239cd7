from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field


@dataclass
class ModelConfig:
    """Architecture hyperparameters of the promptable segmentation network.

    ``tuned_blocks`` lists the 1-based encoder blocks refined by the CNN branch;
    empty means four evenly spaced blocks, ``ceil(k * depth / 4)`` for k = 1..4.
    """

    input_size: int = 256
    patch_size: int = 16
    embed_dim: int = 64
    encoder_depth: int = 6
    encoder_heads: int = 4
    mlp_ratio: float = 4.0
    num_decoder_blocks: int = 5
    num_original_decoder_blocks: int = 2
    decoder_heads: int = 4
    attention_downsample_rate: int = 2
    cnn_widths: tuple = (16, 32, 64, 64)
    stem_width: int = 8
    mask_in_chans: int = 16
    num_structures: int = 3
    tuned_blocks: tuple = ()
    lffa_enabled: bool = True
    pcmask_enabled: bool = True

    def __post_init__(self):
        self.cnn_widths = tuple(int(c) for c in self.cnn_widths)
        self.tuned_blocks = tuple(int(b) for b in self.tuned_blocks)
        if len(self.cnn_widths) != 4:
            raise ValueError("cnn_widths needs exactly 4 entries (one per fusion point)")
        if self.input_size % self.patch_size:
            raise ValueError(f"input_size {self.input_size} not divisible by patch_size {self.patch_size}")
        if self.lffa_enabled and self.num_decoder_blocks < 4:
            raise ValueError("LFFA needs at least 4 decoder blocks")
        if self.num_original_decoder_blocks > self.num_decoder_blocks:
            raise ValueError("more original decoder blocks than decoder blocks")
        if self.tuned_blocks and (len(self.tuned_blocks) != 4 or max(self.tuned_blocks) > self.encoder_depth):
            raise ValueError("tuned_blocks must name 4 encoder blocks within encoder_depth")
        if self.embed_dim % self.encoder_heads:
            raise ValueError("embed_dim must be divisible by encoder_heads")

    @property
    def grid(self) -> int:
        return self.input_size // self.patch_size

    @property
    def tuning_blocks(self) -> tuple:
        if self.tuned_blocks:
            return self.tuned_blocks
        d = self.encoder_depth
        return tuple(max(1, math.ceil(k * d / 4)) for k in range(1, 5))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn_widths"] = list(self.cnn_widths)
        d["tuned_blocks"] = list(self.tuned_blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)
