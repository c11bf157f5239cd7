"""Prior-composable dense prompts.

An image is located in the atlas' latent space through cosine similarities to
the prototypes; the similarity-weighted center masks are stacked into a prior
embedding, which a small U-Net turns into the soft dense prompt. None of these
operations sees a plane tag.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .atlas import PriorAtlas
from .errors import ShapeMismatch, ZeroVector
from .losses import soft_dice_loss

PROMPT_EPS = 1e-7


def similarity_weights(latent, atlas: PriorAtlas | np.ndarray) -> np.ndarray:
    """Cosine similarity of ``latent`` to every prototype, shape (K,)."""
    protos = np.asarray(atlas.prototypes if isinstance(atlas, PriorAtlas) else atlas, dtype=np.float64)
    v = np.asarray(latent, dtype=np.float64).ravel()
    vn = np.linalg.norm(v)
    pn = np.linalg.norm(protos, axis=1)
    if vn == 0:
        raise ZeroVector("latent vector has zero norm")
    if (pn == 0).any():
        raise ZeroVector(f"prototype(s) {np.flatnonzero(pn == 0).tolist()} have zero norm")
    return np.clip(protos @ v / (pn * vn), -1.0, 1.0)


def similarity_weights_torch(latents: torch.Tensor, prototypes: torch.Tensor) -> torch.Tensor:
    """Batched cosine similarities, (N, D) x (K, D) -> (N, K)."""
    ln = latents.norm(dim=1, keepdim=True)
    pn = prototypes.norm(dim=1)
    if (ln == 0).any() or (pn == 0).any():
        raise ZeroVector("zero-norm latent or prototype")
    return ((latents @ prototypes.T) / (ln * pn)).clamp(-1.0, 1.0)


def compose_prior(weights, atlas: PriorAtlas | np.ndarray) -> np.ndarray:
    """Channel-stack ``w_i * m_i`` over clusters in index order: (K*S, H, W)."""
    masks = atlas.center_masks if isinstance(atlas, PriorAtlas) else atlas
    if not isinstance(masks, np.ndarray):
        shapes = {np.shape(m) for m in masks}
        if len(shapes) != 1:
            raise ShapeMismatch(f"center masks differ in shape: {sorted(shapes)}")
        masks = np.stack(masks)
    w = np.asarray(weights)
    if w.ndim != 1 or len(w) != len(masks):
        raise ShapeMismatch(f"{w.shape} weights for {len(masks)} center masks")
    dtype = np.result_type(w.dtype, masks.dtype)
    out = w.astype(dtype)[:, None, None, None] * masks.astype(dtype)
    return out.reshape(-1, *masks.shape[2:])


def compose_prior_torch(weights: torch.Tensor, center_masks: torch.Tensor) -> torch.Tensor:
    """Batched composition, (N, K) x (K, S, H, W) -> (N, K*S, H, W)."""
    n, k = weights.shape
    out = weights[:, :, None, None, None] * center_masks[None]
    return out.reshape(n, k * center_masks.shape[1], *center_masks.shape[2:])


def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.GroupNorm(min(8, cout // 2), cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.GroupNorm(min(8, cout // 2), cout),
        nn.ReLU(inplace=True),
    )


class LightUNet(nn.Module):
    """Three-level U-Net mapping a prior embedding to sigmoid prompt channels."""

    def __init__(self, in_channels: int, out_channels: int, base: int = 16, levels: int = 3):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.levels = levels
        widths = [base * 2**i for i in range(levels + 1)]
        self.down = nn.ModuleList()
        cin = in_channels
        for w in widths[:-1]:
            self.down.append(_double_conv(cin, w))
            cin = w
        self.bottleneck = _double_conv(widths[-2], widths[-1])
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for w_hi, w in zip(widths[::-1][:-1], widths[::-1][1:]):
            # bilinear upsampling keeps the net translation-equivariant (a strided
            # transposed conv imprints a 2x2 pattern on constant inputs)
            self.up.append(nn.Sequential(nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                                         nn.Conv2d(w_hi, w, 1)))
            self.dec.append(_double_conv(2 * w, w))
        self.out = nn.Conv2d(widths[0], out_channels, 1)

    def forward(self, pe: torch.Tensor) -> torch.Tensor:
        if pe.ndim != 4 or pe.shape[1] != self.in_channels:
            raise ShapeMismatch(f"U-Net expects (N, {self.in_channels}, H, W), got {tuple(pe.shape)}")
        if pe.shape[-1] % 2**self.levels or pe.shape[-2] % 2**self.levels:
            raise ShapeMismatch(f"spatial size {tuple(pe.shape[-2:])} not divisible by {2 ** self.levels}")
        skips, x = [], pe
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        return torch.sigmoid(self.out(x))


def generate_prompt(pe, unet: LightUNet) -> np.ndarray | torch.Tensor:
    """Dense prompt (S, H, W) in [0, 1] from a prior embedding (K*S, H, W).

    Numpy input gives numpy output (inference); tensors pass straight through.
    """
    if isinstance(pe, torch.Tensor):
        return unet(pe if pe.ndim == 4 else pe[None])[0 if pe.ndim == 3 else slice(None)]
    x = torch.from_numpy(np.ascontiguousarray(pe, dtype=np.float32))[None]
    was_training = unet.training
    unet.eval()
    with torch.no_grad():
        out = unet(x)[0].numpy()
    unet.train(was_training)
    return out


def pcm_loss_terms(prompt, target, dice_weight: float = 0.8, bce_weight: float = 0.2, eps: float = PROMPT_EPS):
    if prompt.shape != target.shape:
        raise ShapeMismatch(f"prompt {tuple(prompt.shape)} and target {tuple(target.shape)} differ")
    p = prompt.clamp(eps, 1.0 - eps)
    dice = soft_dice_loss(p, target)
    bce = -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()
    return {"dice": dice, "bce": bce, "total": dice_weight * dice + bce_weight * bce}


def pcm_loss(prompt, target, dice_weight: float = 0.8, bce_weight: float = 0.2, eps: float = PROMPT_EPS):
    """Prompt supervision: weighted soft-Dice plus BCE on clamped probabilities."""
    return pcm_loss_terms(prompt, target, dice_weight, bce_weight, eps)["total"]
