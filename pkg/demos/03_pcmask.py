# %% [markdown]
# # Dense prompts from the atlas
#
# For a new image, cosine similarity between its latent vector and each
# prototype weights the matching center mask. The stacked, weighted masks go
# through a light U-Net that outputs a per-structure soft prompt.

# %%
import numpy as np
import torch

from echoone.atlas import EncoderConfig, build_atlas, encode, train_latent_encoder
from echoone.data import STRUCTURES, one_hot
from echoone.metrics import dice
from echoone.pcmask import LightUNet, compose_prior, generate_prompt, pcm_loss, similarity_weights
from echoone.synthetic import make_dataset

images = make_dataset(per_plane=4, size=64, seed=0)
encoder = train_latent_encoder(images, epochs=15, seed=0, config=EncoderConfig(input_size=64))
atlas = build_atlas(encoder, images, seed=0)

# %%
latent = encode(encoder, images[0])
w = similarity_weights(latent, atlas)
print("similarity weights:", np.round(w, 3))
pe = compose_prior(w, atlas)
print("composed prior:", pe.shape, "(K * structures, H, W)")

# %% [markdown]
# Fit the U-Net on a handful of images to turn the prior into a prompt.

# %%
torch.manual_seed(0)
unet = LightUNet(pe.shape[0], len(STRUCTURES))
opt = torch.optim.Adam(unet.parameters(), lr=1e-3)
lat = [encode(encoder, img) for img in images]
x = torch.from_numpy(np.stack([compose_prior(similarity_weights(v, atlas), atlas) for v in lat])).float()
y = torch.from_numpy(np.stack([one_hot(img.mask, STRUCTURES) for img in images])).float()
for step in range(300):
    opt.zero_grad()
    loss = pcm_loss(unet(x), y)
    loss.backward()
    opt.step()
print("prompt loss after 300 steps:", round(loss.item(), 4))

# %%
prompt = generate_prompt(pe.astype(np.float32), unet)
print("prompt Dice per structure:", [round(dice(p > 0.5, t), 3) for p, t in zip(prompt, y[0].numpy() > 0.5)])
