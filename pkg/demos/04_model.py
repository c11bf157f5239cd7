# %% [markdown]
# # The segmentation model
#
# A ViT encoder with tuning hooks, a CNN side branch that injects local detail,
# a prompt encoder that embeds the dense prompt, and a mask decoder whose last
# blocks fuse CNN features through a 1x1 projection.

# %%
import torch

from echoone.modeling import EchoONE, ModelConfig

cfg = ModelConfig(input_size=64, patch_size=8)
torch.manual_seed(0)
model = EchoONE(cfg)
print("tuned encoder blocks:", model.config.tuned_blocks or "derived from depth")
print("parameters:", sum(p.numel() for p in model.parameters()))

# %%
x = torch.rand(2, 1, 64, 64)
prompt = torch.rand(2, 3, 64, 64)
logits = model(x, prompt)
print("logits:", tuple(logits.shape), "one channel per structure")

# %% [markdown]
# With the fusion projection reduced to the identity on decoder keys, the model
# computes exactly what the model without fusion computes.

# %%
fused = EchoONE(cfg).double()
for f in fused.mask_decoder.lffa:
    f.select_keys()
plain = EchoONE(ModelConfig(input_size=64, patch_size=8, lffa_enabled=False)).double()
plain.load_state_dict(fused.state_dict())
with torch.no_grad():
    xd, pd = x.double(), prompt.double()
    print("bitwise equal:", torch.equal(fused(xd, pd), plain(xd, pd)))
