# %% [markdown]
# # Building the prior atlas
#
# A small encoder is trained to tell the planes apart. Its latent vectors are
# clustered with k-means; each cluster keeps its centroid (a prototype) and the
# average mask of its members (a center mask).

# %%
import numpy as np

from echoone.atlas import EncoderConfig, build_atlas, train_latent_encoder
from echoone.synthetic import make_dataset

images = make_dataset(per_plane=6, size=64, seed=0)
encoder = train_latent_encoder(images, epochs=15, seed=0, config=EncoderConfig(input_size=64))
print("plane classification accuracy on train:", encoder.train_accuracy)

# %%
atlas = build_atlas(encoder, images, seed=0)
print("clusters:", atlas.K, "prototype dim:", atlas.prototypes.shape[1])
print("center masks:", atlas.center_masks.shape)

# %% [markdown]
# With K equal to the number of planes, clusters should line up with planes.

# %%
from echoone.atlas import contingency_table

for k, row in contingency_table(atlas, images).items():
    print(f"cluster {k}: {row}")

# %% [markdown]
# The atlas archive is deterministic: the same inputs give the same bytes.

# %%
import tempfile
from pathlib import Path

path = Path(tempfile.mkdtemp()) / "atlas.zip"
digest = atlas.save(path)
print("saved", path.name, "sha256", digest[:16])
