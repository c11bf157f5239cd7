# %% [markdown]
# # Harmonizing heterogeneous annotations
#
# Each source dataset labels structures its own way. A per-dataset `remap.cfg`
# maps raw labels onto one protocol: 0 background, 1 LV, 2 LV cavity, 3 MYO.
# Datasets that only annotate the myocardium get a synthesized cavity.

# %%
import tempfile
from pathlib import Path

import numpy as np

from echoone.data import LV_CAVITY, MYO, Plane, read_png
from echoone.harmonize import build_manifest, fill_cavity, harmonize_to_disk
from echoone.synthetic import annulus, synthetic_mask, write_toy_source

# %% [markdown]
# A short-axis myocardium is a ring; its cavity is the enclosed hole.

# %%
ring = annulus(64, r_outer=20, r_inner=12)
cavity = fill_cavity(ring, Plane.PSAX)
print("cavity pixels", cavity.sum(), "disk area", round(np.pi * 12**2, 1))

# %% [markdown]
# Apical views are open at the base. The cavity is closed by the chord between
# the two basal endpoints of the myocardial band.

# %%
myo = synthetic_mask(Plane.CH4, 64, np.random.default_rng(0)) == MYO
cavity = fill_cavity(myo, Plane.CH4)
print("apical cavity pixels", cavity.sum(), "overlaps myocardium:", bool((cavity & myo).any()))

# %% [markdown]
# On disk: a source tree of two datasets, one fully labeled and one
# myocardium-only, harmonized and split 80/10/10 by subject.

# %%
work = Path(tempfile.mkdtemp())
root = write_toy_source(work / "src", subjects=10, size=48)
print((root / "beta" / "remap.cfg").read_text())
manifests, counts = harmonize_to_disk(build_manifest(root, split_seed=0), work / "out")
for m in manifests:
    print(m.split, len(m), "images from", len(m.subjects), "subjects")
for (ds, plane), n in sorted(counts.items()):
    print(f"{ds:6s} {plane:5s} {n}")

# %%
mask = read_png(manifests[0].records[0].mask_path)
print("labels after harmonization:", np.unique(mask), "cavity present:", bool((mask == LV_CAVITY).any()))
