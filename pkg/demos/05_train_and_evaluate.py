# %% [markdown]
# # Training and evaluation
#
# The trainer optimizes the segmentation loss plus, when enabled, the prompt
# loss of the U-Net. Evaluation scores each image and structure, then
# aggregates per plane (datasets weighted equally), per dataset and per
# structure.

# %%
import tempfile
from pathlib import Path

import torch

from echoone.atlas import EncoderConfig, build_atlas, train_latent_encoder
from echoone.evaluate import evaluate
from echoone.modeling import ModelConfig
from echoone.synthetic import make_dataset
from echoone.train import TrainConfig, train

torch.set_num_threads(1)
images = make_dataset(per_plane=2, size=64, seed=0)
held_out = make_dataset(per_plane=1, size=64, seed=1)
encoder = train_latent_encoder(images, epochs=15, seed=0, config=EncoderConfig(input_size=64))
atlas = build_atlas(encoder, images, seed=0)

# %%
work = Path(tempfile.mkdtemp())
result = train(
    TrainConfig(epochs=40, lr=1e-3, input_size=64, augment=False),
    images,
    held_out,
    atlas=atlas,
    model_config=ModelConfig(input_size=64, patch_size=8),
    log_path=work / "train_log.jsonl",
)
print("best epoch", result.best_epoch, "val mDice", round(result.best_val_mdice, 3))
print("last log line:", (work / "train_log.jsonl").read_text().splitlines()[-1])

# %%
report = evaluate(result.bundle, atlas, held_out)
print(report.plane_table())
for key in ("all", "structure=LV", "structure=MYO"):
    print(key, report.aggregates[key])

# %%
report.write(work / "report.json", work / "report.csv")
print((work / "report.csv").read_text().splitlines()[0])
