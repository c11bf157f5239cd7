# %% [markdown]
# # The command-line pipeline
#
# `echoone harmonize | build-priors | train | eval | infer` share one YAML
# config. Overrides use `--set section.key=value`; the merged config is hashed
# and the hash travels with every artifact.

# %%
import tempfile
from pathlib import Path

import yaml

from echoone.cli import main
from echoone.config import load_config
from echoone.synthetic import write_toy_source

work = Path(tempfile.mkdtemp())
write_toy_source(work / "src", subjects=10, size=32)
config = {
    "model": {"input_size": 32, "patch_size": 8, "embed_dim": 32, "encoder_depth": 4, "encoder_heads": 2,
              "decoder_heads": 2, "cnn_widths": [8, 8, 16, 16], "stem_width": 4, "mask_in_chans": 8},
    "train": {"epochs": 2, "lr": 0.001},
    "atlas": {"encoder_epochs": 5},
}
(work / "run.yaml").write_text(yaml.safe_dump(config))
print("config hash:", load_config(work / "run.yaml").hash[:16])
print("with --no-lffa:", load_config(work / "run.yaml", ["model.lffa_enabled=false"]).hash[:16])

# %%
common = ["--config", str(work / "run.yaml"), "--out", str(work / "run")]
for command in (["harmonize", "--root", str(work / "src")], ["build-priors"], ["train"], ["eval"]):
    print(f"$ echoone {command[0]}")
    assert main([*command, *common]) == 0

# %%
frames = sorted(str(p) for p in (work / "src" / "alpha" / "subj000").glob("*_ED.png"))
main(["infer", *frames, "--overlay", *common])
print(sorted(p.name for p in (work / "run" / "predictions").iterdir())[:4])
