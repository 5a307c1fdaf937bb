# %% [markdown]
# # Training the three stages and finding the sounding object
#
# We align audio, vision and narration, refine with the consensus term, then
# finetune audio against vision with background hard negatives. Detection is
# scored by pooling the audio-to-patch similarity map inside each candidate
# mask and picking the best one. Chance is 1 in 5 here.

# %%
import pathlib

import numpy as np

from soundobj.encoders import encode_audio, encode_visual
from soundobj.evaluation import (
    background_similarity,
    evaluate_detection,
    similarity_map,
    top1_accuracy,
    write_pgm,
)
from soundobj.synthworld import WorldSpec, generate_dataset, generate_world
from soundobj.trainer import TrainConfig, TrainingArrays, run_pipeline

spec = WorldSpec(p_nonsounding=0.0, p_pair=0.0, objects=(2, 5), candidates=(5, 5))
banks = generate_world(spec, 0)
train = generate_dataset(spec, 500, 0, "train", banks)
fine = generate_dataset(spec, 200, 0, "finetune", banks)
held = generate_dataset(spec, 200, 0, "eval", banks)

# %% [markdown]
# The default learning rate is tuned for long runs. A larger one gets this
# small world trained in under a minute.

# %%
cfg = TrainConfig(lr=1e-2, seed=0)
pre = TrainingArrays.from_samples(train, spec.patch_size)
params, report = run_pipeline(pre, TrainingArrays.from_samples(fine, spec.patch_size), cfg)
for rec in report.records:
    print(f"{rec.stage:9s} epoch {rec.epoch}  loss {rec.mean_loss:.4f}")

# %%
init = cfg.init_params(pre.input_dims)
for name, p in [("untrained", init)] + list(params.items()):
    acc = top1_accuracy(evaluate_detection(p, held, spec.height, spec.width, spec.patch_size))
    print(f"{name:9s} top-1 {acc:.3f}")

# %% [markdown]
# Finetuning pushes audio away from background patches.

# %%
for stage in ("refine", "finetune"):
    print(stage, "audio/background cosine", round(background_similarity(params[stage], held, spec.patch_size), 3))

# %% [markdown]
# Save a few similarity maps as PGM images, next to the ground-truth mask.

# %%
out = pathlib.Path("demo-maps")
out.mkdir(exist_ok=True)
p = params["finetune"]
for i, s in enumerate(held[:4]):
    smap = similarity_map(encode_visual(s.patches[0], p), encode_audio(s.audio, p), spec.height, spec.width, spec.patch_size)
    write_pgm(out / f"map{i}.pgm", smap.pixels[0])
    write_pgm(out / f"truth{i}.pgm", np.where(s.interaction_mask()[0], 1.0, -1.0))
print("maps written to", out.resolve())
