# %% [markdown]
# # Telling sounding actions from silent ones
#
# A clip's audio-vision and audio-narration cosines should be high when the
# sound really comes from the handled object, and low when it comes from off
# screen. We score that with ROC and PR areas, then cluster the visual
# embeddings and check how well clusters follow the action.

# %%
import numpy as np

from soundobj.evaluation import agglomerative_cluster, discovery_eval, embed_samples
from soundobj.synthworld import WorldSpec, generate_dataset, generate_world
from soundobj.trainer import TrainConfig, TrainingArrays, run_pipeline

spec = WorldSpec(p_nonsounding=0.4, n_materials=64, n_actions=16, n_offscreen=1024)
banks = generate_world(spec, 0)
train = TrainingArrays.from_samples(generate_dataset(spec, 2000, 0, "train", banks), spec.patch_size)
held = generate_dataset(spec, 1000, 0, "eval", banks)
print("silent share", np.mean([not s.sounding for s in held]))

# %%
cfg = TrainConfig(lr=1e-2, seed=0)
params, _ = run_pipeline(train, None, cfg, stages=("align", "refine"))
for name, p in (("untrained", cfg.init_params(train.input_dims)), ("refine", params["refine"])):
    res = discovery_eval(p, held, spec.patch_size)
    print(name, {pair: {k: round(v.area, 3) for k, v in r.items()} for pair, r in res.items()})

# %% [markdown]
# Average-linkage clustering of the pooled visual embeddings into 20 groups.

# %%
vision, _, _ = embed_samples(params["refine"], held[:300], spec.patch_size)
labels = agglomerative_cluster(vision, k=20).labels
actions = np.array([s.action for s in held[:300]])
purity = sum(np.bincount(actions[labels == c]).max() for c in np.unique(labels)) / len(labels)
print("clusters", len(np.unique(labels)), "action purity", round(purity, 3))
