# %% [markdown]
# # A look inside the synthetic world
#
# Every clip has a few rectangular objects on a cluttered background. One of
# them (sometimes two) is being handled, and that object's material decides
# what the audio sounds like. About 40% of clips are silent actions whose
# audio comes from somewhere off screen.

# %%
import numpy as np

from soundobj.maskops import patchify_mask
from soundobj.synthworld import WorldSpec, generate_dataset, generate_world

spec = WorldSpec()
banks = generate_world(spec, seed=0)
print("grid", spec.grid_shape, "patches per frame", spec.n_patches)
print("visual prototypes", banks.visual.shape, "audio prototypes", banks.audio_prototypes().shape)

# %% [markdown]
# Draw a handful of clips and print what each one contains.

# %%
samples = generate_dataset(spec, 8, seed=0, banks=banks)
for i, s in enumerate(samples):
    print(f"clip {i}: objects {len(s.object_masks)}, materials {s.materials}, "
          f"handled {s.interacting}, action {s.action}, sounding {s.sounding}, pool {len(s.pool)}")

# %% [markdown]
# The patch grid. A patch counts as object when at least half its pixels are
# covered, and the encoders pool only those patches.

# %%
s = samples[0]
union = np.logical_or.reduce(s.object_masks)
grid = patchify_mask(union, spec.patch_size)[0].reshape(spec.grid_shape)
print(np.round(grid, 2))
print((grid >= 0.5).astype(int))

# %% [markdown]
# The audio sits closest to the prototype of the handled object's material.

# %%
protos = banks.audio_prototypes()
for s in samples:
    cos = protos @ (s.audio / np.linalg.norm(s.audio))
    handled = sorted({s.materials[i] for i in s.interacting})
    print("sounding" if s.sounding else "silent  ", "closest prototype", int(np.argmax(cos)), "handled", handled)
