# # Synthetic source and target domains
#
# The benchmark world is procedural: each image is a textured background
# (class 0) with a handful of shapes painted on top.  A class decides both
# the hue and the kind of shape, so a model can lean on color as well as
# geometry.  The target domain is the same world seen through a different
# camera: shifted channel means, a little less contrast, and pixel noise.

import numpy as np

from idm.datagen import BENCHMARK_SHIFT, SceneSpec, apply_domain_shift, make_domains, render_scene
from idm.styletx import compute_stats

spec = SceneSpec()  # 64x64, 8 classes
scene = render_scene(spec, index=0)
print("image", scene.image.shape, scene.image.dtype, "label", scene.label.shape)
print("classes present:", sorted(np.unique(scene.label).tolist()))

# Rendering is a pure function of (seed, index), so the same call gives the
# same pixels every time.

assert np.array_equal(render_scene(spec, 0).image, scene.image)

# The shift is per-channel affine followed by noise and clipping.

shifted = apply_domain_shift(scene, BENCHMARK_SHIFT, seed=0)
before, after = compute_stats(scene.image), compute_stats(shifted.image)
print("mean  source", before.mean.round(3), "-> target", after.mean.round(3))
print("std   source", before.std.round(3), "-> target", after.std.round(3))

# `make_domains` builds the three corpora used everywhere else: a labeled
# source set, a pool the single adaptation image is drawn from, and a
# disjoint labeled target test set that is only ever used for scoring.

d = make_domains(spec, n_source=32, n_target_pool=4, n_target_test=8)
print(len(d.source), "source,", len(d.target_pool), "pool,", len(d.target_test), "test")
print("pool ids:", [s.id for s in d.target_pool])

# Folders on disk use images/, labels/ and a manifest, and read back with
# `ingest_folder`.  Uncomment to write one:
# from idm.datagen import write_folder; write_folder(d.source, "source_folder", spec.num_classes)
