# # Patch-wise mixing of a source image with the target
#
# The image is cut into a grid of about P cells.  Each cell independently
# comes from the target (with probability `ratio`) or from the source; the
# label follows the same mask, with the target's cells labeled by the
# teacher's pseudo-labels.

import numpy as np

from idm.datagen import SceneSpec, make_domains
from idm.mixing import choose_grid, draw_mask, patch_mix

d = make_domains(SceneSpec(), n_source=2, n_target_pool=1, n_target_test=1)
src, tgt = d.source[0], d.target_pool[0]
pseudo = np.zeros(tgt.label.shape, dtype=np.int64)  # stand-in pseudo-labels

grid = choose_grid(64, 64, 16)
print("grid for P=16:", grid, "| for P=96:", choose_grid(64, 64, 96))

mask = draw_mask(grid, ratio=0.5, seed=3)
print(mask.take_target.astype(int))

mixed = patch_mix(src, tgt.image, pseudo, grid, ratio=0.5, seed=3)
take = mixed.mask.pixel_mask(64, 64)
print("target pixels:", int(take.sum()), "of", take.size)

# Every pixel comes from exactly one parent, bit for bit.

assert np.array_equal(mixed.image[take], tgt.image[take])
assert np.array_equal(mixed.image[~take], src.image[~take])
assert np.array_equal(mixed.label[take], pseudo[take])

# Ratio 0 and ratio 1 are plain copies of one parent.

assert np.array_equal(patch_mix(src, tgt.image, pseudo, grid, ratio=0.0, seed=1).image, src.image)
assert np.array_equal(patch_mix(src, tgt.image, pseudo, grid, ratio=1.0, seed=1).image, tgt.image)
print("provenance checks passed")
