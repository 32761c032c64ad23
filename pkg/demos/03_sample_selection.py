# # Which stylized samples get trained on
#
# A candidate is scored by the teacher.  Its prediction weight grows with
# the normalized entropy of the teacher's output (uncertain means
# informative); a similarity gate rejects candidates whose mean softmax is
# too close to what has already been accepted, and candidates with too few
# classes in their label map.

import numpy as np

from idm.datagen import SceneSpec, make_domains
from idm.model import make_teacher
from idm.selection import MemoryBank, SelectionConfig, mean_entropy, prediction_weight, select_batch
from idm.styletx import stylize
from idm.trainer import TrainConfig, pretrain_source

# Normalized entropy is 1 for a uniform map, 0 for a one-hot map.

print("uniform:", mean_entropy(np.full((4, 4, 8), 1 / 8)))
print("(0.9, 0.1):", round(mean_entropy(np.array([[[0.9, 0.1]]])), 4))
print("weight at entropy 0.5, lambda 0.015:", round(prediction_weight(0.5, 0.015), 4))

# Run the gates over a pool of stylized candidates.  An untrained network
# gives nearly the same output for every image, so train a teacher briefly
# first (about 20 seconds).

d = make_domains(SceneSpec(), n_source=64, n_target_pool=1, n_target_test=1)
teacher = make_teacher(pretrain_source(d.source, TrainConfig.desk(source_iters=150)))
d.source = d.source[:16]
cands = [stylize(s, d.target_pool[0].image, seed=i) for i, s in enumerate(d.source)]
cfg = SelectionConfig(lambda_ent=0.015, lambda_sim=0.9, k=3, batch_budget=4)
accepted, bank, records = select_batch(cands, teacher, MemoryBank(), cfg)

for r in records[:8]:
    print(f"{r.sample_id}  H={r.entropy:.3f}  cos={r.similarity:.4f}  classes={r.class_count}"
          f"  W={r.weight:.3f}  {'accepted' if r.accepted else ''}")
print(len(accepted), "accepted; bank holds", bank.count, "outputs")

# The bank is a running mean, so folding outputs one by one equals their
# plain average.

vecs = np.random.default_rng(0).dirichlet(np.ones(8), size=5)
b = MemoryBank()
for v in vecs:
    b = b.fold(v)
print("running mean matches:", np.allclose(b.mean_output, vecs.mean(axis=0)))
