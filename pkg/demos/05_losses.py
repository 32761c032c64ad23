# # The three training terms
#
# * a weighted cross-entropy on the accepted stylized source samples,
# * a prototype contrastive term: each mixed pixel should be closer (by dot
#   product over tau) to its own class's mean source feature than to others,
# * an information-maximization term that pulls the class marginal of the
#   mixed images toward a running source marginal.
#
# The minimized total is ssm + scl - im.

import numpy as np
import torch

from idm.datagen import SceneSpec, make_domains
from idm.losses import LossWeights, class_marginal, compute_prototypes, im_loss, scl_loss, ssm_loss, total_loss
from idm.model import Arch, backward, forward, init_model

d = make_domains(SceneSpec(width=32, height=32), n_source=3, n_target_pool=1, n_target_test=1)
model = init_model(Arch(), seed=0, dtype=torch.float64)

batch = [(d.source[0], 1.4), (d.source[1], 0.9)]
src_out = forward(model, np.stack([s.image for s, _ in batch]))
mix_out = forward(model, d.source[2].image)

l_ssm = ssm_loss(batch, src_out)
protos = compute_prototypes(src_out.features, np.stack([s.label for s, _ in batch]), 8)
l_scl = scl_loss(mix_out.features, d.source[2].label, protos, tau=100.0)
source_marginal = class_marginal(src_out.probs).detach()
l_im = im_loss(source_marginal, class_marginal(mix_out.probs))

total, rep = total_loss(l_ssm, l_scl, l_im, LossWeights())
print({k: round(v, 4) for k, v in rep.as_row().items()})
print("classes with a prototype:", protos.valid.nonzero().flatten().tolist())

# Gradients come from autograd; `backward` returns them by parameter name.

grads = backward(model, total)
print("grad norm of classifier.weight:", float(grads["classifier.weight"].norm()))

# The literal reading of the printed objective flips the sign of the
# prototype and information terms; it is kept behind a flag.

_, literal = total_loss(l_ssm, l_scl, l_im, LossWeights(literal_sign=True))
print("default total", round(rep.total, 4), "literal-sign total", round(literal.total, 4))
