"""Training objectives for one-shot adaptation.

All pixel sums are means over non-ignore pixels.  Tensors are channel-last:
logits/probs ``[N x] H x W x C``, features ``[N x] H x W x D``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from idm import IGNORE_INDEX
from idm.errors import TrainingError

log = logging.getLogger(__name__)

MARGINAL_FLOOR = 1e-8


@dataclass
class Prototypes:
    vectors: torch.Tensor  # C x D
    valid: torch.Tensor  # C, bool


@dataclass(frozen=True)
class LossWeights:
    ssm: float = 1.0
    scl: float = 1.0
    im: float = 1.0
    # True: minimize l_ssm + (l_im - l_scl) exactly as the objective is printed
    literal_sign: bool = False


@dataclass
class LossReport:
    l_ssm: float
    l_scl: float
    l_im: float
    l_pim: float
    total: float
    per_term_weights: tuple[float, float, float]

    def as_row(self) -> dict:
        d = asdict(self)
        w = d.pop("per_term_weights")
        d.update(w_ssm=w[0], w_scl=w[1], w_im=w[2])
        return d


def _as_long(label, device=None) -> torch.Tensor:
    return torch.as_tensor(np.asarray(label) if not torch.is_tensor(label) else label, dtype=torch.long, device=device)


def _zero(like: torch.Tensor | None = None) -> torch.Tensor:
    if like is None:
        return torch.zeros(())
    return like.sum() * 0.0


def ssm_loss(batch, outputs) -> torch.Tensor:
    """Selection-weighted cross-entropy on stylized source images.

    ``batch`` is a list of ``(sample, weight)``; ``outputs`` the matching
    student outputs (a list of ForwardOutput, or one batched ForwardOutput).
    Per image the loss is the mean over labeled pixels; images are summed.
    """
    if not batch:
        log.warning("ssm_loss called with an empty batch; returning 0")
        return _zero()
    total = None
    for i, (sample, weight) in enumerate(batch):
        logits = outputs[i].logits if isinstance(outputs, (list, tuple)) else outputs.logits[i]
        target = _as_long(sample.label, logits.device).reshape(-1)
        ce = F.cross_entropy(
            logits.reshape(-1, logits.shape[-1]), target, ignore_index=IGNORE_INDEX, reduction="sum"
        )
        n = int((target != IGNORE_INDEX).sum())
        term = weight * ce / n if n else _zero(logits)
        total = term if total is None else total + term
    return total


def compute_prototypes(features, labels, num_classes: int) -> Prototypes:
    """Masked mean feature of every class over all pixels of the batch."""
    if isinstance(features, (list, tuple)):
        features = torch.stack(list(features))
    if isinstance(labels, (list, tuple)):
        labels = np.stack([np.asarray(l) for l in labels])
    D = features.shape[-1]
    f = features.reshape(-1, D)
    y = _as_long(labels, f.device).reshape(-1)
    keep = y != IGNORE_INDEX
    f, y = f[keep], y[keep]
    one_hot = F.one_hot(y, num_classes).to(f.dtype)  # M x C
    counts = one_hot.sum(dim=0)
    sums = one_hot.T @ f
    valid = counts > 0
    vectors = sums / counts.clamp_min(1.0)[:, None]
    return Prototypes(vectors=vectors, valid=valid)


def scl_loss(mixed_features, mixed_label, protos: Prototypes, tau: float = 100.0) -> torch.Tensor:
    """Prototype contrastive loss: per-pixel softmax over ``p_c . F / tau`` at the labeled class.

    Classes without a prototype are left out of the softmax, and pixels
    labeled with such a class are not counted.
    """
    D = mixed_features.shape[-1]
    f = mixed_features.reshape(-1, D)
    y = _as_long(mixed_label, f.device).reshape(-1)
    valid_idx = torch.nonzero(protos.valid).flatten()
    remap = torch.full((protos.valid.numel() + 1,), -1, dtype=torch.long, device=f.device)
    remap[valid_idx] = torch.arange(valid_idx.numel(), device=f.device)
    y_safe = torch.where(y == IGNORE_INDEX, torch.full_like(y, protos.valid.numel()), y)
    y_local = remap[y_safe]
    keep = y_local >= 0
    if not bool(keep.any()):
        log.warning("scl_loss: no pixel has a valid prototype class; returning 0")
        return _zero(mixed_features)
    logits = f[keep] @ protos.vectors[valid_idx].T / tau
    return F.cross_entropy(logits, y_local[keep], reduction="mean")


def class_marginal(probs) -> torch.Tensor:
    """Spatial (and batch) mean of per-pixel class probabilities."""
    p = probs if torch.is_tensor(probs) else torch.as_tensor(np.asarray(probs))
    return p.reshape(-1, p.shape[-1]).mean(dim=0)


def im_loss(source_marginal, target_marginal) -> torch.Tensor:
    """``sum_c p_src[c] * log p_tgt[c]``; larger when the target marginal follows the source one."""
    src = torch.as_tensor(source_marginal)
    tgt = torch.as_tensor(target_marginal)
    src = src.to(tgt.dtype)
    return (src * torch.log(tgt.clamp_min(MARGINAL_FLOOR))).sum()


def total_loss(l_ssm, l_scl, l_im, weights: LossWeights = LossWeights()) -> tuple[torch.Tensor, LossReport]:
    """Minimized objective ``w_ssm*l_ssm + w_scl*l_scl - w_im*l_im``.

    With ``weights.literal_sign`` the combination is ``l_ssm + (l_im - l_scl)``
    instead, each term still scaled by its weight.
    """
    terms = [torch.as_tensor(t) for t in (l_ssm, l_scl, l_im)]
    values = [float(t.detach()) for t in terms]
    if not all(math.isfinite(v) for v in values):
        raise TrainingError(
            f"non-finite loss component: l_ssm={values[0]}, l_scl={values[1]}, l_im={values[2]}"
        )
    a, b, c = terms
    if weights.literal_sign:
        total = weights.ssm * a + weights.im * c - weights.scl * b
    else:
        total = weights.ssm * a + weights.scl * b - weights.im * c
    report = LossReport(
        l_ssm=values[0],
        l_scl=values[1],
        l_im=values[2],
        l_pim=values[2] - values[1],
        total=float(total.detach()),
        per_term_weights=(weights.ssm, weights.scl, weights.im),
    )
    return total, report
