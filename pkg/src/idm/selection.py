"""Uncertainty-driven selection of stylized source samples.

A candidate is kept when the teacher is uncertain about it (normalized mean
entropy above ``lambda_ent``), it contains more than ``k`` classes, and its
averaged softmax output is dissimilar from the memory bank of previously
kept samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
import torch

from idm import IGNORE_INDEX
from idm.errors import ConfigurationError, ContractError
from idm.model import SegNet, TeacherState, forward


@dataclass(frozen=True)
class SelectionConfig:
    lambda_ent: float = 0.015
    lambda_sim: float = 0.5
    k: int = 13
    batch_budget: int = 2

    def validate(self) -> None:
        if not self.lambda_ent > 0:
            raise ConfigurationError("lambda_ent must be > 0")
        if not -1 < self.lambda_sim <= 1:
            raise ConfigurationError("lambda_sim must be in (-1, 1]")
        if self.k < 1:
            # k = 0 would admit single-class images; the documented floor is 1
            raise ConfigurationError("k must be >= 1")
        if self.batch_budget < 1:
            raise ConfigurationError("batch_budget must be >= 1")


@dataclass(frozen=True)
class MemoryBank:
    mean_output: np.ndarray | None = None
    count: int = 0

    @property
    def empty(self) -> bool:
        return self.count == 0

    def fold(self, output_vec: np.ndarray) -> "MemoryBank":
        v = np.asarray(output_vec, dtype=np.float64)
        if self.empty:
            return MemoryBank(mean_output=v.copy(), count=1)
        n = self.count + 1
        return MemoryBank(mean_output=self.mean_output + (v - self.mean_output) / n, count=n)


@dataclass
class SelectionRecord:
    sample_id: str
    entropy: float
    w_pred: float
    similarity: float  # nan while the bank is empty
    class_count: int
    w_sim: int
    weight: float
    accepted: bool = False


def mean_entropy(probs) -> float:
    """Spatial mean of per-pixel Shannon entropy divided by log C (so in [0, 1])."""
    p = np.asarray(probs, dtype=np.float64)
    C = p.shape[-1]
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    ent = -plogp.sum(axis=-1)
    return float(ent.mean() / math.log(C))


def prediction_weight(entropy: float, lambda_ent: float) -> float:
    return math.exp(entropy - lambda_ent) if entropy > lambda_ent else 0.0


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ContractError("cosine similarity of a zero vector")
    return float(a @ b / (na * nb))


def similarity_gate(
    output_vec: np.ndarray, class_count: int, bank: MemoryBank, cfg: SelectionConfig
) -> int:
    if not np.any(output_vec):
        raise ContractError("output_vec is all zeros; expected an averaged softmax")
    if class_count <= cfg.k:
        return 0
    if bank.empty:
        return 1
    return int(cosine(output_vec, bank.mean_output) < cfg.lambda_sim)


def class_count(label: np.ndarray) -> int:
    values = np.unique(np.asarray(label))
    return int(np.count_nonzero(values != IGNORE_INDEX))


@torch.no_grad()
def teacher_outputs(teacher: TeacherState | SegNet, images: np.ndarray, chunk: int = 32) -> np.ndarray:
    """Teacher softmax maps for a stack of images, N x H x W x C float64."""
    model = teacher.model if isinstance(teacher, TeacherState) else teacher
    out = []
    for i in range(0, len(images), chunk):
        out.append(forward(model, images[i : i + chunk]).probs.double().cpu().numpy())
    return np.concatenate(out)


def select_batch(candidates, teacher, bank: MemoryBank, cfg: SelectionConfig, probs=None):
    """Scan ``candidates`` in order and accept up to ``cfg.batch_budget`` of them.

    Returns ``(accepted, bank, records)``: the accepted ``(sample, weight)``
    pairs, the bank with every accepted output folded in, and one record per
    candidate.  ``probs`` may carry precomputed teacher outputs.
    """
    cfg.validate()
    if not candidates:
        return [], bank, []
    if probs is None:
        probs = teacher_outputs(teacher, np.stack([c.image for c in candidates]))
    accepted, records = [], []
    for cand, p in zip(candidates, probs):
        ent = mean_entropy(p)
        w_pred = prediction_weight(ent, cfg.lambda_ent)
        out_vec = p.reshape(-1, p.shape[-1]).mean(axis=0)
        n_cls = class_count(cand.label)
        sim = math.nan if bank.empty else cosine(out_vec, bank.mean_output)
        w_sim = similarity_gate(out_vec, n_cls, bank, cfg)
        weight = w_pred * w_sim
        rec = SelectionRecord(cand.id, ent, w_pred, sim, n_cls, w_sim, weight)
        if weight > 0 and len(accepted) < cfg.batch_budget:
            accepted.append((cand, weight))
            bank = bank.fold(out_vec)
            rec = replace(rec, accepted=True)
        records.append(rec)
    return accepted, bank, records
