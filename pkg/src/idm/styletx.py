"""Channel-statistic style transfer of source images toward one target image."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from idm.datagen import LabeledSample
from idm.errors import ConfigurationError, ContractError

STD_FLOOR = 1e-6
NORM_READINGS = ("vector", "channel")


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True)
class StatOffsets:
    delta_mu: float
    delta_sigma: float


@dataclass
class StylizedSample:
    image: np.ndarray
    source_label: np.ndarray
    offsets: StatOffsets
    source_id: str

    # lets stylized samples flow into code written for LabeledSample
    @property
    def label(self) -> np.ndarray:
        return self.source_label

    @property
    def id(self) -> str:
        return self.source_id


def compute_stats(image: np.ndarray) -> ChannelStats:
    """Per-channel spatial mean and population std (std floored at 1e-6)."""
    x = np.asarray(image, dtype=np.float64)
    if x.size == 0:
        raise ContractError("cannot compute statistics of an empty image")
    flat = x.reshape(-1, x.shape[-1])
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), STD_FLOOR)
    return ChannelStats(mean=mean, std=std)


def _gap(a: np.ndarray, b: np.ndarray, norm: str) -> np.ndarray:
    if norm == "vector":
        return np.full_like(a, np.linalg.norm(a - b))
    if norm == "channel":
        return np.abs(a - b)
    raise ConfigurationError(f"norm must be one of {NORM_READINGS}, got {norm!r}")


def reconstruct_target_stats(
    stats_t: ChannelStats, stats_s: ChannelStats, offsets: StatOffsets, norm: str = "vector"
) -> ChannelStats:
    """Target statistics perturbed by ``delta * ||target - source||``.

    ``norm="vector"`` uses one Euclidean norm over all channels, broadcast;
    ``norm="channel"`` uses the per-channel absolute difference.
    """
    gamma = stats_t.mean + offsets.delta_mu * _gap(stats_t.mean, stats_s.mean, norm)
    beta = stats_t.std + offsets.delta_sigma * _gap(stats_t.std, stats_s.std, norm)
    return ChannelStats(mean=gamma, std=np.maximum(beta, STD_FLOOR))


def sample_offsets(seed) -> StatOffsets:
    d_mu, d_sigma = np.random.default_rng(seed).standard_normal(2)
    return StatOffsets(float(d_mu), float(d_sigma))


def stylize(
    source: LabeledSample,
    target: np.ndarray,
    seed=None,
    offsets: StatOffsets | None = None,
    norm: str = "vector",
    target_stats: ChannelStats | None = None,
) -> StylizedSample:
    """Re-normalize ``source.image`` to the (perturbed) channel statistics of ``target``.

    ``offsets`` overrides the seeded draw; ``target_stats`` skips recomputing
    the statistics of a target that is reused across many calls.
    """
    xs = np.asarray(source.image, dtype=np.float64)
    if xs.shape[-1] != np.shape(target)[-1]:
        raise ContractError(
            f"channel mismatch: source has {xs.shape[-1]}, target has {np.shape(target)[-1]}"
        )
    if offsets is None:
        offsets = sample_offsets(seed)
    stats_s = compute_stats(xs)
    stats_t = compute_stats(target) if target_stats is None else target_stats
    recon = reconstruct_target_stats(stats_t, stats_s, offsets, norm=norm)
    out = recon.std * (xs - stats_s.mean) / stats_s.std + recon.mean
    out = np.clip(out, 0.0, 1.0).astype(source.image.dtype)
    return StylizedSample(
        image=out, source_label=source.label, offsets=offsets, source_id=source.id
    )
