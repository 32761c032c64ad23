"""PatchMix: grid-wise composition of a stylized source image and the target image."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from idm.errors import ContractError


@dataclass(frozen=True)
class PatchGrid:
    grid_h: int
    grid_w: int

    @property
    def P(self) -> int:
        return self.grid_h * self.grid_w


@dataclass
class MixMask:
    take_target: np.ndarray  # bool, grid_h x grid_w

    def pixel_mask(self, height: int, width: int) -> np.ndarray:
        gh, gw = self.take_target.shape
        rows = cell_index(height, gh)
        cols = cell_index(width, gw)
        return self.take_target[rows[:, None], cols[None, :]]


@dataclass
class MixedSample:
    image: np.ndarray
    label: np.ndarray
    mask: MixMask
    source_id: str

    @property
    def id(self) -> str:
        return self.source_id + "+target"


def cell_index(length: int, cells: int) -> np.ndarray:
    """Cell number of each pixel along one axis; the last cell absorbs the remainder."""
    size = max(length // cells, 1)
    return np.minimum(np.arange(length) // size, cells - 1)


def choose_grid(height: int, width: int, P: int) -> PatchGrid:
    """Factor ``P`` into a grid whose aspect ratio best matches the image's."""
    if P < 1:
        raise ContractError(f"P must be >= 1, got {P}")
    aspect = height / width
    best = None
    for gh in range(P, 0, -1):  # descending, so ties keep the larger grid_h
        if P % gh:
            continue
        gw = P // gh
        err = abs(gh / gw - aspect)
        if best is None or err < best[0]:
            best = (err, gh, gw)
    return PatchGrid(best[1], best[2])


def draw_mask(grid: PatchGrid, ratio: float, seed) -> MixMask:
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"ratio must be in [0, 1], got {ratio}")
    rng = np.random.default_rng(seed)
    return MixMask(rng.random((grid.grid_h, grid.grid_w)) < ratio)


def apply_mask(mask: MixMask, source, target):
    """Compose two H x W[...] arrays: target where the mask says so, else source."""
    source = np.asarray(source)
    target = np.asarray(target)
    if source.shape[:2] != target.shape[:2]:
        raise ContractError(f"size mismatch: {source.shape[:2]} vs {target.shape[:2]}")
    m = mask.pixel_mask(*source.shape[:2])
    if source.ndim == 3:
        m = m[..., None]
    return np.where(m, target, source)


def patch_mix(source, target: np.ndarray, target_pseudo: np.ndarray, grid: PatchGrid, ratio: float = 0.5, seed=None) -> MixedSample:
    """Each patch cell independently takes the target patch with probability ``ratio``.

    The image and the label are mixed with the same mask: source patches carry
    the source ground truth, target patches the target pseudo label.
    """
    if source.image.shape != np.shape(target):
        raise ContractError(f"size mismatch: source {source.image.shape} vs target {np.shape(target)}")
    if source.label.shape != np.shape(target_pseudo):
        raise ContractError("target pseudo label does not match the image size")
    mask = draw_mask(grid, ratio, seed)
    return MixedSample(
        image=apply_mask(mask, source.image, target),
        label=apply_mask(mask, source.label, target_pseudo),
        mask=mask,
        source_id=source.id,
    )
