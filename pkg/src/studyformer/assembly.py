"""Assemble a study's per-view feature maps into one square feature grid.

A study with n views needs W*W tiles (W = grid width). Missing tiles are
synthesized by augmenting existing views in image space — the augmented
image is re-run through the backbone, because flipping a feature map is not
the same as extracting features from a flipped image. Tile placement is
row-major in study order; provenance records which tile came from where.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CapacityError, ContractError, DimensionError
from .tensor import Tensor

MAX_VIEWS = 16
SUPPORTED_WIDTHS = (2, 3, 4)


@dataclass(frozen=True)
class AugmentationDescriptor:
    """Deterministic recipe: flips, then right-angle rotation, then brightness."""

    hflip: bool
    vflip: bool
    rotation: int  # degrees, one of 0/90/180/270
    brightness: float  # scale in [0.8, 1.2]
    seed: int

    def ops(self):
        out = []
        if self.hflip:
            out.append("hflip")
        if self.vflip:
            out.append("vflip")
        if self.rotation:
            out.append(f"rot{self.rotation}")
        out.append(f"brightness={self.brightness:.4f}")
        return out

    def describe(self):
        return ", ".join(self.ops())


@dataclass(frozen=True)
class TileProvenance:
    source_view: int
    augmentation: AugmentationDescriptor = None  # None marks an original view

    @property
    def is_original(self):
        return self.augmentation is None

    def describe(self):
        if self.is_original:
            return f"original view {self.source_view}"
        return f"augmented from view {self.source_view} [{self.augmentation.describe()}]"


@dataclass
class FeatureGrid:
    """(W*G) x (W*G) x C concatenation of W*W per-view feature maps."""

    data: Tensor
    width: int
    provenance: list = field(default_factory=list)

    @property
    def grid_g(self):
        return self.data.shape[0] // self.width

    @property
    def channels(self):
        return self.data.shape[2]


def choose_grid_width(n_views: int) -> int:
    """Smallest supported square width holding n_views tiles (floor of 2)."""
    if n_views < 1:
        raise ContractError(f"a study needs at least one view, got {n_views}")
    if n_views > MAX_VIEWS:
        raise CapacityError("StudyFormer accepts at most 16 views")
    return max(2, math.ceil(math.sqrt(n_views)))


def sample_descriptor(seed: int) -> AugmentationDescriptor:
    """Draw a fresh augmentation recipe; brightness is always active so a
    synthesized tile is never bitwise identical to its source."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF]))
    hflip = bool(rng.random() < 0.5)
    vflip = bool(rng.random() < 0.5)
    rotation = int(rng.choice([0, 90, 180, 270]))
    brightness = float(rng.uniform(0.8, 1.2))
    return AugmentationDescriptor(hflip=hflip, vflip=vflip, rotation=rotation, brightness=brightness, seed=int(seed))


def apply_augmentation(image: np.ndarray, desc: AugmentationDescriptor) -> np.ndarray:
    """Replay a descriptor on an H x W x C float image in [0, 1]."""
    out = image
    if desc.hflip:
        out = out[:, ::-1]
    if desc.vflip:
        out = out[::-1, :]
    if desc.rotation:
        out = np.rot90(out, k=desc.rotation // 90, axes=(0, 1))
    out = np.clip(out * desc.brightness, 0.0, 1.0)
    return np.ascontiguousarray(out)


def synthesize_views(views: list, target: int, seed: int):
    """Pad a study's views up to `target` images.

    The originals come first, in order; the remaining slots are augmented
    copies cycling through the originals (view 0, view 1, ..., wrapping).
    Returns (images, provenance), both of length `target`. Deterministic
    given (views, seed).
    """
    n = len(views)
    if n < 1:
        raise ContractError("synthesize_views: need at least one view")
    if n > target:
        raise ContractError(f"synthesize_views: {n} views exceed the target of {target}")
    images = [np.asarray(v) for v in views]
    provenance = [TileProvenance(source_view=i) for i in range(n)]
    for j in range(n, target):
        src = (j - n) % n
        desc = sample_descriptor(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, j]).generate_state(1)[0])
        images.append(apply_augmentation(images[src], desc))
        provenance.append(TileProvenance(source_view=src, augmentation=desc))
    return images, provenance


def assemble_square(features: list, width: int, provenance=None) -> FeatureGrid:
    """Tile W*W feature maps [C,G,G] row-major into a (W*G, W*G, C) grid."""
    if width not in SUPPORTED_WIDTHS:
        raise ContractError(f"grid width must be one of {SUPPORTED_WIDTHS}, got {width}")
    if len(features) != width * width:
        raise DimensionError(f"assemble_square: need {width * width} feature maps, got {len(features)}")
    shape = features[0].shape
    if len(shape) != 3:
        raise DimensionError(f"assemble_square: feature maps must be [C,G,G], got {shape}")
    for f in features[1:]:
        if f.shape != shape:
            raise DimensionError(f"assemble_square: inconsistent feature shapes {shape} vs {f.shape}")
    tiles = [T.transpose(f, (1, 2, 0)) for f in features]  # G,G,C
    rows = [T.concat(tiles[r * width:(r + 1) * width], axis=1) for r in range(width)]
    data = T.concat(rows, axis=0)
    if provenance is None:
        provenance = [TileProvenance(source_view=i) for i in range(width * width)]
    if len(provenance) != width * width:
        raise DimensionError(f"assemble_square: provenance needs {width * width} entries, got {len(provenance)}")
    return FeatureGrid(data=data, width=width, provenance=list(provenance))


def extract_tile(grid: FeatureGrid, row: int, col: int) -> Tensor:
    """Recover the [C,G,G] feature map at tile (row, col)."""
    g = grid.grid_g
    block = T.narrow(T.narrow(grid.data, 0, row * g, g), 1, col * g, g)
    return T.transpose(block, (2, 0, 1))
