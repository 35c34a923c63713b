"""Multi-stage region growing plus the morphology and mask plumbing around
it (dilate/erode, masking, connected components)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import VoxelVolume

__all__ = [
    "GridMismatchError",
    "GrowthStage",
    "LabelMask",
    "RejectedSeedError",
    "SeedOutOfBoundsError",
    "SeedSet",
    "connected_components",
    "dilate",
    "erode",
    "largest_component",
    "mask_volume",
    "region_grow",
]


class SeedOutOfBoundsError(ValueError):
    """A seed voxel lies outside the volume grid."""


class RejectedSeedError(ValueError):
    """A seed voxel's intensity fails the first stage's interval."""


class GridMismatchError(ValueError):
    """Mask and volume are not aligned to the same grid."""


@dataclass(frozen=True)
class LabelMask:
    """Integer label grid aligned to a reference volume (0 = background).

    Carries the grid geometry (spacing, affine) so mm-based morphology can
    run without the reference volume at hand; ``reference_id`` records which
    grid the mask is aligned to.
    """

    dims: tuple[int, int, int]
    data: np.ndarray
    spacing: tuple[float, float, float]
    affine: np.ndarray
    reference_id: str
    labels: tuple[int, ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        data = np.asarray(self.data)
        if data.shape != dims:
            raise ValueError(f"mask shape {data.shape} does not match dims {dims}")
        if not np.issubdtype(data.dtype, np.integer):
            raise ValueError("mask data must be integer-valued")
        if data.min() < 0:
            raise ValueError("mask labels must be nonnegative")
        data = data.astype(np.int32, copy=False)
        labels = tuple(int(v) for v in np.unique(data) if v != 0)
        affine = np.array(self.affine, dtype=np.float64)
        affine.flags.writeable = False
        data = np.ascontiguousarray(data)
        data.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "affine", affine)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_bool(cls, data: np.ndarray, like: VoxelVolume) -> "LabelMask":
        """Binary mask aligned to the grid of ``like``."""
        return cls(
            dims=like.dims,
            data=np.asarray(data, dtype=bool).astype(np.int32),
            spacing=like.spacing,
            affine=like.affine.copy(),
            reference_id=like.grid_id,
        )

    def replace_data(self, data: np.ndarray) -> "LabelMask":
        return LabelMask(
            dims=self.dims,
            data=data,
            spacing=self.spacing,
            affine=self.affine.copy(),
            reference_id=self.reference_id,
        )

    def foreground(self) -> np.ndarray:
        return self.data > 0


@dataclass(frozen=True)
class GrowthStage:
    """Per-stage acceptance interval for multi-stage region growing."""

    low: float
    high: float
    connectivity: int = 6
    band_radius_mm: float = 0.0

    def __post_init__(self):
        if self.low > self.high:
            raise ValueError(f"stage interval empty: low {self.low} > high {self.high}")
        if self.connectivity not in (6, 26):
            raise ValueError("connectivity must be 6 or 26")
        if self.band_radius_mm < 0:
            raise ValueError("band_radius_mm must be nonnegative")


@dataclass(frozen=True)
class SeedSet:
    """Manually placed growth starting voxels."""

    seeds: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        seeds = tuple(tuple(int(c) for c in s) for s in self.seeds)
        if not seeds:
            raise ValueError("seed set is empty")
        if any(len(s) != 3 for s in seeds):
            raise ValueError("seeds must be (i, j, k) voxel indices")
        object.__setattr__(self, "seeds", seeds)


def _shift_or(dst: np.ndarray, src: np.ndarray, axis: int, step: int) -> None:
    """dst |= src shifted by ``step`` along ``axis`` (zeros flow in)."""
    take_dst = [slice(None)] * 3
    take_src = [slice(None)] * 3
    if step > 0:
        take_dst[axis] = slice(step, None)
        take_src[axis] = slice(None, -step)
    else:
        take_dst[axis] = slice(None, step)
        take_src[axis] = slice(-step, None)
    dst[tuple(take_dst)] |= src[tuple(take_src)]


def _propagate(frontier: np.ndarray, connectivity: int) -> np.ndarray:
    """One BFS ring: voxels adjacent to the frontier under the connectivity."""
    if connectivity == 6:
        out = frontier.copy()
        for axis in range(3):
            _shift_or(out, frontier, axis, +1)
            _shift_or(out, frontier, axis, -1)
        return out
    # 26-connectivity: the 3x3x3 box dilation is separable per axis
    out = frontier.copy()
    for axis in range(3):
        ring = out.copy()
        _shift_or(out, ring, axis, +1)
        _shift_or(out, ring, axis, -1)
    return out


def _flood(seed_mask: np.ndarray, admissible: np.ndarray, connectivity: int) -> np.ndarray:
    """Breadth-first growth of ``seed_mask`` through ``admissible`` voxels."""
    region = seed_mask & admissible
    frontier = region
    while frontier.any():
        grown = _propagate(frontier, connectivity)
        fresh = grown & admissible & ~region
        region = region | fresh
        frontier = fresh
    return region


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _ellipsoid_element(radius_mm: float, spacing) -> np.ndarray:
    """Discrete ellipsoid with semi-axes radius_mm/spacing per axis, each
    rounded half-up to voxels and at least 1."""
    a, b, c = (max(1, _round_half_up(radius_mm / s)) for s in spacing)
    dx = np.arange(-a, a + 1).reshape(-1, 1, 1)
    dy = np.arange(-b, b + 1).reshape(1, -1, 1)
    dz = np.arange(-c, c + 1).reshape(1, 1, -1)
    # integer comparison of (dx/a)^2 + (dy/b)^2 + (dz/c)^2 <= 1, cross-multiplied
    lhs = (dx * b * c) ** 2 + (dy * a * c) ** 2 + (dz * a * b) ** 2
    return lhs <= (a * b * c) ** 2


def _dilate_bool(data: np.ndarray, radius_mm: float, spacing) -> np.ndarray:
    if radius_mm == 0:
        return data.copy()
    return ndimage.binary_dilation(data, structure=_ellipsoid_element(radius_mm, spacing))


def dilate(mask: LabelMask, radius_mm: float) -> LabelMask:
    """Binary dilation by a world-mm radius (ellipsoidal on anisotropic grids)."""
    if radius_mm < 0:
        raise ValueError("radius_mm must be nonnegative")
    out = _dilate_bool(mask.foreground(), radius_mm, mask.spacing)
    return mask.replace_data(out.astype(np.int32))


def erode(mask: LabelMask, radius_mm: float) -> LabelMask:
    """Binary erosion: complement, dilate, complement on the grid universe.

    Positions outside the grid belong to neither the mask nor its
    complement, so they never disqualify a border voxel; this keeps
    erode(dilate(m, r), r) a superset of m for every mask.
    """
    if radius_mm < 0:
        raise ValueError("radius_mm must be nonnegative")
    out = ~_dilate_bool(~mask.foreground(), radius_mm, mask.spacing)
    return mask.replace_data(out.astype(np.int32))


def region_grow(
    volume: VoxelVolume,
    seeds: SeedSet,
    stages,
    domain: LabelMask | None = None,
) -> LabelMask:
    """Semi-automatic multi-stage region growing.

    Stage 1 grows breadth-first from the seeds over voxels whose intensity
    lies in the stage interval, restricted to ``domain`` when given. Every
    later stage re-seeds from the previous result and grows through its own
    (typically relaxed) interval, restricted to the dilation of the previous
    result by the stage's band radius and to ``domain``. The result is the
    final stage's voxel set as a binary mask and does not depend on
    traversal order.
    """
    stages = list(stages)
    if not stages:
        raise ValueError("at least one growth stage is required")
    for k, stage in enumerate(stages[1:], start=2):
        if stage.band_radius_mm <= 0:
            raise ValueError(f"stage {k} needs band_radius_mm > 0")
    if domain is not None:
        _check_aligned(volume, domain)

    dims = volume.dims
    data = volume.data
    first = stages[0]
    seed_mask = np.zeros(dims, dtype=bool)
    for seed in seeds.seeds:
        if not all(0 <= c < d for c, d in zip(seed, dims)):
            raise SeedOutOfBoundsError(f"seed {seed} outside grid {dims}")
        value = data[seed]
        if not first.low <= value <= first.high:
            raise RejectedSeedError(
                f"seed {seed} intensity {value} outside stage-1 interval "
                f"[{first.low}, {first.high}]"
            )
        seed_mask[seed] = True

    domain_mask = domain.foreground() if domain is not None else None

    def admissible(stage: GrowthStage) -> np.ndarray:
        adm = (data >= stage.low) & (data <= stage.high)
        if domain_mask is not None:
            adm &= domain_mask
        return adm

    region = _flood(seed_mask, admissible(first), first.connectivity)
    for stage in stages[1:]:
        band = _dilate_bool(region, stage.band_radius_mm, volume.spacing)
        adm = admissible(stage) & band
        region = _flood(region, adm, stage.connectivity)
    return LabelMask.from_bool(region, volume)


def _check_aligned(volume: VoxelVolume, mask: LabelMask) -> None:
    if mask.dims != volume.dims or mask.reference_id != volume.grid_id:
        raise GridMismatchError(
            f"mask grid {mask.dims}/{mask.reference_id} does not match "
            f"volume grid {volume.dims}/{volume.grid_id}"
        )


def mask_volume(volume: VoxelVolume, mask: LabelMask, mode: str = "keep_inside") -> VoxelVolume:
    """Zero out voxels outside (keep_inside) or inside (keep_outside) the mask."""
    if mode not in ("keep_inside", "keep_outside"):
        raise ValueError(f"mode must be keep_inside or keep_outside, got {mode!r}")
    _check_aligned(volume, mask)
    keep = mask.foreground() if mode == "keep_inside" else ~mask.foreground()
    return VoxelVolume(
        dims=volume.dims,
        spacing=volume.spacing,
        affine=volume.affine.copy(),
        data=np.where(keep, volume.data, 0.0),
    )


def connected_components(mask: LabelMask, connectivity: int = 6) -> tuple[LabelMask, list[int]]:
    """Label connected foreground components 1..n, largest first.

    Ties in size break toward the component containing the smallest linear
    voxel index (x-fastest order). Input must be binary.
    """
    if connectivity not in (6, 26):
        raise ValueError("connectivity must be 6 or 26")
    if any(v not in (0, 1) for v in mask.labels):
        raise ValueError(f"connected_components needs a binary mask, labels {mask.labels}")
    structure = ndimage.generate_binary_structure(3, 1 if connectivity == 6 else 3)
    labeled, count = ndimage.label(mask.foreground(), structure=structure)
    if count == 0:
        return mask.replace_data(np.zeros(mask.dims, dtype=np.int32)), []
    flat = labeled.ravel(order="F")
    sizes = np.bincount(flat, minlength=count + 1)
    first_idx = np.full(count + 1, flat.size, dtype=np.int64)
    occupied = flat > 0
    np.minimum.at(first_idx, flat[occupied], np.nonzero(occupied)[0])
    order = sorted(range(1, count + 1), key=lambda lab: (-sizes[lab], first_idx[lab]))
    remap = np.zeros(count + 1, dtype=np.int32)
    for new, old in enumerate(order, start=1):
        remap[old] = new
    relabeled = remap[labeled]
    return mask.replace_data(relabeled), [int(sizes[lab]) for lab in order]


def largest_component(mask: LabelMask, connectivity: int = 6) -> LabelMask:
    """Keep only the largest connected component of a binary mask."""
    if not mask.foreground().any():
        raise ValueError("largest_component of an empty mask")
    labeled, _ = connected_components(mask, connectivity)
    return mask.replace_data((labeled.data == 1).astype(np.int32))
