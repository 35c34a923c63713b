"""Rigid 6-DOF registration by derivative-free simplex search over a
coarse-to-fine pyramid, with NMI and NCC similarity metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import VoxelVolume, sample_trilinear

__all__ = [
    "NoOverlapError",
    "RegistrationConfig",
    "RegistrationResult",
    "RigidTransform",
    "UndefinedVarianceError",
    "compose",
    "invert",
    "register_rigid",
    "similarity",
]


class NoOverlapError(RuntimeError):
    """Fields of view share no voxels at the identity transform."""


class UndefinedVarianceError(RuntimeError):
    """NCC is undefined for a constant-intensity volume."""


def _euler_zyx_matrix(rotation_deg) -> np.ndarray:
    """Rotation matrix R = Rz(az) @ Ry(ay) @ Rx(ax), angles in degrees."""
    ax, ay, az = np.deg2rad(np.asarray(rotation_deg, dtype=np.float64))
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _euler_zyx_angles(rot: np.ndarray) -> tuple[float, float, float]:
    """Extract (ax, ay, az) degrees from a z-y-x rotation matrix."""
    sy = -rot[2, 0]
    sy = min(1.0, max(-1.0, sy))
    ay = np.arcsin(sy)
    if abs(sy) < 1.0 - 1e-12:
        ax = np.arctan2(rot[2, 1], rot[2, 2])
        az = np.arctan2(rot[1, 0], rot[0, 0])
    else:  # gimbal lock: fold roll into yaw
        ax = 0.0
        az = np.arctan2(-rot[0, 1], rot[1, 1])
    return tuple(np.rad2deg([ax, ay, az]))


@dataclass(frozen=True)
class RigidTransform:
    """6-DOF rotation + translation mapping moving world mm to fixed world mm.

    Euler angles are z-y-x in degrees, applied about the world origin; the
    cached 4x4 matrix is the canonical representation.
    """

    rotation: tuple[float, float, float]
    translation: tuple[float, float, float]
    matrix: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        rotation = tuple(float(a) for a in self.rotation)
        translation = tuple(float(t) for t in self.translation)
        if self.matrix is None:
            mat = np.eye(4)
            mat[:3, :3] = _euler_zyx_matrix(rotation)
            mat[:3, 3] = translation
        else:
            mat = np.array(self.matrix, dtype=np.float64)
        rot = mat[:3, :3]
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-9:
            raise ValueError("rotation part is not orthonormal within 1e-9")
        if abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("rotation part is not proper (det != +1)")
        if mat.shape != (4, 4) or np.max(np.abs(mat[3] - [0, 0, 0, 1])) > 0:
            raise ValueError("matrix must be homogeneous 4x4")
        mat.flags.writeable = False
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)
        object.__setattr__(self, "matrix", mat)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(rotation=(0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "RigidTransform":
        matrix = np.asarray(matrix, dtype=np.float64)
        rotation = _euler_zyx_angles(matrix[:3, :3])
        translation = tuple(matrix[:3, 3])
        return cls(rotation=rotation, translation=translation, matrix=matrix)

    @classmethod
    def about_center(cls, rotation_deg, translation_mm, center) -> "RigidTransform":
        """Rotation about ``center`` (mm) followed by a translation."""
        rot = _euler_zyx_matrix(rotation_deg)
        center = np.asarray(center, dtype=np.float64)
        mat = np.eye(4)
        mat[:3, :3] = rot
        mat[:3, 3] = center - rot @ center + np.asarray(translation_mm, dtype=np.float64)
        return cls.from_matrix(mat)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying b first, then a (matrix product a·b)."""
    return RigidTransform.from_matrix(a.matrix @ b.matrix)


def invert(t: RigidTransform) -> RigidTransform:
    rot = t.matrix[:3, :3]
    mat = np.eye(4)
    mat[:3, :3] = rot.T
    mat[:3, 3] = -rot.T @ t.matrix[:3, 3]
    return RigidTransform.from_matrix(mat)


@dataclass(frozen=True)
class RegistrationConfig:
    """Knobs for register_rigid; defaults follow a 3-level 4/2/1 pyramid."""

    metric: str = "nmi"
    histogram_bins: int = 32
    pyramid_levels: int = 3
    smoothing_sigma_voxels: tuple[float, ...] | None = None
    max_iterations: int = 400
    tolerance: float = 1e-4

    def __post_init__(self):
        if self.metric not in ("nmi", "ncc"):
            raise ValueError(f"metric must be 'nmi' or 'ncc', got {self.metric!r}")
        if self.histogram_bins < 8:
            raise ValueError("histogram_bins must be >= 8")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        sigmas = self.smoothing_sigma_voxels
        if sigmas is None:
            sigmas = tuple(f / 2.0 if f > 1 else 0.0 for f in self.downsample_factors)
        else:
            sigmas = tuple(float(s) for s in sigmas)
            if len(sigmas) != self.pyramid_levels:
                raise ValueError("need one smoothing sigma per pyramid level")
            if any(s < 0 for s in sigmas):
                raise ValueError("smoothing sigmas must be nonnegative")
        object.__setattr__(self, "smoothing_sigma_voxels", sigmas)

    @property
    def downsample_factors(self) -> tuple[int, ...]:
        return tuple(2 ** (self.pyramid_levels - 1 - i) for i in range(self.pyramid_levels))


@dataclass(frozen=True)
class RegistrationResult:
    transform: RigidTransform
    score: float
    converged: bool


def _bin_indices(values: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.int64)
    idx = ((values - lo) * (bins / (hi - lo))).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def _nmi_from_binned(ai: np.ndarray, bi: np.ndarray, bins: int) -> float:
    joint = np.bincount(ai * bins + bi, minlength=bins * bins).astype(np.float64)
    joint /= joint.sum()
    h_ab = _entropy(joint)
    if h_ab == 0.0:
        return 2.0  # both marginals live in a single bin
    h_a = _entropy(joint.reshape(bins, bins).sum(axis=1))
    h_b = _entropy(joint.reshape(bins, bins).sum(axis=0))
    return (h_a + h_b) / h_ab


def _metric_score(a: np.ndarray, a_range, b: np.ndarray, b_range,
                  metric: str, bins: int) -> float:
    if metric == "ncc":
        sa = a - a.mean()
        sb = b - b.mean()
        na = np.sqrt(np.sum(sa * sa))
        nb = np.sqrt(np.sum(sb * sb))
        if na == 0.0 or nb == 0.0:
            raise UndefinedVarianceError("ncc undefined for constant intensities")
        return float(np.sum(sa * sb) / (na * nb))
    ai = _bin_indices(a, a_range[0], a_range[1], bins)
    bi = _bin_indices(b, b_range[0], b_range[1], bins)
    return _nmi_from_binned(ai, bi, bins)


def similarity(fixed: VoxelVolume, moving_resampled: VoxelVolume,
               metric: str = "nmi", bins: int = 32,
               mask: np.ndarray | None = None) -> float:
    """Similarity score between two same-grid volumes; higher is better.

    nmi is Studholme's (H(A)+H(B))/H(A,B) over a bins x bins joint histogram;
    ncc is the Pearson correlation of intensities.
    """
    if fixed.dims != moving_resampled.dims:
        raise ValueError(f"grids differ: {fixed.dims} vs {moving_resampled.dims}")
    if metric not in ("nmi", "ncc"):
        raise ValueError(f"metric must be 'nmi' or 'ncc', got {metric!r}")
    a = fixed.data.reshape(-1)
    b = moving_resampled.data.reshape(-1)
    if mask is not None:
        sel = np.asarray(mask, dtype=bool).reshape(-1)
        a = a[sel]
        b = b[sel]
    return _metric_score(a, fixed.intensity_range, b, moving_resampled.intensity_range,
                         metric, bins)


def _downsample(volume: VoxelVolume, factor: int, sigma: float) -> VoxelVolume:
    """Gaussian-smooth then mean-pool by ``factor`` along every axis."""
    data = volume.data
    if sigma > 0:
        data = ndimage.gaussian_filter(data, sigma=sigma, mode="nearest")
    if factor == 1:
        return VoxelVolume.from_array(data, affine=volume.affine.copy())
    nx, ny, nz = (d // factor for d in volume.dims)
    if min(nx, ny, nz) == 0:
        raise ValueError(f"volume {volume.dims} too small for pyramid factor {factor}")
    data = data[: nx * factor, : ny * factor, : nz * factor]
    pooled = data.reshape(nx, factor, ny, factor, nz, factor).mean(axis=(1, 3, 5))
    # pooled voxel (I,J,K) is centered on fine index f*I + (f-1)/2
    affine = volume.affine.copy()
    shift = (factor - 1) / 2.0
    affine[:3, 3] += affine[:3, :3] @ np.full(3, shift)
    affine[:3, :3] *= factor
    return VoxelVolume.from_array(pooled, affine=affine)


def _nelder_mead(f, x0: np.ndarray, steps: np.ndarray, max_iter: int, tol: float):
    """Minimize f by Nelder-Mead with a relative simplex-size stop.

    Returns (x_best, f_best, converged). Deterministic: ties resolve by
    stable sort on function values.
    """
    n = x0.size
    simplex = np.tile(x0, (n + 1, 1))
    for i in range(n):
        simplex[i + 1, i] += steps[i]
    fvals = np.array([f(x) for x in simplex])
    converged = False
    for _ in range(max_iter):
        order = np.argsort(fvals, kind="stable")
        simplex = simplex[order]
        fvals = fvals[order]
        best = simplex[0]
        spread = np.max(np.linalg.norm(simplex[1:] - best, axis=1))
        if spread <= tol * (1.0 + np.linalg.norm(best)):
            converged = True
            break
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        reflected = centroid + (centroid - worst)
        fr = f(reflected)
        if fr < fvals[0]:
            expanded = centroid + 2.0 * (centroid - worst)
            fe = f(expanded)
            if fe < fr:
                simplex[-1], fvals[-1] = expanded, fe
            else:
                simplex[-1], fvals[-1] = reflected, fr
        elif fr < fvals[-2]:
            simplex[-1], fvals[-1] = reflected, fr
        else:
            contracted = centroid + 0.5 * (worst - centroid)
            fc = f(contracted)
            if fc < fvals[-1]:
                simplex[-1], fvals[-1] = contracted, fc
            else:  # shrink toward the best vertex
                simplex[1:] = simplex[0] + 0.5 * (simplex[1:] - simplex[0])
                fvals[1:] = [f(x) for x in simplex[1:]]
    order = np.argsort(fvals, kind="stable")
    return simplex[order[0]], fvals[order[0]], converged


class _LevelObjective:
    """Negated similarity of (fixed level, moving level) as a function of
    center-form rigid parameters (3 angles deg, 3 translations mm).

    Precomputes the fixed grid's world points, the fixed histogram-bin
    indices, and a padded copy of the moving data so each evaluation is a
    single matmul, one trilinear gather, and one joint histogram.
    """

    def __init__(self, fixed: VoxelVolume, moving: VoxelVolume, center: np.ndarray,
                 metric: str, bins: int):
        from .volume import _grid_coords, pad_for_sampling

        self.moving = moving
        self.center = center
        self.metric = metric
        self.bins = bins
        self.fixed_flat = fixed.data.reshape(-1)
        self.fixed_bins = _bin_indices(self.fixed_flat, *fixed.intensity_range, bins)
        self.fixed_range = fixed.intensity_range
        self.moving_range = moving.intensity_range
        self.world_pts = fixed.affine @ _grid_coords(fixed.dims)
        self.inv_moving_affine = np.linalg.inv(moving.affine)
        self.moving_padded = pad_for_sampling(moving.data)

    def params_to_matrix(self, params: np.ndarray) -> np.ndarray:
        rot = _euler_zyx_matrix(params[:3])
        mat = np.eye(4)
        mat[:3, :3] = rot
        mat[:3, 3] = self.center - rot @ self.center + params[3:]
        return mat

    def __call__(self, params: np.ndarray) -> float:
        tmat = self.params_to_matrix(params)
        m = self.inv_moving_affine @ np.linalg.inv(tmat)
        pts = m[:3] @ self.world_pts
        vals, inb = sample_trilinear(self.moving.data, pts, padded=self.moving_padded)
        if inb.sum() < 32:
            return np.inf
        if self.metric == "nmi":
            mov_bins = _bin_indices(vals[inb], *self.moving_range, self.bins)
            score = _nmi_from_binned(self.fixed_bins[inb], mov_bins, self.bins)
        else:
            score = _metric_score(self.fixed_flat[inb], self.fixed_range,
                                  vals[inb], self.moving_range, self.metric, self.bins)
        return -score


def register_rigid(moving: VoxelVolume, fixed: VoxelVolume,
                   config: RegistrationConfig = RegistrationConfig()) -> RegistrationResult:
    """Estimate the rigid transform aligning ``moving`` to ``fixed``.

    Maximizes the configured metric by Nelder-Mead over (3 Euler angles
    in degrees, 3 translations in mm), coarse to fine across the pyramid;
    each level starts from the previous optimum, level 0 from identity.
    Rotations are parameterized about the fixed volume's bounding-box
    center so angle and mm steps stay commensurate. Deterministic.
    """
    center = fixed.world_center()
    full = _LevelObjective(fixed, moving, center, config.metric, config.histogram_bins)
    _, inb = sample_trilinear(moving.data, (full.inv_moving_affine @ full.world_pts)[:3])
    if not inb.any():
        raise NoOverlapError("volumes share no field of view at identity")

    levels = []
    for factor, sigma in zip(config.downsample_factors, config.smoothing_sigma_voxels):
        if factor == 1 and sigma == 0.0:
            levels.append((fixed, moving))
        else:
            levels.append((_downsample(fixed, factor, sigma), _downsample(moving, factor, sigma)))

    params = np.zeros(6)
    converged = True
    top_factor = config.downsample_factors[0]
    for (fixed_lvl, moving_lvl), factor in zip(levels, config.downsample_factors):
        if fixed_lvl is fixed and moving_lvl is moving:
            objective = full
        else:
            objective = _LevelObjective(fixed_lvl, moving_lvl, center,
                                        config.metric, config.histogram_bins)
        # 2 deg / 2 mm initial simplex at the coarsest level; finer levels
        # restart around the warm start with proportionally smaller steps
        steps = np.full(6, 2.0 * factor / top_factor)
        params, _, level_ok = _nelder_mead(objective, params, steps,
                                           config.max_iterations, config.tolerance)
        converged = converged and level_ok

    score = -full(params)
    transform = RigidTransform.from_matrix(full.params_to_matrix(params))
    return RegistrationResult(transform=transform, score=float(score), converged=converged)
