"""Voxel grids, NIfTI-1 I/O, and resampling onto reference grids."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "Interpolation",
    "NiftiError",
    "NiftiFormatError",
    "TruncatedFileError",
    "UnsupportedDatatypeError",
    "VoxelVolume",
    "parse_nifti",
    "resample",
    "voxel_to_world",
    "world_to_voxel",
    "write_nifti",
]


class NiftiError(ValueError):
    """Base error for NIfTI parsing problems."""


class NiftiFormatError(NiftiError):
    """File is not a single-file NIfTI-1 image."""


class UnsupportedDatatypeError(NiftiError):
    """Datatype code outside the supported scalar set."""


class TruncatedFileError(NiftiError):
    """Header promises more bytes than the file contains."""


class Interpolation(Enum):
    NEAREST = "nearest"
    TRILINEAR = "trilinear"


# NIfTI-1 header layout (348 bytes), names per the published C struct.
_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]

_DTYPE_CODES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}
_HEADER_SIZE = 348
_VOX_OFFSET = 352  # header + 4-byte extender


def _header_dtype(byteorder: str) -> np.dtype:
    return np.dtype(_HEADER_FIELDS).newbyteorder(byteorder)


@dataclass(frozen=True)
class VoxelVolume:
    """Immutable 3D scalar grid with voxel spacing and a voxel-to-world affine.

    ``data`` is indexed ``[i, j, k]`` and is x-fastest when flattened in
    Fortran order, matching NIfTI storage. Arrays are frozen after
    construction so volumes are safe to share across threads.
    """

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    affine: np.ndarray
    data: np.ndarray
    intensity_range: tuple[float, float] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        affine = np.array(self.affine, dtype=np.float64)
        if affine.shape != (4, 4):
            raise ValueError("affine must be 4x4")
        if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
            raise ValueError("affine upper-left 3x3 is singular")
        data = np.asarray(self.data, dtype=np.float64)
        if data.size != dims[0] * dims[1] * dims[2]:
            raise ValueError(f"data size {data.size} does not match dims {dims}")
        data = data.reshape(dims)
        spacing = tuple(float(s) for s in self.spacing)
        col_norms = np.linalg.norm(affine[:3, :3], axis=0)
        for s, n in zip(spacing, col_norms):
            if s <= 0:
                raise ValueError(f"spacing must be positive, got {spacing}")
            if abs(s - n) > 1e-6 * max(abs(s), abs(n)):
                raise ValueError(
                    f"spacing {spacing} inconsistent with affine column norms {tuple(col_norms)}"
                )
        rng = self.intensity_range
        if rng is None:
            rng = (float(data.min()), float(data.max()))
        else:
            rng = (float(rng[0]), float(rng[1]))
            if rng[0] > data.min() or rng[1] < data.max():
                raise ValueError("intensity_range does not bound the data")
        affine.flags.writeable = False
        data.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "intensity_range", rng)

    @classmethod
    def from_array(cls, data: np.ndarray, affine: np.ndarray | None = None,
                   spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> "VoxelVolume":
        """Build a volume from a 3D array; affine defaults to diag(spacing)."""
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError("expected a 3D array")
        if affine is None:
            affine = np.diag([spacing[0], spacing[1], spacing[2], 1.0])
        else:
            affine = np.asarray(affine, dtype=np.float64)
            spacing = tuple(np.linalg.norm(affine[:3, :3], axis=0))
        return cls(dims=data.shape, spacing=spacing, affine=affine, data=data)

    @property
    def grid_id(self) -> str:
        """Stable identifier of (dims, affine); equal ids mean aligned grids."""
        h = hashlib.sha1()
        h.update(np.asarray(self.dims, dtype=np.int64).tobytes())
        h.update(np.round(self.affine, 9).tobytes())
        return h.hexdigest()[:16]

    def world_center(self) -> np.ndarray:
        """World-space center of the voxel bounding box, in mm."""
        half = (np.asarray(self.dims, dtype=np.float64) - 1.0) / 2.0
        return voxel_to_world(self, half)


def parse_nifti(blob: bytes) -> VoxelVolume:
    """Parse a single-file NIfTI-1 image into a VoxelVolume.

    Accepts little- and big-endian headers (detected via sizeof_hdr and the
    dim[0] range check). Data is canonicalized to float64 with
    scl_slope/scl_inter applied when scl_slope is nonzero. The affine comes
    from sform when sform_code > 0, else qform, else diag(pixdim).
    """
    if len(blob) < _HEADER_SIZE:
        raise TruncatedFileError(f"file has {len(blob)} bytes, NIfTI-1 header needs 348")
    size_le = int(np.frombuffer(blob[:4], dtype="<i4")[0])
    size_be = int(np.frombuffer(blob[:4], dtype=">i4")[0])
    if size_le == _HEADER_SIZE:
        order = "<"
    elif size_be == _HEADER_SIZE:
        order = ">"
    elif 540 in (size_le, size_be):
        raise NiftiFormatError("NIfTI-2 is not supported; convert to NIfTI-1")
    else:
        raise NiftiFormatError(f"bad sizeof_hdr {size_le} (expected 348)")
    hdr = np.frombuffer(blob[:_HEADER_SIZE], dtype=_header_dtype(order))[0]

    magic = bytes(hdr["magic"])  # numpy strips the trailing NUL of "n+1\0"
    if magic == b"ni1":
        raise NiftiFormatError("two-file (.hdr/.img) NIfTI is not supported")
    if magic != b"n+1":
        raise NiftiFormatError(f"bad magic {magic!r}")

    ndim = int(hdr["dim"][0])
    if not 1 <= ndim <= 7:
        raise NiftiFormatError(f"dim[0] = {ndim} outside 1..7")
    shape = [max(1, int(hdr["dim"][a])) for a in range(1, ndim + 1)]
    if any(n != 1 for n in shape[3:]):
        raise NiftiFormatError(f"only 3D volumes are supported, got shape {shape}")
    dims = tuple(shape[:3] + [1] * (3 - len(shape[:3])))

    code = int(hdr["datatype"])
    if code not in _DTYPE_CODES:
        raise UnsupportedDatatypeError(f"datatype code {code} not supported")
    dt = np.dtype(_DTYPE_CODES[code]).newbyteorder(order)

    offset = int(round(float(hdr["vox_offset"])))
    if offset < _HEADER_SIZE:
        raise NiftiFormatError(f"vox_offset {offset} overlaps the header")
    nbytes = int(np.prod(dims)) * dt.itemsize
    if len(blob) < offset + nbytes:
        raise TruncatedFileError(
            f"need {offset + nbytes} bytes for {dims} {np.dtype(dt).name} voxels, have {len(blob)}"
        )
    raw = np.frombuffer(blob, dtype=dt, count=int(np.prod(dims)), offset=offset)
    data = raw.reshape(dims, order="F").astype(np.float64)

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if slope != 0.0 and np.isfinite(slope) and (slope != 1.0 or inter != 0.0):
        data = data * slope + inter

    pixdim = np.abs(np.asarray(hdr["pixdim"][1:4], dtype=np.float64))
    if int(hdr["sform_code"]) > 0:
        affine = np.eye(4)
        affine[0] = hdr["srow_x"]
        affine[1] = hdr["srow_y"]
        affine[2] = hdr["srow_z"]
    elif int(hdr["qform_code"]) > 0:
        affine = _qform_affine(hdr, pixdim)
    else:
        affine = np.diag([pixdim[0] or 1.0, pixdim[1] or 1.0, pixdim[2] or 1.0, 1.0])

    spacing = tuple(pixdim)
    if any(p <= 0 for p in spacing):
        spacing = tuple(np.linalg.norm(affine[:3, :3], axis=0))
    try:
        return VoxelVolume(dims=dims, spacing=spacing, affine=affine, data=data)
    except ValueError as exc:
        raise NiftiFormatError(f"inconsistent header geometry: {exc}") from exc


def _qform_affine(hdr, pixdim: np.ndarray) -> np.ndarray:
    """Reconstruct the affine from the qform quaternion fields."""
    b = float(hdr["quatern_b"])
    c = float(hdr["quatern_c"])
    d = float(hdr["quatern_d"])
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 0 else 0.0
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    qfac = float(hdr["pixdim"][0])
    if qfac == 0.0:
        qfac = 1.0
    scale = np.array([pixdim[0], pixdim[1], pixdim[2] * qfac])
    affine = np.eye(4)
    affine[:3, :3] = rot * scale
    affine[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return affine


def write_nifti(volume: VoxelVolume) -> bytes:
    """Serialize a volume as little-endian NIfTI-1 with float32 data.

    The sform carries the affine (sform_code 1); parse_nifti(write_nifti(v))
    reproduces dims, spacing, and data exactly when the data fits float32.
    """
    hdr = np.zeros((), dtype=_header_dtype("<"))
    hdr["sizeof_hdr"] = _HEADER_SIZE
    hdr["dim"] = [3, volume.dims[0], volume.dims[1], volume.dims[2], 1, 1, 1, 1]
    hdr["datatype"] = 16
    hdr["bitpix"] = 32
    hdr["pixdim"] = [1.0, volume.spacing[0], volume.spacing[1], volume.spacing[2], 0, 0, 0, 0]
    hdr["vox_offset"] = float(_VOX_OFFSET)
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    hdr["cal_min"] = volume.intensity_range[0]
    hdr["cal_max"] = volume.intensity_range[1]
    hdr["descrip"] = b"cranioforge"
    hdr["qform_code"] = 0
    hdr["sform_code"] = 1
    hdr["srow_x"] = volume.affine[0]
    hdr["srow_y"] = volume.affine[1]
    hdr["srow_z"] = volume.affine[2]
    hdr["magic"] = b"n+1"
    payload = volume.data.astype("<f4").tobytes(order="F")
    return hdr.tobytes() + b"\x00\x00\x00\x00" + payload


def voxel_to_world(volume: VoxelVolume, index) -> np.ndarray:
    """Map a (possibly fractional) voxel index to world mm via the affine."""
    idx = np.asarray(index, dtype=np.float64)
    return volume.affine[:3, :3] @ idx + volume.affine[:3, 3]


def world_to_voxel(volume: VoxelVolume, point) -> np.ndarray:
    """Inverse of voxel_to_world."""
    p = np.asarray(point, dtype=np.float64)
    return np.linalg.solve(volume.affine[:3, :3], p - volume.affine[:3, 3])


def pad_for_sampling(data: np.ndarray) -> np.ndarray:
    """One-voxel zero border so boundary interpolation fades to background."""
    return np.pad(np.asarray(data, dtype=np.float64), 1)


def sample_trilinear(
    data: np.ndarray, coords: np.ndarray, padded: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Trilinearly sample ``data`` at voxel coordinates ``coords`` (3, N).

    Samples outside the grid read 0; interpolation fades across the boundary
    into that zero background. The returned mask marks samples fully
    supported by real voxels (all coordinates within [0, dim-1]). Callers
    sampling the same volume repeatedly can pass ``pad_for_sampling(data)``
    to skip re-padding.
    """
    nx, ny, nz = data.shape
    if padded is None:
        padded = pad_for_sampling(data)
    cx = coords[0] + 1.0
    cy = coords[1] + 1.0
    cz = coords[2] + 1.0
    live = (cx >= 0.0) & (cx < nx + 1) & (cy >= 0.0) & (cy < ny + 1) \
        & (cz >= 0.0) & (cz < nz + 1)
    x0 = np.clip(np.floor(cx).astype(np.int64), 0, nx)
    y0 = np.clip(np.floor(cy).astype(np.int64), 0, ny)
    z0 = np.clip(np.floor(cz).astype(np.int64), 0, nz)
    fx = cx - x0
    fy = cy - y0
    fz = cz - z0
    sx = (ny + 2) * (nz + 2)
    sy = nz + 2
    flat = padded.reshape(-1)
    f = x0 * sx + y0 * sy + z0
    v000 = flat.take(f)
    v100 = flat.take(f + sx)
    v010 = flat.take(f + sy)
    v110 = flat.take(f + sx + sy)
    v001 = flat.take(f + 1)
    v101 = flat.take(f + sx + 1)
    v011 = flat.take(f + sy + 1)
    v111 = flat.take(f + sx + sy + 1)
    gx = 1.0 - fx
    gy = 1.0 - fy
    vals = (
        ((v000 * gx + v100 * fx) * gy + (v010 * gx + v110 * fx) * fy) * (1.0 - fz)
        + ((v001 * gx + v101 * fx) * gy + (v011 * gx + v111 * fx) * fy) * fz
    )
    vals *= live
    inb = (coords[0] >= 0.0) & (coords[0] <= nx - 1) \
        & (coords[1] >= 0.0) & (coords[1] <= ny - 1) \
        & (coords[2] >= 0.0) & (coords[2] <= nz - 1)
    return vals, inb


def sample_nearest(data: np.ndarray, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbor sample at voxel coordinates (3, N); outside reads 0."""
    dims = np.asarray(data.shape)
    idx = np.floor(coords + 0.5).astype(np.int64)
    inb = np.all((idx >= 0) & (idx < dims[:, None]), axis=0)
    vals = np.zeros(coords.shape[1], dtype=np.float64)
    sel = idx[:, inb]
    vals[inb] = data[sel[0], sel[1], sel[2]]
    return vals, inb


def _grid_coords(dims: tuple[int, int, int]) -> np.ndarray:
    """Homogeneous voxel-index coordinates of every grid point, shape (4, N)."""
    ii, jj, kk = np.meshgrid(
        np.arange(dims[0]), np.arange(dims[1]), np.arange(dims[2]), indexing="ij"
    )
    n = ii.size
    return np.vstack(
        [ii.reshape(n), jj.reshape(n), kk.reshape(n), np.ones(n, dtype=np.float64)]
    ).astype(np.float64)


def resample(
    moving: VoxelVolume,
    reference: VoxelVolume,
    transform=None,
    interp: Interpolation = Interpolation.TRILINEAR,
) -> VoxelVolume:
    """Reslice ``moving`` onto ``reference``'s grid through a rigid transform.

    ``transform`` maps moving world coordinates to reference world
    coordinates (identity when None); each output voxel samples the moving
    volume at transform⁻¹ of the reference world point.
    """
    if transform is None:
        tmat = np.eye(4)
    else:
        tmat = np.asarray(getattr(transform, "matrix", transform), dtype=np.float64)
    # reference index -> reference world -> moving world -> moving index
    m = np.linalg.inv(moving.affine) @ np.linalg.inv(tmat) @ reference.affine
    pts = m @ _grid_coords(reference.dims)
    if interp is Interpolation.NEAREST:
        vals, _ = sample_nearest(moving.data, pts[:3])
    elif interp is Interpolation.TRILINEAR:
        vals, _ = sample_trilinear(moving.data, pts[:3])
    else:
        raise ValueError(f"unknown interpolation {interp!r}")
    data = vals.reshape(reference.dims)
    return VoxelVolume(
        dims=reference.dims,
        spacing=reference.spacing,
        affine=reference.affine,
        data=data,
    )
