"""Shared fixtures: phantom volumes, an independent minimal NIfTI writer,
icosphere construction, and brute-force oracles."""

from __future__ import annotations

import struct
from collections import deque
from fractions import Fraction

import numpy as np
import pytest

from cranioforge import LabelMask, VoxelVolume


# ---------------------------------------------------------------- volumes

def make_volume(data, spacing=(1.0, 1.0, 1.0), affine=None) -> VoxelVolume:
    data = np.asarray(data, dtype=np.float64)
    if affine is not None:
        return VoxelVolume.from_array(data, affine=affine)
    return VoxelVolume.from_array(data, spacing=spacing)


def make_mask(flags, spacing=(1.0, 1.0, 1.0)) -> LabelMask:
    flags = np.asarray(flags, dtype=bool)
    ref = make_volume(np.zeros(flags.shape), spacing=spacing)
    return LabelMask.from_bool(flags, ref)


def gaussian_blob_phantom(n=64) -> VoxelVolume:
    """Smooth asymmetric phantom: sum of three Gaussian blobs."""
    g = np.arange(n, dtype=float)
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    data = np.zeros((n, n, n))
    blobs = [((20, 28, 30), 5.0, 1.0), ((40, 30, 26), 7.0, 0.8), ((32, 44, 38), 6.0, 1.2)]
    for (cx, cy, cz), sigma, amp in blobs:
        data += amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2) / (2 * sigma**2))
    return VoxelVolume.from_array(data)


def sphere_field(n=64, radius=10.0) -> VoxelVolume:
    """Signed inside-ness field of a centered sphere (positive inside)."""
    g = np.arange(n, dtype=float)
    x, y, z = np.meshgrid(g, g, g, indexing="ij")
    c = (n - 1) / 2.0
    dist = np.sqrt((x - c) ** 2 + (y - c) ** 2 + (z - c) ** 2)
    return VoxelVolume.from_array(radius - dist)


@pytest.fixture(scope="session")
def phantom() -> VoxelVolume:
    return gaussian_blob_phantom()


# ------------------------------------------- independent NIfTI-1 fixture

def _pack_into(buf: bytearray, offset: int, fmt: str, *values) -> None:
    struct.pack_into(fmt, buf, offset, *values)


def minimal_nifti_bytes(
    array: np.ndarray,
    spacing=(1.0, 1.0, 1.0),
    dtype_code: int = 16,
    byteorder: str = "<",
    srows=None,
    quaternion=None,
    slope: float = 0.0,
    inter: float = 0.0,
    vox_offset: int = 352,
    magic: bytes = b"n+1\x00",
) -> bytes:
    """Hand-packed single-file NIfTI-1, written independently of the package.

    ``srows`` (3 rows of 4) sets the sform; ``quaternion`` is
    (b, c, d, ox, oy, oz, qfac) and sets the qform.
    """
    np_dtype = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}[dtype_code]
    bo = byteorder
    buf = bytearray(348)
    _pack_into(buf, 0, bo + "i", 348)
    dims = array.shape
    _pack_into(buf, 40, bo + "8h", 3, dims[0], dims[1], dims[2], 1, 1, 1, 1)
    _pack_into(buf, 70, bo + "h", dtype_code)
    _pack_into(buf, 72, bo + "h", np.dtype(np_dtype).itemsize * 8)
    qfac = quaternion[6] if quaternion else 1.0
    _pack_into(buf, 76, bo + "8f", qfac, spacing[0], spacing[1], spacing[2], 0, 0, 0, 0)
    _pack_into(buf, 108, bo + "f", float(vox_offset))
    _pack_into(buf, 112, bo + "2f", slope, inter)
    if quaternion is not None:
        _pack_into(buf, 252, bo + "h", 1)  # qform_code
        _pack_into(buf, 256, bo + "6f", *quaternion[:6])
    if srows is not None:
        _pack_into(buf, 254, bo + "h", 1)  # sform_code
        _pack_into(buf, 280, bo + "12f", *[float(v) for row in srows for v in row])
    buf[344:348] = magic
    payload = np.asarray(array).astype(np.dtype(np_dtype).newbyteorder(bo)).tobytes(order="F")
    pad = b"\x00" * (vox_offset - 348)
    return bytes(buf) + pad + payload


# ----------------------------------------------------------------- icosphere

def icosphere(subdivisions: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere (vertices, faces) with outward CCW winding."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [v for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nxt = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            nxt += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = nxt
    return np.array(verts), np.array(faces, dtype=np.int64)


# ------------------------------------------------------------------ oracles

_OFFSETS_6 = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
_OFFSETS_26 = [
    (dx, dy, dz)
    for dx in (-1, 0, 1)
    for dy in (-1, 0, 1)
    for dz in (-1, 0, 1)
    if (dx, dy, dz) != (0, 0, 0)
]


def flood_fill_oracle(data, seeds, low, high, connectivity, domain=None) -> np.ndarray:
    """Plain BFS flood fill over the thresholded volume."""
    data = np.asarray(data)
    adm = (data >= low) & (data <= high)
    if domain is not None:
        adm &= np.asarray(domain, dtype=bool)
    offsets = _OFFSETS_6 if connectivity == 6 else _OFFSETS_26
    region = np.zeros(data.shape, dtype=bool)
    queue = deque()
    for seed in seeds:
        seed = tuple(seed)
        if adm[seed] and not region[seed]:
            region[seed] = True
            queue.append(seed)
    nx, ny, nz = data.shape
    while queue:
        i, j, k = queue.popleft()
        for dx, dy, dz in offsets:
            a, b, c = i + dx, j + dy, k + dz
            if 0 <= a < nx and 0 <= b < ny and 0 <= c < nz and adm[a, b, c] and not region[a, b, c]:
                region[a, b, c] = True
                queue.append((a, b, c))
    return region


def ellipsoid_offsets_oracle(radius_mm: float, spacing) -> list[tuple[int, int, int]]:
    """Structuring-element offsets via exact rational arithmetic."""
    semi = [max(1, int(np.floor(radius_mm / s + 0.5))) for s in spacing]
    a, b, c = semi
    out = []
    for dx in range(-a, a + 1):
        for dy in range(-b, b + 1):
            for dz in range(-c, c + 1):
                lhs = (
                    Fraction(dx * dx, a * a)
                    + Fraction(dy * dy, b * b)
                    + Fraction(dz * dz, c * c)
                )
                if lhs <= 1:
                    out.append((dx, dy, dz))
    return out


def _shifted(mask: np.ndarray, offset, fill: bool = False) -> np.ndarray:
    """Mask translated by offset; ``fill`` flows in at the borders."""
    out = np.full(mask.shape, fill, dtype=bool)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    for axis, d in enumerate(offset):
        n = mask.shape[axis]
        if d >= 0:
            dst[axis] = slice(d, n)
            src[axis] = slice(0, n - d)
        else:
            dst[axis] = slice(0, n + d)
            src[axis] = slice(-d, n)
    out[tuple(dst)] = mask[tuple(src)]
    return out


def dilate_oracle(mask: np.ndarray, radius_mm: float, spacing) -> np.ndarray:
    """Naive sweep: stamp the element onto every foreground voxel."""
    if radius_mm == 0:
        return mask.astype(bool).copy()
    result = np.zeros_like(mask, dtype=bool)
    for offset in ellipsoid_offsets_oracle(radius_mm, spacing):
        result |= _shifted(mask.astype(bool), offset)
    return result


def erode_oracle(mask: np.ndarray, radius_mm: float, spacing) -> np.ndarray:
    """Naive sweep: keep a voxel only if every element offset that lands
    inside the grid lands on foreground (outside the grid never counts
    against a voxel, matching complement-dilate-complement on the grid)."""
    if radius_mm == 0:
        return mask.astype(bool).copy()
    result = np.ones_like(mask, dtype=bool)
    for offset in ellipsoid_offsets_oracle(radius_mm, spacing):
        result &= _shifted(mask.astype(bool), tuple(-d for d in offset), fill=True)
    return result & mask.astype(bool)


def union_find_components(mask: np.ndarray, connectivity: int) -> list[frozenset]:
    """Connected components by union-find, returned as voxel-index sets."""
    parent: dict[tuple, tuple] = {}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(x, y):
        rx, ry = find(x), find(y)
        if rx != ry:
            parent[rx] = ry

    fg = np.argwhere(mask)
    for idx in map(tuple, fg):
        parent[idx] = idx
    offsets = _OFFSETS_6 if connectivity == 6 else _OFFSETS_26
    shape = mask.shape
    for idx in map(tuple, fg):
        for off in offsets:
            nb = tuple(i + d for i, d in zip(idx, off))
            if all(0 <= v < s for v, s in zip(nb, shape)) and nb in parent:
                union(idx, nb)
    groups: dict[tuple, set] = {}
    for idx in parent:
        groups.setdefault(find(idx), set()).add(idx)
    return [frozenset(g) for g in groups.values()]


def parse_obj(blob: bytes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Test-only OBJ reader: (vertices, normals, triangles)."""
    verts, norms, tris = [], [], []
    for line in blob.decode("ascii").splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vn":
            norms.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            tris.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.array(verts), np.array(norms), np.array(tris, dtype=np.int64)
