"""Watertight isosurface extraction by marching tetrahedra, plus the mesh
conditioning passes the viewer needs (normals, two-sided duplication,
Laplacian smoothing, edge-collapse decimation)."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .segmentation import LabelMask
from .volume import VoxelVolume

__all__ = [
    "MeshingConfig",
    "SurfaceMesh",
    "compute_vertex_normals",
    "decimate",
    "enclosed_volume",
    "extract_isosurface",
    "laplacian_smooth",
    "make_two_sided",
    "surface_area",
    "watertight_report",
]


@dataclass(frozen=True)
class SurfaceMesh:
    """Indexed triangle mesh in world mm with per-vertex normals.

    Counter-clockwise winding is outward. ``warnings`` carries non-fatal
    flags such as "open-boundary" or "decimation-target-unreached".
    """

    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray
    layer_name: str = ""
    two_sided: bool = False
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if normals.shape != vertices.shape:
            raise ValueError("need exactly one normal per vertex")
        if triangles.size:
            if triangles.min() < 0 or triangles.max() >= len(vertices):
                raise ValueError("triangle index out of range")
            a, b, c = triangles[:, 0], triangles[:, 1], triangles[:, 2]
            if np.any((a == b) | (b == c) | (a == c)):
                raise ValueError("degenerate triangle (repeated vertex index)")
        if len(normals):
            lengths = np.linalg.norm(normals, axis=1)
            if np.max(np.abs(lengths - 1.0)) > 1e-6:
                raise ValueError("normals must be unit length within 1e-6")
        for arr in (vertices, triangles, normals):
            arr.flags.writeable = False
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "warnings", tuple(self.warnings))

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    @property
    def triangle_count(self) -> int:
        return len(self.triangles)


@dataclass(frozen=True)
class MeshingConfig:
    """Isosurface extraction knobs. ``presmooth_sigma_voxels`` defaults to
    1.0 for binary masks and 0 for scalar fields when left as None."""

    presmooth_sigma_voxels: float | None = None
    iso_value: float = 0.5
    smoothing_iterations: int = 0
    smoothing_lambda: float = 0.5
    target_vertices: int | None = None

    def __post_init__(self):
        if self.presmooth_sigma_voxels is not None and self.presmooth_sigma_voxels < 0:
            raise ValueError("presmooth_sigma_voxels must be nonnegative")
        if self.smoothing_iterations < 0:
            raise ValueError("smoothing_iterations must be nonnegative")
        if not 0.0 < self.smoothing_lambda < 1.0:
            raise ValueError("smoothing_lambda must lie in (0, 1)")
        if self.target_vertices is not None and self.target_vertices < 4:
            raise ValueError("target_vertices must be >= 4")


# Each cube is split into 6 tetrahedra sharing the main diagonal c0-c7.
# Corners are numbered by bits: b = dx + 2*dy + 4*dz. The decomposition is
# identical in every cube, so tetra faces match across cube boundaries and
# extraction is watertight without ambiguous-case handling.
_CORNER_OFFSETS = [(b & 1, (b >> 1) & 1, (b >> 2) & 1) for b in range(8)]
_TETRAHEDRA = [
    (0, 1, 3, 7),
    (0, 1, 5, 7),
    (0, 2, 3, 7),
    (0, 2, 6, 7),
    (0, 4, 5, 7),
    (0, 4, 6, 7),
]


def _tet_parity(tet) -> int:
    p = np.array([_CORNER_OFFSETS[v] for v in tet], dtype=np.float64)
    return 1 if np.linalg.det(p[1:] - p[0]) > 0 else -1


_TET_PARITY = [_tet_parity(t) for t in _TETRAHEDRA]

# Triangles per inside-bitmask for a positively oriented tetrahedron, with
# winding chosen so normals point from inside (value > iso) to outside.
# Entries are local edge pairs (a, b) on which the crossing vertex lies.
_E01, _E02, _E03, _E12, _E13, _E23 = (0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)


def _rev(tri):
    return (tri[0], tri[2], tri[1])


_BASE_CASES = {
    0b0001: [(_E01, _E02, _E03)],
    0b0010: [(_E01, _E13, _E12)],
    0b0100: [(_E23, _E02, _E12)],
    0b1000: [(_E23, _E13, _E03)],
    0b0011: [(_E02, _E03, _E13), (_E02, _E13, _E12)],
    0b0101: [(_E03, _E01, _E12), (_E03, _E12, _E23)],
    0b1001: [(_E01, _E02, _E23), (_E01, _E23, _E13)],
}
_TET_CASES: dict[int, list] = {0: [], 15: []}
for _mask, _tris in _BASE_CASES.items():
    _TET_CASES[_mask] = _tris
    _TET_CASES[0b1111 ^ _mask] = [_rev(t) for t in _tris]


def extract_isosurface(
    field, config: MeshingConfig = MeshingConfig(), layer_name: str = ""
) -> SurfaceMesh:
    """Extract a watertight isosurface mesh from a volume or label mask.

    Masks are converted to a 0/1 scalar field and Gaussian pre-smoothed.
    Grid nodes exactly at the iso value are nudged by +1e-9 of the value
    range so every tetra edge crossing is strict; vertices are welded by
    grid-edge identity, never by coordinate rounding. Foreground touching
    the grid boundary leaves an open surface and sets the "open-boundary"
    warning.
    """
    if isinstance(field, LabelMask):
        scalar = field.foreground().astype(np.float64)
        sigma = 1.0 if config.presmooth_sigma_voxels is None else config.presmooth_sigma_voxels
        affine = field.affine
    elif isinstance(field, VoxelVolume):
        scalar = field.data.astype(np.float64)
        sigma = 0.0 if config.presmooth_sigma_voxels is None else config.presmooth_sigma_voxels
        affine = field.affine
    else:
        raise TypeError(f"expected VoxelVolume or LabelMask, got {type(field)!r}")
    if sigma > 0:
        scalar = ndimage.gaussian_filter(scalar, sigma=sigma, mode="nearest")

    iso = config.iso_value
    value_range = float(scalar.max() - scalar.min())
    at_iso = scalar == iso
    if at_iso.any() and value_range > 0:
        scalar = scalar.copy()
        scalar[at_iso] += 1e-9 * value_range

    inside = scalar > iso
    warnings: tuple[str, ...] = ()
    if inside.any():
        shell = inside.copy()
        shell[1:-1, 1:-1, 1:-1] = False
        if shell.any():
            warnings = ("open-boundary",)
    if not inside.any() or inside.all():
        empty = np.zeros((0, 3))
        return SurfaceMesh(empty, np.zeros((0, 3), dtype=np.int64), empty,
                           layer_name=layer_name, warnings=warnings)

    nx, ny, nz = scalar.shape
    node_id = np.arange(nx * ny * nz, dtype=np.int64).reshape(
        (nx, ny, nz), order="F"
    )
    corner_ids = []
    corner_inside = []
    for bx, by, bz in _CORNER_OFFSETS:
        sl = (slice(bx, nx - 1 + bx), slice(by, ny - 1 + by), slice(bz, nz - 1 + bz))
        corner_ids.append(node_id[sl].reshape(-1))
        corner_inside.append(inside[sl].reshape(-1))

    n_nodes = nx * ny * nz
    tri_edge_keys = []  # (T, 3) int64 edge keys, one row per triangle
    for tet, parity in zip(_TETRAHEDRA, _TET_PARITY):
        case = (
            corner_inside[tet[0]].astype(np.int8)
            + (corner_inside[tet[1]].astype(np.int8) << 1)
            + (corner_inside[tet[2]].astype(np.int8) << 2)
            + (corner_inside[tet[3]].astype(np.int8) << 3)
        )
        for value in range(1, 15):
            sel = np.nonzero(case == value)[0]
            if sel.size == 0:
                continue
            for tri in _TET_CASES[value]:
                rows = []
                tri_oriented = tri if parity > 0 else _rev(tri)
                for a, b in tri_oriented:
                    na = corner_ids[tet[a]][sel]
                    nb = corner_ids[tet[b]][sel]
                    lo = np.minimum(na, nb)
                    hi = np.maximum(na, nb)
                    rows.append(lo * n_nodes + hi)
                tri_edge_keys.append(np.stack(rows, axis=1))
    if not tri_edge_keys:
        empty = np.zeros((0, 3))
        return SurfaceMesh(empty, np.zeros((0, 3), dtype=np.int64), empty,
                           layer_name=layer_name, warnings=warnings)
    keys = np.concatenate(tri_edge_keys, axis=0)
    uniq, inverse = np.unique(keys.reshape(-1), return_inverse=True)
    triangles = inverse.reshape(-1, 3).astype(np.int64)

    flat = scalar.reshape(-1, order="F")
    na = uniq // n_nodes
    nb = uniq % n_nodes
    va = flat[na]
    vb = flat[nb]
    t = (iso - va) / (vb - va)
    pa = np.stack([na % nx, (na // nx) % ny, na // (nx * ny)], axis=1).astype(np.float64)
    pb = np.stack([nb % nx, (nb // nx) % ny, nb // (nx * ny)], axis=1).astype(np.float64)
    voxel_pts = pa + t[:, None] * (pb - pa)
    world = voxel_pts @ affine[:3, :3].T + affine[:3, 3]

    mesh = SurfaceMesh(
        vertices=world,
        triangles=triangles,
        normals=_unit_rows(np.tile([0.0, 0.0, 1.0], (len(world), 1))),
        layer_name=layer_name,
        warnings=warnings,
    )
    return compute_vertex_normals(mesh)


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    lengths = np.linalg.norm(vectors, axis=1, keepdims=True)
    lengths[lengths == 0] = 1.0
    return vectors / lengths


def _face_cross(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Per-face cross products; magnitude is twice the face area."""
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    return np.cross(b - a, c - a)


def compute_vertex_normals(mesh: SurfaceMesh) -> SurfaceMesh:
    """Area-weighted per-vertex normals; geometry is untouched."""
    if mesh.triangle_count == 0:
        return mesh
    cross = _face_cross(mesh.vertices, mesh.triangles)
    accum = np.zeros_like(mesh.vertices)
    for col in range(3):
        np.add.at(accum, mesh.triangles[:, col], cross)
    lengths = np.linalg.norm(accum, axis=1)
    isolated = lengths < 1e-300
    warnings = mesh.warnings
    if isolated.any():
        accum[isolated] = [0.0, 0.0, 1.0]
        if "isolated-vertex" not in warnings:
            warnings = warnings + ("isolated-vertex",)
    return replace(mesh, normals=_unit_rows(accum), warnings=warnings)


def make_two_sided(mesh: SurfaceMesh) -> SurfaceMesh:
    """Append a reversed-winding copy with negated normals for inner views."""
    if mesh.two_sided:
        raise ValueError("mesh is already two-sided")
    n = mesh.vertex_count
    vertices = np.concatenate([mesh.vertices, mesh.vertices])
    normals = np.concatenate([mesh.normals, -mesh.normals])
    flipped = mesh.triangles[:, [0, 2, 1]] + n
    triangles = np.concatenate([mesh.triangles, flipped])
    return replace(mesh, vertices=vertices, normals=normals, triangles=triangles,
                   two_sided=True)


def _unique_edges(triangles: np.ndarray) -> np.ndarray:
    edges = np.concatenate(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]]
    )
    edges = np.sort(edges, axis=1)
    return np.unique(edges, axis=0)


def laplacian_smooth(mesh: SurfaceMesh, iterations: int, lam: float = 0.5) -> SurfaceMesh:
    """Uniform Laplacian smoothing: each step moves every vertex by
    lam * (neighbor centroid - vertex). Topology is unchanged."""
    if iterations < 0:
        raise ValueError("iterations must be nonnegative")
    if iterations == 0 or mesh.triangle_count == 0:
        return mesh
    edges = _unique_edges(mesh.triangles)
    counts = np.zeros(mesh.vertex_count)
    np.add.at(counts, edges[:, 0], 1.0)
    np.add.at(counts, edges[:, 1], 1.0)
    counts[counts == 0] = 1.0
    pos = mesh.vertices.copy()
    for _ in range(iterations):
        sums = np.zeros_like(pos)
        np.add.at(sums, edges[:, 0], pos[edges[:, 1]])
        np.add.at(sums, edges[:, 1], pos[edges[:, 0]])
        pos += lam * (sums / counts[:, None] - pos)
    return compute_vertex_normals(replace(mesh, vertices=pos))


def watertight_report(mesh: SurfaceMesh) -> dict:
    """Edge-manifold and orientation audit.

    A mesh is watertight when every undirected edge is used by exactly two
    triangles, traversed once in each direction.
    """
    tris = mesh.triangles
    directed = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    und = np.sort(directed, axis=1)
    _, counts = np.unique(und, axis=0, return_counts=True)
    boundary = int(np.sum(counts == 1))
    nonmanifold = int(np.sum(counts > 2))
    # orientation: each undirected pair must appear once per direction
    dir_uniq, dir_counts = np.unique(directed, axis=0, return_counts=True)
    misoriented = int(np.sum(dir_counts > 1))
    return {
        "watertight": boundary == 0 and nonmanifold == 0 and misoriented == 0,
        "boundary_edges": boundary,
        "nonmanifold_edges": nonmanifold,
        "misoriented_edges": misoriented,
        "edge_count": int(len(counts)),
    }


def enclosed_volume(mesh: SurfaceMesh) -> float:
    """Signed enclosed volume via tetrahedra to the origin (positive for
    outward orientation)."""
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    return float(np.sum(np.einsum("ij,ij->i", np.cross(a, b), c)) / 6.0)


def surface_area(mesh: SurfaceMesh) -> float:
    return float(np.sum(np.linalg.norm(_face_cross(mesh.vertices, mesh.triangles), axis=1)) / 2.0)


def decimate(mesh: SurfaceMesh, target_vertices: int) -> SurfaceMesh:
    """Decimate a watertight mesh by shortest-edge collapse to midpoints.

    Collapses that would break edge-manifoldness (link condition) or flip
    any surviving incident face normal by more than 90 degrees are skipped.
    If the target cannot be reached the best achieved mesh is returned with
    a "decimation-target-unreached" warning.
    """
    if target_vertices < 4:
        raise ValueError("target_vertices must be >= 4")
    if mesh.vertex_count <= target_vertices:
        return mesh

    pos = [mesh.vertices[i].copy() for i in range(mesh.vertex_count)]
    faces: list[list[int] | None] = [list(t) for t in mesh.triangles]
    vertex_faces: list[set[int]] = [set() for _ in range(mesh.vertex_count)]
    for fid, tri in enumerate(faces):
        for v in tri:
            vertex_faces[v].add(fid)
    alive = [True] * mesh.vertex_count
    alive_count = mesh.vertex_count
    stamp = [0] * mesh.vertex_count

    def edge_entry(u: int, v: int):
        if u > v:
            u, v = v, u
        d = pos[u] - pos[v]
        return (float(d @ d), u, v, stamp[u], stamp[v])

    def neighbors(u: int) -> set[int]:
        out = set()
        for fid in vertex_faces[u]:
            out.update(faces[fid])
        out.discard(u)
        return out

    heap = []
    seen = set()
    for tri in faces:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = (min(a, b), max(a, b))
            if key not in seen:
                seen.add(key)
                heap.append(edge_entry(*key))
    heapq.heapify(heap)

    def try_collapse(u: int, v: int) -> bool:
        shared = vertex_faces[u] & vertex_faces[v]
        if len(shared) != 2:
            return False
        wing = {w for fid in shared for w in faces[fid]} - {u, v}
        if neighbors(u) & neighbors(v) != wing:
            return False  # link condition: collapse would pinch the surface
        midpoint = (pos[u] + pos[v]) / 2.0
        affected = (vertex_faces[u] | vertex_faces[v]) - shared
        for fid in affected:
            tri = faces[fid]
            old = np.cross(pos[tri[1]] - pos[tri[0]], pos[tri[2]] - pos[tri[0]])
            moved = [midpoint if w in (u, v) else pos[w] for w in tri]
            new = np.cross(moved[1] - moved[0], moved[2] - moved[0])
            norm = np.linalg.norm(new)
            if norm < 1e-30 or old @ new <= 0:
                return False
        pos[u] = midpoint
        for fid in shared:
            for w in faces[fid]:
                vertex_faces[w].discard(fid)
            faces[fid] = None
        for fid in list(vertex_faces[v]):
            tri = faces[fid]
            faces[fid] = [u if w == v else w for w in tri]
            vertex_faces[v].discard(fid)
            vertex_faces[u].add(fid)
        alive[v] = False
        stamp[u] += 1
        stamp[v] += 1
        for w in neighbors(u):
            heapq.heappush(heap, edge_entry(u, w))
        return True

    warnings = mesh.warnings
    while alive_count > target_vertices:
        progressed = False
        while heap and alive_count > target_vertices:
            _, u, v, su, sv = heapq.heappop(heap)
            if not (alive[u] and alive[v]):
                continue
            if su != stamp[u] or sv != stamp[v]:
                continue  # stale entry; a fresh one was pushed on collapse
            if alive_count <= 4:
                break
            if try_collapse(u, v):
                alive_count -= 1
                progressed = True
        if alive_count <= target_vertices:
            break
        if not progressed:
            if "decimation-target-unreached" not in warnings:
                warnings = warnings + ("decimation-target-unreached",)
            break
        # rebuild the queue: earlier-blocked edges may be legal now
        heap = []
        seen = set()
        for tri in faces:
            if tri is None:
                continue
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (min(a, b), max(a, b))
                if key not in seen:
                    seen.add(key)
                    heap.append(edge_entry(*key))
        heapq.heapify(heap)

    remap = np.full(mesh.vertex_count, -1, dtype=np.int64)
    kept = [i for i in range(mesh.vertex_count) if alive[i]]
    remap[kept] = np.arange(len(kept))
    new_vertices = np.array([pos[i] for i in kept])
    new_faces = np.array(
        [[remap[w] for w in tri] for tri in faces if tri is not None], dtype=np.int64
    )
    out = SurfaceMesh(
        vertices=new_vertices,
        triangles=new_faces,
        normals=_unit_rows(np.tile([0.0, 0.0, 1.0], (len(new_vertices), 1))),
        layer_name=mesh.layer_name,
        two_sided=mesh.two_sided,
        warnings=warnings,
    )
    return compute_vertex_normals(out)
