"""Layered scene packaging: OBJ / binary glTF mesh export and the manifest
document the viewer consumes."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .meshing import SurfaceMesh

__all__ = [
    "LayerEntry",
    "SceneManifest",
    "build_manifest",
    "export_mesh",
    "mesh_file_counts",
    "validate_manifest",
    "write_scene",
]

MANIFEST_NAME = "manifest.json"
_FORMAT_EXT = {"obj": ".obj", "gltf_binary": ".glb"}


@dataclass(frozen=True)
class LayerEntry:
    """One scene layer: a mesh file plus its display metadata."""

    name: str
    mesh_uri: str
    color: tuple[float, float, float, float]
    visible_default: bool
    vertex_count: int
    triangle_count: int
    category: str

    def __post_init__(self):
        color = tuple(float(c) for c in self.color)
        if len(color) != 4 or any(not 0.0 <= c <= 1.0 for c in color):
            raise ValueError(f"color must be 4 reals in [0, 1], got {self.color}")
        object.__setattr__(self, "color", color)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "mesh_uri": self.mesh_uri,
            "color": list(self.color),
            "visible_default": self.visible_default,
            "vertex_count": self.vertex_count,
            "triangle_count": self.triangle_count,
            "category": self.category,
        }


@dataclass(frozen=True)
class SceneManifest:
    """Document describing a scene's layers; version 1, units mm."""

    scene_name: str
    layers: tuple[LayerEntry, ...]
    provenance: dict = field(default_factory=dict)
    version: int = 1
    units: str = "mm"

    def __post_init__(self):
        if self.version != 1:
            raise ValueError("manifest version must be 1")
        if self.units != "mm":
            raise ValueError("manifest units must be 'mm'")
        names = [layer.name for layer in self.layers]
        for i, name in enumerate(names):
            if name in names[:i]:
                raise ValueError(
                    f"duplicate layer name {name!r} (positions {names.index(name)} and {i})"
                )
        object.__setattr__(self, "layers", tuple(self.layers))

    def to_json(self) -> str:
        doc = {
            "version": self.version,
            "scene_name": self.scene_name,
            "units": self.units,
            "layers": [layer.to_dict() for layer in self.layers],
            "provenance": dict(self.provenance),
        }
        return json.dumps(doc, indent=2) + "\n"


def _slug(name: str) -> str:
    out = "".join(c.lower() if c.isalnum() else "_" for c in name).strip("_")
    return out or "layer"


def export_mesh(mesh: SurfaceMesh, fmt: str = "gltf_binary") -> bytes:
    """Serialize a mesh as OBJ text or single-buffer binary glTF 2.0."""
    if fmt == "obj":
        return _export_obj(mesh)
    if fmt == "gltf_binary":
        return _export_glb(mesh)
    raise ValueError(f"unsupported mesh format {fmt!r}")


def _export_obj(mesh: SurfaceMesh) -> bytes:
    lines = [f"o {mesh.layer_name or 'mesh'}"]
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for n in mesh.normals:
        lines.append(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}")
    for a, b, c in mesh.triangles + 1:  # OBJ indices are 1-based
        lines.append(f"f {a}//{a} {b}//{b} {c}//{c}")
    return ("\n".join(lines) + "\n").encode("ascii")


def _export_glb(mesh: SurfaceMesh) -> bytes:
    positions = mesh.vertices.astype("<f4")
    normals = mesh.normals.astype("<f4")
    indices = mesh.triangles.astype("<u4")

    blobs = [positions.tobytes(), normals.tobytes(), indices.tobytes()]
    views = []
    offset = 0
    for i, blob in enumerate(blobs):
        views.append({
            "buffer": 0,
            "byteOffset": offset,
            "byteLength": len(blob),
            "target": 34963 if i == 2 else 34962,
        })
        offset += len(blob)
        pad = (-offset) % 4
        blobs[i] = blob + b"\x00" * pad
        offset += pad
    binary = b"".join(blobs)

    pos_min = positions.min(axis=0) if len(positions) else np.zeros(3, dtype="<f4")
    pos_max = positions.max(axis=0) if len(positions) else np.zeros(3, dtype="<f4")
    doc = {
        "asset": {"version": "2.0", "generator": "cranioforge"},
        "scene": 0,
        "scenes": [{"nodes": [0]}],
        "nodes": [{"mesh": 0, "name": mesh.layer_name or "mesh"}],
        "meshes": [{
            "primitives": [{
                "attributes": {"POSITION": 0, "NORMAL": 1},
                "indices": 2,
                "mode": 4,
            }]
        }],
        "accessors": [
            {
                "bufferView": 0,
                "componentType": 5126,
                "count": len(positions),
                "type": "VEC3",
                "min": [float(x) for x in pos_min],
                "max": [float(x) for x in pos_max],
            },
            {
                "bufferView": 1,
                "componentType": 5126,
                "count": len(normals),
                "type": "VEC3",
            },
            {
                "bufferView": 2,
                "componentType": 5125,
                "count": int(indices.size),
                "type": "SCALAR",
            },
        ],
        "bufferViews": views,
        "buffers": [{"byteLength": len(binary)}],
    }
    payload = json.dumps(doc, separators=(",", ":")).encode("utf-8")
    payload += b" " * ((-len(payload)) % 4)
    binary += b"\x00" * ((-len(binary)) % 4)
    total = 12 + 8 + len(payload) + 8 + len(binary)
    out = struct.pack("<III", 0x46546C67, 2, total)  # magic "glTF", version 2
    out += struct.pack("<II", len(payload), 0x4E4F534A) + payload  # JSON chunk
    out += struct.pack("<II", len(binary), 0x004E4942) + binary  # BIN chunk
    return out


def mesh_file_counts(path: Path) -> tuple[int, int]:
    """(vertex, triangle) counts of an exported OBJ or GLB mesh file."""
    path = Path(path)
    blob = path.read_bytes()
    if path.suffix == ".obj":
        nv = nt = 0
        for line in blob.decode("ascii", errors="replace").splitlines():
            if line.startswith("v "):
                nv += 1
            elif line.startswith("f "):
                nt += 1
        return nv, nt
    if path.suffix == ".glb":
        if blob[:4] != b"glTF":
            raise ValueError(f"{path} is not a binary glTF file")
        json_len = struct.unpack_from("<I", blob, 12)[0]
        doc = json.loads(blob[20:20 + json_len])
        prim = doc["meshes"][0]["primitives"][0]
        nv = doc["accessors"][prim["attributes"]["POSITION"]]["count"]
        ni = doc["accessors"][prim["indices"]]["count"]
        return int(nv), int(ni) // 3
    raise ValueError(f"unknown mesh file extension {path.suffix!r}")


def build_manifest(
    layers,
    scene_name: str,
    mesh_format: str = "gltf_binary",
    provenance: dict | None = None,
) -> SceneManifest:
    """Assemble a manifest from (mesh, color, category, visible_default)
    tuples; counts come from the meshes, URIs from slugged layer names."""
    if mesh_format not in _FORMAT_EXT:
        raise ValueError(f"unsupported mesh format {mesh_format!r}")
    ext = _FORMAT_EXT[mesh_format]
    entries = []
    uris = set()
    for mesh, color, category, visible_default in layers:
        uri = _slug(mesh.layer_name) + ext
        if uri in uris:
            raise ValueError(f"layer names collide on mesh file {uri!r}")
        uris.add(uri)
        entries.append(LayerEntry(
            name=mesh.layer_name,
            mesh_uri=uri,
            color=tuple(color),
            visible_default=bool(visible_default),
            vertex_count=mesh.vertex_count,
            triangle_count=mesh.triangle_count,
            category=category,
        ))
    return SceneManifest(scene_name=scene_name, layers=tuple(entries),
                         provenance=dict(provenance or {}))


def write_scene(scene_dir: Path, manifest: SceneManifest, meshes,
                mesh_format: str = "gltf_binary") -> Path:
    """Write mesh files and manifest into ``scene_dir`` (created if needed)."""
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    by_name = {mesh.layer_name: mesh for mesh in meshes}
    for layer in manifest.layers:
        mesh = by_name[layer.name]
        (scene_dir / layer.mesh_uri).write_bytes(export_mesh(mesh, mesh_format))
    (scene_dir / MANIFEST_NAME).write_text(manifest.to_json())
    return scene_dir


_LAYER_FIELDS = {
    "name": str,
    "mesh_uri": str,
    "color": list,
    "visible_default": bool,
    "vertex_count": int,
    "triangle_count": int,
    "category": str,
}


def validate_manifest(document: bytes, scene_dir: Path) -> list[str]:
    """Check a manifest document against its scene directory.

    Returns a list of human-readable violations; an empty list means the
    scene is valid. Violations are data, not exceptions.
    """
    violations: list[str] = []
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        return [f"manifest is not valid JSON: {exc}"]
    if not isinstance(doc, dict):
        return ["manifest root must be a JSON object"]

    for key in ("version", "scene_name", "units", "layers", "provenance"):
        if key not in doc:
            violations.append(f"missing manifest field {key!r}")
    if doc.get("version") != 1:
        violations.append(f"unsupported manifest version {doc.get('version')!r}")
    if doc.get("units") != "mm":
        violations.append(f"units must be 'mm', got {doc.get('units')!r}")
    layers = doc.get("layers", [])
    if not isinstance(layers, list):
        return violations + ["layers must be a list"]

    scene_dir = Path(scene_dir)
    seen: dict[str, int] = {}
    for i, layer in enumerate(layers):
        where = f"layer {i}"
        if not isinstance(layer, dict):
            violations.append(f"{where}: entry must be an object")
            continue
        for key, kind in _LAYER_FIELDS.items():
            if key not in layer:
                violations.append(f"{where}: missing field {key!r}")
            elif not isinstance(layer[key], kind) or (
                kind is int and isinstance(layer[key], bool)
            ):
                violations.append(f"{where}: field {key!r} has wrong type")
        name = layer.get("name")
        if isinstance(name, str):
            if name in seen:
                violations.append(
                    f"duplicate layer name {name!r} (layers {seen[name]} and {i})"
                )
            else:
                seen[name] = i
            where = f"layer {name!r}"
        color = layer.get("color")
        if isinstance(color, list) and (
            len(color) != 4
            or any(not isinstance(c, (int, float)) or not 0 <= c <= 1 for c in color)
        ):
            violations.append(f"{where}: color must be 4 reals in [0, 1]")
        uri = layer.get("mesh_uri")
        if not isinstance(uri, str):
            continue
        mesh_path = scene_dir / uri
        if not mesh_path.is_file():
            violations.append(f"{where}: mesh file {uri!r} is missing")
            continue
        try:
            nv, nt = mesh_file_counts(mesh_path)
        except (ValueError, KeyError, json.JSONDecodeError, struct.error) as exc:
            violations.append(f"{where}: mesh file {uri!r} unreadable: {exc}")
            continue
        if isinstance(layer.get("vertex_count"), int) and layer["vertex_count"] != nv:
            violations.append(
                f"{where}: vertex_count {layer['vertex_count']} != file count {nv}"
            )
        if isinstance(layer.get("triangle_count"), int) and layer["triangle_count"] != nt:
            violations.append(
                f"{where}: triangle_count {layer['triangle_count']} != file count {nt}"
            )
    return violations
