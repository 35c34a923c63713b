"""Declarative pipeline execution: registration, masking, growing, meshing,
and scene export driven by a JSON config."""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .meshing import MeshingConfig, decimate, extract_isosurface, laplacian_smooth, make_two_sided
from .registration import RegistrationConfig, register_rigid
from .scene import SceneManifest, build_manifest, validate_manifest, write_scene
from .segmentation import GrowthStage, LabelMask, SeedSet, dilate, largest_component, region_grow
from .volume import Interpolation, VoxelVolume, parse_nifti, resample

__all__ = [
    "ConfigError",
    "PipelineConfig",
    "SceneValidationError",
    "load_config",
    "run_pipeline",
]


class ConfigError(ValueError):
    """Pipeline config is structurally invalid."""


class SceneValidationError(RuntimeError):
    """A freshly written scene failed manifest validation."""


@dataclass(frozen=True)
class InputSpec:
    name: str
    path: str
    register: bool = False
    interpolation: str = "trilinear"


@dataclass(frozen=True)
class DomainSpec:
    """Restrict growth to the inside or outside of a named mask, optionally
    dilated first (the dilated-skull band that stops spillage)."""

    source: str
    dilate_mm: float = 0.0
    keep: str = "outside"


@dataclass(frozen=True)
class StructureSpec:
    name: str
    source: str
    seeds: tuple[tuple[int, int, int], ...]
    stages: tuple[GrowthStage, ...]
    color: tuple[float, float, float, float]
    category: str
    domain: DomainSpec | None = None
    largest_component: bool = False
    smoothing_iterations: int = 0
    decimate_target: int | None = None
    two_sided: bool = False
    visible_default: bool = True


@dataclass(frozen=True)
class ExternalMaskSpec:
    name: str
    path: str
    color: tuple[float, float, float, float]
    category: str
    visible_default: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    scene_name: str
    reference_volume: str
    output_dir: str
    inputs: tuple[InputSpec, ...] = ()
    structures: tuple[StructureSpec, ...] = ()
    external_masks: tuple[ExternalMaskSpec, ...] = ()
    mesh_format: str = "gltf_binary"

    def __post_init__(self):
        names = [s.name for s in self.structures] + [m.name for m in self.external_masks]
        for i, name in enumerate(names):
            if name in names[:i]:
                raise ConfigError(f"duplicate structure name {name!r}")
        input_names = {spec.name for spec in self.inputs} | {"reference"}
        if len(input_names) - 1 != len(self.inputs):
            raise ConfigError("duplicate input name")
        known_masks: set[str] = set()
        for spec in self.structures:
            if spec.source not in input_names:
                raise ConfigError(
                    f"structure {spec.name!r} references unknown source {spec.source!r}"
                )
            if spec.domain is not None and spec.domain.source not in known_masks:
                raise ConfigError(
                    f"structure {spec.name!r} domain references {spec.domain.source!r}, "
                    "which is not defined earlier in the pipeline"
                )
            known_masks.add(spec.name)
        if self.mesh_format not in ("obj", "gltf_binary"):
            raise ConfigError(f"unsupported mesh_format {self.mesh_format!r}")


def _color(value, where: str) -> tuple[float, float, float, float]:
    try:
        color = tuple(float(c) for c in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: color must be 4 numbers") from None
    if len(color) != 4 or any(not 0.0 <= c <= 1.0 for c in color):
        raise ConfigError(f"{where}: color must be 4 reals in [0, 1]")
    return color


def _parse_stage(entry: dict, where: str) -> GrowthStage:
    try:
        return GrowthStage(
            low=float(entry["low"]),
            high=float(entry["high"]),
            connectivity=int(entry.get("connectivity", 6)),
            band_radius_mm=float(entry.get("band_radius_mm", 0.0)),
        )
    except KeyError as exc:
        raise ConfigError(f"{where}: stage missing field {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(doc: dict, base_dir: Path) -> PipelineConfig:
    """Build a PipelineConfig from a parsed JSON document; paths are
    resolved relative to the config file's directory."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")

    def path_of(p) -> str:
        return str((base_dir / str(p)).resolve()) if not os.path.isabs(str(p)) else str(p)

    try:
        scene_name = str(doc["scene_name"])
        reference = path_of(doc["reference_volume"])
        output_dir = path_of(doc["output_dir"])
    except KeyError as exc:
        raise ConfigError(f"config missing field {exc}") from None

    inputs = []
    for entry in doc.get("inputs", []):
        inputs.append(InputSpec(
            name=str(entry["name"]),
            path=path_of(entry["path"]),
            register=bool(entry.get("register", False)),
            interpolation=str(entry.get("interpolation", "trilinear")),
        ))

    structures = []
    for entry in doc.get("structures", []):
        where = f"structure {entry.get('name', '?')!r}"
        post = entry.get("postprocess", {})
        domain = None
        if entry.get("domain") is not None:
            dom = entry["domain"]
            keep = str(dom.get("keep", "outside"))
            if keep not in ("inside", "outside"):
                raise ConfigError(f"{where}: domain keep must be inside or outside")
            domain = DomainSpec(
                source=str(dom["source"]),
                dilate_mm=float(dom.get("dilate_mm", 0.0)),
                keep=keep,
            )
        seeds = tuple(tuple(int(c) for c in seed) for seed in entry.get("seeds", []))
        stages = tuple(_parse_stage(s, where) for s in entry.get("stages", []))
        structures.append(StructureSpec(
            name=str(entry["name"]),
            source=str(entry.get("source", "reference")),
            seeds=seeds,
            stages=stages,
            color=_color(entry.get("color", [1, 1, 1, 1]), where),
            category=str(entry.get("category", "structure")),
            domain=domain,
            largest_component=bool(post.get("largest_component", False)),
            smoothing_iterations=int(post.get("smoothing_iterations", 0)),
            decimate_target=(
                int(post["decimate_target"]) if post.get("decimate_target") else None
            ),
            two_sided=bool(post.get("two_sided", False)),
            visible_default=bool(entry.get("visible_default", True)),
        ))

    externals = []
    for entry in doc.get("external_masks", []):
        where = f"external mask {entry.get('name', '?')!r}"
        externals.append(ExternalMaskSpec(
            name=str(entry["name"]),
            path=path_of(entry["path"]),
            color=_color(entry.get("color", [1, 1, 1, 1]), where),
            category=str(entry.get("category", "external")),
            visible_default=bool(entry.get("visible_default", True)),
        ))

    return PipelineConfig(
        scene_name=scene_name,
        reference_volume=reference,
        output_dir=output_dir,
        inputs=tuple(inputs),
        structures=tuple(structures),
        external_masks=tuple(externals),
        mesh_format=str(doc.get("mesh_format", "gltf_binary")),
    )


def load_config(path: Path) -> PipelineConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(doc, path.parent)


def _load_volume(path: str) -> VoxelVolume:
    return parse_nifti(Path(path).read_bytes())


def _interp(name: str) -> Interpolation:
    try:
        return Interpolation(name)
    except ValueError:
        raise ConfigError(f"unknown interpolation {name!r}") from None


class _StepTimer:
    def __init__(self, log):
        self.log = log

    def __call__(self, label: str):
        return _Step(label, self.log)


class _Step:
    def __init__(self, label: str, log):
        self.label = label
        self.log = log

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.log(f"[{time.perf_counter() - self.start:7.2f}s] {self.label}")
        return False


def resolve_threads(threads: int) -> int:
    """0 means auto: CRANIOFORGE_THREADS if set, else the CPU count."""
    if threads == 0:
        env = os.environ.get("CRANIOFORGE_THREADS", "").strip()
        if env:
            threads = int(env)
    if threads <= 0:
        threads = os.cpu_count() or 1
    return threads


def run_pipeline(config: PipelineConfig, threads: int = 0, log=print) -> Path:
    """Execute a pipeline config end to end; returns the scene directory.

    Deterministic: identical config and inputs produce byte-identical
    manifests except for the created_utc provenance timestamp.
    """
    threads = resolve_threads(threads)
    step = _StepTimer(log)

    with step("load reference volume"):
        reference = _load_volume(config.reference_volume)
    volumes: dict[str, VoxelVolume] = {"reference": reference}

    for spec in config.inputs:
        with step(f"load input {spec.name!r}"):
            vol = _load_volume(spec.path)
        if spec.register:
            with step(f"register {spec.name!r} to reference"):
                result = register_rigid(vol, reference, RegistrationConfig())
                log(f"          {spec.name}: score {result.score:.6f}"
                    f"{'' if result.converged else ' (unconverged)'}")
            with step(f"reslice {spec.name!r}"):
                vol = resample(vol, reference, result.transform, _interp(spec.interpolation))
        elif vol.grid_id != reference.grid_id:
            with step(f"reslice {spec.name!r} (identity)"):
                vol = resample(vol, reference, None, _interp(spec.interpolation))
        volumes[spec.name] = vol

    masks: dict[str, LabelMask] = {}
    for spec in config.external_masks:
        with step(f"load external mask {spec.name!r}"):
            vol = _load_volume(spec.path)
            if vol.grid_id != reference.grid_id:
                vol = resample(vol, reference, None, Interpolation.NEAREST)
            masks[spec.name] = LabelMask.from_bool(vol.data > 0.5, reference)

    for spec in config.structures:
        with step(f"segment structure {spec.name!r}"):
            source = volumes[spec.source]
            domain = None
            if spec.domain is not None:
                base = masks[spec.domain.source]
                band = dilate(base, spec.domain.dilate_mm) if spec.domain.dilate_mm > 0 else base
                if spec.domain.keep == "outside":
                    band = band.replace_data((~band.foreground()).astype("int32"))
                domain = band
            grown = region_grow(source, SeedSet(spec.seeds), spec.stages, domain)
            if spec.largest_component:
                grown = largest_component(grown, spec.stages[-1].connectivity)
            masks[spec.name] = grown

    layer_specs = list(config.structures) + list(config.external_masks)

    def build_mesh(spec):
        mask = masks[spec.name]
        mesh = extract_isosurface(mask, MeshingConfig(), layer_name=spec.name)
        iterations = getattr(spec, "smoothing_iterations", 0)
        if iterations:
            mesh = laplacian_smooth(mesh, iterations)
        target = getattr(spec, "decimate_target", None)
        if target is not None:
            mesh = decimate(mesh, target)
        if getattr(spec, "two_sided", False):
            mesh = make_two_sided(mesh)
        return mesh

    with step(f"mesh {len(layer_specs)} layers (threads={threads})"):
        if threads > 1 and len(layer_specs) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                meshes = list(pool.map(build_mesh, layer_specs))
        else:
            meshes = [build_mesh(spec) for spec in layer_specs]

    with step("export scene"):
        provenance = {
            "tool": f"cranioforge {__version__}",
            "config_sha256": hashlib.sha256(
                json.dumps(_config_digest(config), sort_keys=True).encode()
            ).hexdigest(),
            "created_utc": datetime.now(timezone.utc).isoformat(),
            "decimation": "shortest-edge-collapse",
        }
        manifest = build_manifest(
            [(mesh, spec.color, spec.category, spec.visible_default)
             for mesh, spec in zip(meshes, layer_specs)],
            scene_name=config.scene_name,
            mesh_format=config.mesh_format,
            provenance=provenance,
        )
        scene_dir = write_scene(Path(config.output_dir), manifest, meshes,
                                config.mesh_format)

    with step("validate scene"):
        violations = validate_manifest(
            (scene_dir / "manifest.json").read_bytes(), scene_dir
        )
        if violations:
            raise SceneValidationError("; ".join(violations))
    return scene_dir


def _config_digest(config: PipelineConfig) -> dict:
    """JSON-serializable view of the config for provenance hashing."""
    def plain(obj):
        if hasattr(obj, "__dataclass_fields__"):
            return {k: plain(getattr(obj, k)) for k in obj.__dataclass_fields__}
        if isinstance(obj, (list, tuple)):
            return [plain(x) for x in obj]
        return obj

    return plain(config)
