"""Command-line interface: info, register, run, serve.

Exit codes are a stable contract: 0 success, 2 input/parse error,
3 numerical failure, 4 invalid scene.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from functools import partial
from http.server import SimpleHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .pipeline import ConfigError, SceneValidationError, load_config, run_pipeline
from .registration import (
    NoOverlapError,
    RegistrationConfig,
    RigidTransform,
    UndefinedVarianceError,
    register_rigid,
)
from .scene import MANIFEST_NAME, validate_manifest
from .volume import Interpolation, NiftiError, parse_nifti, resample, write_nifti

__all__ = ["main"]

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_SCENE = 4


def _read_volume(path: str):
    return parse_nifti(Path(path).read_bytes())


def _fmt(values) -> str:
    return " ".join(str(float(v)) for v in values)


def cmd_info(args) -> int:
    volume = _read_volume(args.volume)
    print(f"dims: {volume.dims[0]} {volume.dims[1]} {volume.dims[2]}")
    print(f"spacing: {_fmt(volume.spacing)}")
    print(f"affine: {_fmt(volume.affine.reshape(-1))}")
    print(f"intensity_range: {_fmt(volume.intensity_range)}")
    return EXIT_OK


def write_transform(path: Path, transform: RigidTransform) -> None:
    """16 ASCII reals, row-major 4x4."""
    rows = [" ".join(repr(float(v)) for v in row) for row in transform.matrix]
    Path(path).write_text("\n".join(rows) + "\n")


def read_transform(path: Path) -> RigidTransform:
    values = [float(v) for v in Path(path).read_text().split()]
    if len(values) != 16:
        raise ValueError(f"transform file must hold 16 reals, found {len(values)}")
    return RigidTransform.from_matrix(np.array(values).reshape(4, 4))


def cmd_register(args) -> int:
    moving = _read_volume(args.moving)
    fixed = _read_volume(args.fixed)
    config = RegistrationConfig(metric=args.metric)
    result = register_rigid(moving, fixed, config)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    write_transform(out / "transform.txt", result.transform)
    resliced = resample(moving, fixed, result.transform, Interpolation(args.interpolation))
    (out / "resampled.nii").write_bytes(write_nifti(resliced))
    print(f"score: {result.score:.6f}")
    if not result.converged:
        print("warning: optimizer hit max_iterations before converging", file=sys.stderr)
    return EXIT_OK


def cmd_run(args) -> int:
    config = load_config(args.config)
    if args.output:
        config = dataclasses.replace(config, output_dir=str(Path(args.output).resolve()))
    scene_dir = run_pipeline(config, threads=args.threads)
    print(f"scene: {scene_dir}")
    return EXIT_OK


class _SceneHandler(SimpleHTTPRequestHandler):
    extensions_map = {
        ".json": "application/json",
        ".glb": "model/gltf-binary",
        ".obj": "model/obj",
        "": "application/octet-stream",
    }

    def end_headers(self):
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Cache-Control", "no-store")
        super().end_headers()

    def log_message(self, fmt, *log_args):  # quiet by default
        pass


def cmd_serve(args) -> int:
    scene_dir = Path(args.scene)
    manifest = scene_dir / MANIFEST_NAME
    if not manifest.is_file():
        print(f"error: {manifest} not found", file=sys.stderr)
        return EXIT_SCENE
    violations = validate_manifest(manifest.read_bytes(), scene_dir)
    if violations:
        for v in violations:
            print(f"invalid scene: {v}", file=sys.stderr)
        return EXIT_SCENE
    handler = partial(_SceneHandler, directory=str(scene_dir))
    server = ThreadingHTTPServer(("127.0.0.1", args.port), handler)
    print(f"serving {scene_dir} at http://127.0.0.1:{server.server_address[1]}/", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cranioforge",
        description="Volume-to-scene pipeline: segmentation, meshing, and scene export.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_info = sub.add_parser("info", help="print dims/spacing/affine/intensity range")
    p_info.add_argument("volume", help="NIfTI-1 file")
    p_info.set_defaults(func=cmd_info)

    p_reg = sub.add_parser("register", help="rigidly align a moving volume to a fixed one")
    p_reg.add_argument("moving")
    p_reg.add_argument("fixed")
    p_reg.add_argument("--output", default=".", help="directory for transform.txt and resampled.nii")
    p_reg.add_argument("--metric", choices=("nmi", "ncc"), default="nmi")
    p_reg.add_argument("--interpolation", choices=("nearest", "trilinear"), default="trilinear")
    p_reg.set_defaults(func=cmd_register)

    p_run = sub.add_parser("run", help="execute a pipeline config and build a scene")
    p_run.add_argument("config", help="pipeline JSON file")
    p_run.add_argument("--output", default=None, help="override the config's output_dir")
    p_run.add_argument("--threads", type=int, default=0,
                       help="worker threads (0 = auto, or CRANIOFORGE_THREADS)")
    p_run.set_defaults(func=cmd_run)

    p_serve = sub.add_parser("serve", help="serve a scene directory over HTTP")
    p_serve.add_argument("scene", help="scene directory containing manifest.json")
    p_serve.add_argument("--port", type=int, default=8080)
    p_serve.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (NiftiError, ConfigError, FileNotFoundError, IsADirectoryError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NoOverlapError, UndefinedVarianceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except SceneValidationError as exc:
        print(f"invalid scene: {exc}", file=sys.stderr)
        return EXIT_SCENE


if __name__ == "__main__":
    sys.exit(main())
