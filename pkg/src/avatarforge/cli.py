"""Command-line surface: optimize, render, animate, export-mesh, check-grads.

Exit codes: 2 invalid config, 3 guidance unreachable, 4 corrupt checkpoint,
5 malformed pose sequence, 6 empty mesh surface, 7 gradient tolerance
violation.
"""

from __future__ import annotations

import json
import os
import sys

import click
import numpy as np

from .body import Pose, Shape, PosedBody, SkeletonConfig, NUM_SHAPE
from .config import ConfigError, load_config
from .guidance import (GuidanceError, SDSGuidance, analytic_gaussian_denoiser,
                       remote_denoiser)
from .gradcheck import run_gradient_checks, checks_pass
from .images import write_png, write_pfm, encode_normal_map, read_png
from .mesh import EmptySurfaceError, extract_mesh, write_obj
from .render import Camera, RenderOptions, SHLighting, render
from .trainer import (DatasetPhotometricGuidance, ViewDataset, checkpoint_load,
                      CheckpointError, run_training)

EXIT_BAD_CONFIG = 2
EXIT_GUIDANCE = 3
EXIT_BAD_CHECKPOINT = 4
EXIT_BAD_SEQUENCE = 5
EXIT_EMPTY_SURFACE = 6
EXIT_GRAD_TOLERANCE = 7


@click.group()
def main():
    """Optimize and render reposable 3D avatars."""


def _fail(code: int, message: str, as_json: bool):
    if as_json:
        click.echo(json.dumps({"status": "error", "exit_code": code, "message": message}))
    else:
        click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_mu_image(path: str) -> np.ndarray:
    if path.endswith(".npy"):
        return np.load(path).astype(np.float64)
    return read_png(path)


def _build_guidance(spec: str, as_json: bool):
    try:
        kind, _, rest = spec.partition(":")
        if kind == "builtin":
            sub, _, arg = rest.partition(":")
            if sub == "photometric":
                return DatasetPhotometricGuidance(ViewDataset.load(arg))
            if sub == "gaussian":
                mu = _load_mu_image(arg)
                return SDSGuidance(analytic_gaussian_denoiser(mu))
            raise ValueError(f"unknown builtin guidance {sub!r}")
        if kind == "remote":
            return SDSGuidance(remote_denoiser(rest))
        raise ValueError(f"unknown guidance kind {kind!r}")
    except (OSError, ValueError, KeyError) as e:
        _fail(EXIT_BAD_CONFIG, f"guidance spec {spec!r}: {e}", as_json)


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--guidance", "guidance_spec", required=True,
              help="builtin:photometric:<views.npz> | builtin:gaussian:<image> | remote:<host:port>")
@click.option("--seed", type=int, default=None, help="override the config seed")
@click.option("--resume", is_flag=True)
@click.option("--json", "as_json", is_flag=True)
def optimize(config_path, out_dir, guidance_spec, seed, resume, as_json):
    """Run the optimization loop; writes checkpoints and metrics.jsonl."""
    try:
        cfg = load_config(config_path)
    except (OSError, ConfigError) as e:
        _fail(EXIT_BAD_CONFIG, str(e), as_json)
    if seed is not None:
        cfg.seed = seed
    guidance = _build_guidance(guidance_spec, as_json)
    skeleton = SkeletonConfig.default()
    try:
        state = run_training(cfg, skeleton, guidance, out_dir, resume=resume)
    except GuidanceError as e:
        _fail(EXIT_GUIDANCE, f"guidance failed: {e}", as_json)
    result = {"status": "ok", "steps": state.step,
              "checkpoint": os.path.join(out_dir, "checkpoint_final.dhck")}
    click.echo(json.dumps(result) if as_json else
               f"finished {state.step} steps -> {result['checkpoint']}")


def _parse_pose(spec: str, num_joints: int) -> Pose:
    if spec == "rest":
        return Pose.rest(num_joints)
    with open(spec, "r", encoding="utf-8") as f:
        doc = json.load(f)
    pose = Pose(np.asarray(doc["joint_rotations"], dtype=np.float64),
                np.asarray(doc.get("root_translation", [0.0, 0.0, 0.0]), dtype=np.float64))
    pose.validate(num_joints)
    return pose.canonicalized()


def _parse_camera(spec: str | None, body: PosedBody, width: int, height: int) -> Camera:
    lo, hi = body.bounds("full_body")
    center = (lo + hi) / 2.0
    if spec is None:
        return Camera(0.0, 0.1, 2.2, center, 55.0, width, height)
    vals = [float(v) for v in spec.split(",")]
    if len(vals) != 4:
        raise ValueError("camera spec must be 'az,el,radius,focal'")
    az, el, r, focal = vals
    return Camera(az, el, r, center, focal, width, height)


def _load_state(checkpoint: str, as_json: bool):
    try:
        return checkpoint_load(checkpoint)
    except (OSError, CheckpointError) as e:
        _fail(EXIT_BAD_CHECKPOINT, f"checkpoint {checkpoint!r}: {e}", as_json)


def _render_one(state, pose: Pose, camera: Camera, mode: str, seed: int):
    skeleton = SkeletonConfig.default()
    body = PosedBody(skeleton, pose, Shape(state.beta.astype(np.float64)))
    options = RenderOptions(mode=mode)
    lighting = SHLighting(state.lighting.astype(np.float64))
    return render(state.params, body, camera, lighting, options,
                  rng=np.random.default_rng(seed))


@main.command(name="render")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--pose", "pose_spec", default="rest", show_default=True)
@click.option("--camera", "camera_spec", default=None, help="az,el,radius,focal")
@click.option("--mode", type=click.Choice(["shaded", "albedo", "normals", "mask"]),
              default="shaded", show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--width", type=int, default=64)
@click.option("--height", type=int, default=64)
@click.option("--seed", type=int, default=0)
@click.option("--json", "as_json", is_flag=True)
def render_cmd(checkpoint, pose_spec, camera_spec, mode, out_path, width, height, seed, as_json):
    """Render one image from a checkpoint; PNG plus PFM for float modes."""
    state = _load_state(checkpoint, as_json)
    try:
        pose = _parse_pose(pose_spec, state.params.arch.num_joints)
    except (OSError, ValueError, KeyError) as e:
        _fail(EXIT_BAD_CONFIG, f"pose spec: {e}", as_json)
    skeleton = SkeletonConfig.default()
    body = PosedBody(skeleton, pose, Shape(state.beta.astype(np.float64)))
    try:
        camera = _parse_camera(camera_spec, body, width, height)
    except ValueError as e:
        _fail(EXIT_BAD_CONFIG, str(e), as_json)
    out = _render_one(state, pose, camera, mode, seed)
    write_png(out_path, out.image())
    extra = {}
    if mode == "mask":
        pfm = os.path.splitext(out_path)[0] + ".pfm"
        write_pfm(pfm, out.image(out.mask).astype(np.float32))
        extra["pfm"] = pfm
    elif mode == "normals":
        pfm = os.path.splitext(out_path)[0] + ".pfm"
        write_pfm(pfm, encode_normal_map(out.image(out.normal_map)).astype(np.float32))
        extra["pfm"] = pfm
    result = {"status": "ok", "out": out_path, **extra}
    click.echo(json.dumps(result) if as_json else f"wrote {out_path}")


def load_pose_sequence(path: str, num_joints: int):
    """Pose sequence JSON: {"fps": float, "frames": [[[ax,ay,az] x J], ...]}.
    Raises ValueError with a frame number on malformed entries."""
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"line {e.lineno}: {e.msg}") from e
    fps = doc.get("fps")
    if not isinstance(fps, (int, float)) or fps <= 0:
        raise ValueError("frame 0: fps must be a positive number")
    frames = doc.get("frames")
    if not isinstance(frames, list) or not frames:
        raise ValueError("frame 0: frames must be a non-empty list")
    poses = []
    for i, frame in enumerate(frames):
        try:
            pose = Pose(np.asarray(frame, dtype=np.float64))
            pose.validate(num_joints)
        except (ValueError, TypeError) as e:
            raise ValueError(f"frame {i + 1}: {e}") from e
        poses.append(pose.canonicalized())
    return float(fps), poses


@main.command()
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--poses", "poses_path", required=True, type=click.Path())
@click.option("--camera", "camera_spec", default=None)
@click.option("--mode", type=click.Choice(["shaded", "albedo", "normals", "mask"]),
              default="shaded", show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--width", type=int, default=64)
@click.option("--height", type=int, default=64)
@click.option("--seed", type=int, default=0)
@click.option("--json", "as_json", is_flag=True)
def animate(checkpoint, poses_path, camera_spec, mode, out_dir, width, height, seed, as_json):
    """Render one frame per pose in a sequence file; no optimization."""
    state = _load_state(checkpoint, as_json)
    try:
        fps, poses = load_pose_sequence(poses_path, state.params.arch.num_joints)
    except (OSError, ValueError) as e:
        _fail(EXIT_BAD_SEQUENCE, f"pose sequence: {e}", as_json)
    os.makedirs(out_dir, exist_ok=True)
    skeleton = SkeletonConfig.default()
    frames = []
    for i, pose in enumerate(poses):
        body = PosedBody(skeleton, pose, Shape(state.beta.astype(np.float64)))
        try:
            camera = _parse_camera(camera_spec, body, width, height)
        except ValueError as e:
            _fail(EXIT_BAD_CONFIG, str(e), as_json)
        out = _render_one(state, pose, camera, mode, seed)
        path = os.path.join(out_dir, f"frame_{i + 1:06d}.png")
        write_png(path, out.image())
        frames.append(path)
    result = {"status": "ok", "frames": len(frames), "fps": fps, "dir": out_dir}
    click.echo(json.dumps(result) if as_json else
               f"wrote {len(frames)} frames at {fps} fps -> {out_dir}")


@main.command(name="export-mesh")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--pose", "pose_spec", default="rest", show_default=True)
@click.option("--resolution", type=int, default=96, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--json", "as_json", is_flag=True)
def export_mesh(checkpoint, pose_spec, resolution, out_path, as_json):
    """Marching-cubes mesh of the composited density with vertex albedo."""
    state = _load_state(checkpoint, as_json)
    try:
        pose = _parse_pose(pose_spec, state.params.arch.num_joints)
    except (OSError, ValueError, KeyError) as e:
        _fail(EXIT_BAD_CONFIG, f"pose spec: {e}", as_json)
    skeleton = SkeletonConfig.default()
    body = PosedBody(skeleton, pose, Shape(state.beta.astype(np.float64)))
    try:
        verts, faces, colors = extract_mesh(state.params, body, resolution)
    except ValueError as e:
        _fail(EXIT_BAD_CONFIG, str(e), as_json)
    except EmptySurfaceError as e:
        _fail(EXIT_EMPTY_SURFACE, str(e), as_json)
    write_obj(out_path, verts, faces, colors)
    result = {"status": "ok", "out": out_path,
              "vertices": int(len(verts)), "faces": int(len(faces))}
    click.echo(json.dumps(result) if as_json else
               f"wrote {out_path} ({len(verts)} vertices, {len(faces)} faces)")


@main.command(name="check-grads")
@click.option("--seed", type=int, default=0)
@click.option("--probes", type=int, default=200, show_default=True)
@click.option("--json", "as_json", is_flag=True)
def check_grads(seed, probes, as_json):
    """Finite-difference audit of every hand-written gradient."""
    records = run_gradient_checks(seed=seed, n_probes=probes)
    ok = checks_pass(records)
    if as_json:
        click.echo(json.dumps({"status": "ok" if ok else "fail", "components": records}))
    else:
        for r in records:
            click.echo(f"{r['component']:18s} probes={r['probes']:4d} "
                       f"excluded={r['excluded']:3d} max_rel_err={r['max_rel_err']:.3e} "
                       f"-> {'ok' if r['pass'] else 'FAIL'}")
        click.echo("all gradients within tolerance" if ok else "gradient tolerance violated")
    if not ok:
        sys.exit(EXIT_GRAD_TOLERANCE)


if __name__ == "__main__":
    main()
