"""Procedural target avatar: the capsule body rendered with fixed per-part
albedo. Serves as ground truth for reconstruction experiments and as a
controllable image distribution for training toy denoisers.
"""

from __future__ import annotations

import numpy as np

from .body import PosedBody, SkeletonConfig, Shape, density_proxy
from .config import TrainConfig
from .render import (Camera, RenderOutput, SHLighting, composite, generate_rays,
                     intersect_aabb, sample_from_histogram, sh_shade)
from .trainer import ViewDataset, default_pose_sampler, sample_camera_and_prompt, sample_pose

# flat "clothing" palette keyed by capsule name prefix
_PART_COLORS = {
    "head_c": (0.87, 0.72, 0.60),
    "neck_c": (0.87, 0.72, 0.60),
    "torso": (0.75, 0.20, 0.18),
    "pelvis": (0.16, 0.25, 0.60),
    "upper_arm": (0.75, 0.20, 0.18),
    "forearm": (0.87, 0.72, 0.60),
    "hand": (0.87, 0.72, 0.60),
    "thigh": (0.16, 0.25, 0.60),
    "shin": (0.16, 0.25, 0.60),
    "foot": (0.12, 0.12, 0.14),
}


def capsule_albedos(skeleton: SkeletonConfig) -> np.ndarray:
    colors = np.zeros((skeleton.num_capsules, 3))
    for i, cap in enumerate(skeleton.capsules):
        key = cap.name[2:] if cap.name[:2] in ("l_", "r_") else cap.name
        colors[i] = _PART_COLORS[key]
    return colors


def render_reference(body: PosedBody, camera: Camera, options=None,
                     rng: np.random.Generator | None = None,
                     mode: str = "albedo", lighting: SHLighting | None = None,
                     n_coarse: int = 32, n_fine: int = 32,
                     proposal_sharpness: float = 60.0) -> RenderOutput:
    """Render the flat-colored capsule avatar: proxy density only, per-sample
    albedo from the nearest bone, optional SH shading with SDF normals."""
    rng = rng or np.random.default_rng(0)
    colors = capsule_albedos(body.skeleton)
    origins, dirs = generate_rays(camera)
    R = origins.shape[0]
    lo, hi = body.bounds("full_body", margin=0.1)
    hit, t0, t1 = intersect_aabb(origins, dirs, lo, hi)

    rgb = np.zeros((R, 3))
    mask = np.zeros(R)
    nmap = np.zeros((R, 3))
    weights_full = np.zeros((R, n_fine))

    if hit.any():
        o_h, d_h = origins[hit], dirs[hit]
        Rh = o_h.shape[0]
        span = (t1[hit] - t0[hit])[:, None]
        edges_c = t0[hit][:, None] + np.linspace(0, 1, n_coarse + 1)[None, :] * span
        t_c = edges_c[:, :-1] + rng.random((Rh, n_coarse)) * np.diff(edges_c, axis=1)
        pts = (o_h[:, None, :] + t_c[..., None] * d_h[:, None, :]).reshape(-1, 3)
        d_soft = body.signed_distance(pts)
        tau_c = density_proxy(d_soft, min(body.skeleton.density_sharpness, proposal_sharpness))
        alpha = 1 - np.exp(-tau_c.reshape(Rh, n_coarse) * np.diff(edges_c, axis=1))
        trans = np.cumprod(1 - alpha, axis=-1)
        trans = np.concatenate([np.ones((Rh, 1)), trans[:, :-1]], axis=-1)
        cw = alpha * trans

        fine_edges, _ = sample_from_histogram(edges_c, cw, n_fine + 1, rng)
        fine_edges = np.maximum.accumulate(fine_edges, axis=1) \
            + np.arange(n_fine + 1)[None, :] * 1e-7 * span
        t_mid = 0.5 * (fine_edges[:, :-1] + fine_edges[:, 1:])
        deltas = np.diff(fine_edges, axis=1)
        pts = (o_h[:, None, :] + t_mid[..., None] * d_h[:, None, :]).reshape(-1, 3)

        d, _, bone = body.semantic_coords(pts)
        tau = density_proxy(d, body.skeleton.density_sharpness).reshape(Rh, n_fine)
        albedo = colors[bone]
        _, w_probe, _ = composite(albedo.reshape(Rh, n_fine, 3), tau, deltas)

        normals = np.zeros_like(pts)
        need_normals = mode in ("normals", "shaded")
        if need_normals:
            sel = w_probe.reshape(-1) > 1e-3
            g, ok = body.sdf_gradient(pts[sel], normalize=True)
            normals[sel] = np.where(ok[:, None], g, 0.0)

        if mode == "shaded":
            sample_colors = sh_shade(albedo, normals, lighting or SHLighting.default())
        else:
            sample_colors = albedo
        C, w, m = composite(sample_colors.reshape(Rh, n_fine, 3), tau, deltas)

        rgb[hit] = C
        mask[hit] = m
        weights_full[hit] = w
        ncomp = (w.reshape(Rh, n_fine, 1) * normals.reshape(Rh, n_fine, 3)).sum(axis=1)
        nn = np.linalg.norm(ncomp, axis=1, keepdims=True)
        nmap[hit] = np.where(nn > 1e-8, ncomp / np.maximum(nn, 1e-30), 0.0)
        if mode == "normals":
            rgb[hit] = (nmap[hit] + 1) / 2 * (m > 1e-3)[:, None]
        elif mode == "mask":
            rgb[hit] = m[:, None].repeat(3, axis=1)

    return RenderOutput(rgb=rgb, mask=mask, normal_map=nmap, weights=weights_full,
                        degenerate_rays=np.zeros(R, dtype=bool),
                        shape=(camera.height, camera.width))


def make_view_dataset(skeleton: SkeletonConfig, cfg: TrainConfig, n_views: int,
                      seed: int, mode: str = "albedo",
                      pose_scale: float | None = None) -> ViewDataset:
    """Sample (pose, camera) pairs and render reference targets for them."""
    rng = np.random.default_rng(seed)
    samplers = default_pose_sampler(
        skeleton, cfg.pose_scale if pose_scale is None else pose_scale)
    poses, cameras, images = [], [], []
    for _ in range(n_views):
        pose = sample_pose(rng, samplers)
        body = PosedBody(skeleton, pose, Shape.mean())
        camera, _ = sample_camera_and_prompt(rng, cfg, body, "full_body")
        out = render_reference(body, camera, rng=rng, mode=mode,
                               n_coarse=cfg.n_coarse, n_fine=cfg.n_fine)
        poses.append(pose)
        cameras.append(camera)
        images.append(out.rgb.reshape(camera.height, camera.width, 3))
    return ViewDataset(poses=poses, cameras=cameras,
                       images=np.stack(images).astype(np.float32))
