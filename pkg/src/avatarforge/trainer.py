"""Optimization loop: pose/camera/lighting/zoom sampling, rendering with
retained intermediates, guidance-gradient chaining through the reverse passes,
auxiliary losses, Adam updates per parameter group, and bit-exact
checkpointing (including rng and optimizer state).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .body import (Pose, Shape, PosedBody, SkeletonConfig, REGIONS,
                   NUM_SHAPE, SHAPE_BOUNDS)
from .config import TrainConfig
from .field import FieldParams, ArchConfig, init_params, param_shapes
from .guidance import GuidanceError
from .losses import (LossBreakdown, density_loss_with_grad, normal_loss_with_grad,
                     mask_loss_with_grad, orientation_loss_with_grad,
                     proposal_loss_with_grad, total_loss)
from .render import Camera, SHLighting, RenderOptions, render, render_backward

CHECKPOINT_MAGIC = b"DHCK"
CHECKPOINT_VERSION = 1


# --------------------------------------------------------------- pose sampler

@dataclass
class JointSampler:
    """Truncated-Gaussian axis-angle sampler for one joint; hinge joints draw
    a single angle about a fixed axis."""

    std: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    hinge_axis: np.ndarray | None = None
    hinge_mean: float = 0.0


def default_pose_sampler(skeleton: SkeletonConfig, scale: float = 1.0):
    """Bounded stand-in for a learned pose prior: per-joint truncated
    Gaussians around the rest pose, single-axis elbows/knees."""
    name_to_idx = {n: i for i, n in enumerate(skeleton.joint_names)}
    rest = skeleton.rest_joint_positions()

    def free(std, lim):
        std = np.broadcast_to(np.asarray(std, dtype=np.float64) * scale, (3,)).copy()
        lim = np.broadcast_to(np.asarray(lim, dtype=np.float64), (3,)).copy()
        return JointSampler(std=std, lo=-lim, hi=lim)

    def hinge(axis, mean, std, lo, hi):
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        return JointSampler(std=np.array([std * scale, 0.0, 0.0]),
                            lo=np.array([lo, 0.0, 0.0]), hi=np.array([hi, 0.0, 0.0]),
                            hinge_axis=axis, hinge_mean=mean * scale)

    def elbow_axis(side):
        e, w = name_to_idx[f"{side}_elbow"], name_to_idx[f"{side}_wrist"]
        arm_dir = rest[w] - rest[e]
        arm_dir = arm_dir / np.linalg.norm(arm_dir)
        ax = np.cross(arm_dir, np.array([0.0, 0.0, 1.0]))
        return ax / np.linalg.norm(ax)

    samplers = {}
    for name in skeleton.joint_names:
        if name == "root":
            samplers[name] = free(0.0, 0.0)
        elif name in ("spine", "neck", "head"):
            samplers[name] = free(0.1, 0.35)
        elif name.endswith("shoulder"):
            samplers[name] = free(0.25, 0.9)
        elif name.endswith("elbow"):
            samplers[name] = hinge(elbow_axis(name[0]), 0.3, 0.4, 0.0, 2.4)
        elif name.endswith("wrist"):
            samplers[name] = free(0.15, 0.5)
        elif name.endswith("hip"):
            samplers[name] = free((0.25, 0.15, 0.15), (0.7, 0.4, 0.4))
        elif name.endswith("knee"):
            samplers[name] = hinge((1.0, 0.0, 0.0), 0.25, 0.35, 0.0, 2.4)
        else:
            samplers[name] = free(0.1, 0.4)
    return [samplers[n] for n in skeleton.joint_names]


def _trunc_normal(rng, mean, std, lo, hi):
    if std <= 0 or hi <= lo:
        return float(np.clip(mean, lo, hi))
    for _ in range(100):
        x = rng.normal(mean, std)
        if lo <= x <= hi:
            return float(x)
    return float(np.clip(rng.normal(mean, std), lo, hi))


def sample_pose(rng: np.random.Generator, samplers) -> Pose:
    rots = np.zeros((len(samplers), 3))
    for j, js in enumerate(samplers):
        if js.hinge_axis is not None:
            angle = _trunc_normal(rng, js.hinge_mean, js.std[0], js.lo[0], js.hi[0])
            rots[j] = js.hinge_axis * angle
        else:
            for k in range(3):
                rots[j, k] = _trunc_normal(rng, 0.0, js.std[k], js.lo[k], js.hi[k])
    return Pose(rots, np.zeros(3))


# ------------------------------------------------------------ camera sampling

REGION_FRAGMENTS = {
    "full_body": "full body",
    "head": "head and face close-up",
    "upper_body": "upper body",
    "lower_body": "lower body",
    "midsection": "midsection",
    "left_arm": "left arm",
    "right_arm": "right arm",
}


@dataclass
class GuidancePrompt:
    base: str
    region_fragment: str
    view_fragment: str

    @property
    def composed(self) -> str:
        return f"{self.base}, {self.region_fragment}, {self.view_fragment} view"


def view_fragment(azimuth: float, elevation: float) -> str:
    az = (azimuth + np.pi) % (2.0 * np.pi) - np.pi
    if abs(az) < np.pi / 4:
        return "front"
    if abs(abs(az) - np.pi) < np.pi / 4:
        return "back"
    if elevation > np.pi / 4:
        return "overhead"
    return "side"


def framing_distance(corners_rel: np.ndarray, azimuth: float, elevation: float,
                     focal: float, half_w: float, half_h: float, fill: float) -> float:
    """Smallest orbit radius at which every box corner projects within
    fill * half extent of the image, for a camera aimed at the box center."""
    offs = np.array([np.sin(azimuth) * np.cos(elevation), np.sin(elevation),
                     np.cos(azimuth) * np.cos(elevation)])
    fwd = -offs
    right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    du = corners_rel @ right
    dv = corners_rel @ up
    dd = corners_rel @ fwd
    need_u = focal * np.abs(du) / (fill * half_w) - dd
    need_v = focal * np.abs(dv) / (fill * half_h) - dd
    return float(max(need_u.max(), need_v.max(), 1e-3))


def _projected_extent(corners_rel, azimuth, elevation, focal, dist):
    offs = np.array([np.sin(azimuth) * np.cos(elevation), np.sin(elevation),
                     np.cos(azimuth) * np.cos(elevation)])
    fwd = -offs
    right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    depth = np.maximum(corners_rel @ fwd + dist, 1e-6)
    px = focal * (corners_rel @ right) / depth
    py = focal * (corners_rel @ up) / depth
    return float(max(px.max() - px.min(), py.max() - py.min()))


def sample_camera_and_prompt(rng: np.random.Generator, cfg: TrainConfig,
                             body: PosedBody, region: str):
    lo, hi = body.bounds(region)
    center = (lo + hi) / 2.0
    corners = np.stack(np.meshgrid(*[(lo[k], hi[k]) for k in range(3)],
                                   indexing="ij"), axis=-1).reshape(-1, 3) - center
    az = rng.uniform(*cfg.azimuth_range)
    el = rng.uniform(*cfg.elevation_range)
    focal = rng.uniform(*cfg.focal_range)
    fillt = rng.uniform(*cfg.fill_range)
    dist = framing_distance(corners, az, el, focal,
                            (cfg.image_width - 1) / 2.0, (cfg.image_height - 1) / 2.0,
                            fillt)
    # refine so the measured projected extent lands on the fill target
    # (the corner bound is conservative when the box is off-center in depth)
    # extent is monotone decreasing in distance: bisect onto the fill target
    # (the corner bound alone is conservative for off-center boxes)
    target = fillt * max(cfg.image_width, cfg.image_height)
    d_lo = d_hi = dist
    while _projected_extent(corners, az, el, focal, d_lo) < target and d_lo > 1e-3:
        d_lo *= 0.5
    while _projected_extent(corners, az, el, focal, d_hi) > target:
        d_hi *= 2.0
    for _ in range(30):
        dist = 0.5 * (d_lo + d_hi)
        if _projected_extent(corners, az, el, focal, dist) > target:
            d_lo = dist
        else:
            d_hi = dist
    if region == "full_body":
        # prefer the configured orbit-radius range, but framing stays primary:
        # only snap into the range when the whole body still fits sensibly
        clamped = float(np.clip(dist, *cfg.radius_range))
        ext = _projected_extent(corners, az, el, focal, clamped)
        size = max(cfg.image_width, cfg.image_height)
        if 0.62 * size <= ext <= 0.93 * size:
            dist = clamped
    camera = Camera(az, el, dist, center, focal, cfg.image_width, cfg.image_height)
    prompt = GuidancePrompt(cfg.prompt, REGION_FRAGMENTS[region], view_fragment(az, el))
    return camera, prompt


def sample_lighting(rng: np.random.Generator, optimized: np.ndarray,
                    cfg: TrainConfig):
    """With probability p_rand_light return throwaway random coefficients (no
    gradient), otherwise the optimized ones."""
    if rng.random() < cfg.p_rand_light:
        h = np.zeros(10)
        h[0] = rng.uniform(*cfg.light_dc_range)
        h[1:9] = rng.uniform(*cfg.light_band_range, size=8)
        h[9] = rng.uniform(*cfg.light_ambient_range)
        return SHLighting(h), True
    return SHLighting(optimized.astype(np.float64)), False


# ------------------------------------------------------------------ optimizer

def adam_update(params: dict, grads: dict, m: dict, v: dict, t: int, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam over a named group. Returns False (and leaves the
    group untouched) if any gradient in the group is non-finite."""
    for k in params:
        if not np.isfinite(grads[k]).all():
            return False
    for k in params:
        g = grads[k].astype(np.float64)
        m64 = m[k].astype(np.float64) * beta1 + (1.0 - beta1) * g
        v64 = v[k].astype(np.float64) * beta2 + (1.0 - beta2) * g * g
        mhat = m64 / (1.0 - beta1 ** t)
        vhat = v64 / (1.0 - beta2 ** t)
        upd = params[k].astype(np.float64) - lr * mhat / (np.sqrt(vhat) + eps)
        params[k] = upd.astype(params[k].dtype)
        m[k] = m64.astype(m[k].dtype)
        v[k] = v64.astype(v[k].dtype)
    return True


# ---------------------------------------------------------------- train state

@dataclass
class TrainState:
    params: FieldParams
    beta: np.ndarray
    lighting: np.ndarray
    m: dict
    v: dict
    adam_t: dict
    step: int
    rng: np.random.Generator

    @classmethod
    def init(cls, cfg: TrainConfig) -> "TrainState":
        params = init_params(cfg.seed, cfg.arch, dtype=np.float32)
        beta = np.ones(NUM_SHAPE, dtype=np.float32)
        lighting = SHLighting.default().coeffs.astype(np.float32)
        m = {name: np.zeros_like(arr) for name, arr in params.param_items()}
        m["beta"] = np.zeros_like(beta)
        m["lighting"] = np.zeros_like(lighting)
        v = {k: np.zeros_like(a) for k, a in m.items()}
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        return cls(params=params, beta=beta, lighting=lighting, m=m, v=v,
                   adam_t={"field": 0, "shape": 0, "lighting": 0}, step=0, rng=rng)


class CheckpointError(RuntimeError):
    pass


def _state_blob_order(arch: ArchConfig):
    names = [name for name, _ in param_shapes(arch)]
    return names + ["beta", "lighting"]


def checkpoint_save(state: TrainState, path) -> None:
    """Versioned binary: magic, u32 version, JSON meta block, then a
    little-endian float32 blob of parameters, beta, lighting and Adam moments
    in declaration order. Written atomically."""
    arch = state.params.arch
    order = _state_blob_order(arch)
    meta = {
        "arch": arch.to_dict(),
        "step": state.step,
        "adam_t": state.adam_t,
        "rng_state": state.rng.bit_generator.state,
        "order": order,
    }
    meta_bytes = json.dumps(meta).encode("utf-8")
    arrays = dict(state.params.param_items())
    arrays["beta"] = state.beta
    arrays["lighting"] = state.lighting
    blob_parts = [np.ascontiguousarray(arrays[k], dtype="<f4").tobytes() for k in order]
    blob_parts += [np.ascontiguousarray(state.m[k], dtype="<f4").tobytes() for k in order]
    blob_parts += [np.ascontiguousarray(state.v[k], dtype="<f4").tobytes() for k in order]
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(b"".join(blob_parts))
    os.replace(tmp, path)


def checkpoint_load(path) -> TrainState:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, meta_len = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(data) < 12 + meta_len:
        raise CheckpointError("truncated checkpoint meta")
    try:
        meta = json.loads(data[12:12 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint meta: {e}") from e
    arch = ArchConfig.from_dict(meta["arch"])
    shapes = dict(param_shapes(arch))
    shapes["beta"] = (NUM_SHAPE,)
    shapes["lighting"] = (10,)
    order = meta["order"]
    total = sum(int(np.prod(shapes[k])) for k in order)
    blob = np.frombuffer(data[12 + meta_len:], dtype="<f4")
    if blob.size != 3 * total:
        raise CheckpointError(f"blob has {blob.size} floats, expected {3 * total}")

    def take(offset):
        out, pos = {}, offset
        for k in order:
            n = int(np.prod(shapes[k]))
            out[k] = blob[pos:pos + n].reshape(shapes[k]).copy()
            pos += n
        return out

    arrays = take(0)
    m = take(total)
    v = take(2 * total)
    beta = arrays.pop("beta")
    lighting = arrays.pop("lighting")
    params = FieldParams(arch, arrays)
    rng = np.random.default_rng(0)
    rng.bit_generator.state = meta["rng_state"]
    return TrainState(params=params, beta=beta, lighting=lighting, m=m, v=v,
                      adam_t={k: int(t) for k, t in meta["adam_t"].items()},
                      step=int(meta["step"]), rng=rng)


# ------------------------------------------------------------- view datasets

@dataclass
class ViewDataset:
    """Fixed (pose, camera, target image) triples for reconstruction-style
    training and evaluation."""

    poses: list
    cameras: list
    images: np.ndarray

    def __len__(self):
        return len(self.poses)

    def save(self, path) -> None:
        np.savez(
            path,
            joint_rotations=np.stack([p.joint_rotations for p in self.poses]),
            root_translation=np.stack([p.root_translation for p in self.poses]),
            azimuth=np.array([c.azimuth for c in self.cameras]),
            elevation=np.array([c.elevation for c in self.cameras]),
            radius=np.array([c.radius for c in self.cameras]),
            look_at=np.stack([c.look_at for c in self.cameras]),
            focal=np.array([c.focal for c in self.cameras]),
            width=np.array([c.width for c in self.cameras]),
            height=np.array([c.height for c in self.cameras]),
            images=self.images.astype(np.float32),
        )

    @classmethod
    def load(cls, path) -> "ViewDataset":
        z = np.load(path)
        poses = [Pose(jr, rt) for jr, rt in zip(z["joint_rotations"], z["root_translation"])]
        cameras = [Camera(az, el, r, la, f, int(w), int(h)) for az, el, r, la, f, w, h in
                   zip(z["azimuth"], z["elevation"], z["radius"], z["look_at"],
                       z["focal"], z["width"], z["height"])]
        return cls(poses=poses, cameras=cameras, images=z["images"])


class DatasetPhotometricGuidance:
    """Replays stored (pose, camera) views and supplies the mean-squared-error
    gradient against the stored target image."""

    requires_full_image = False
    replays_views = True

    def __init__(self, dataset: ViewDataset):
        if len(dataset) < 1:
            raise ValueError("dataset must contain at least one view")
        self.dataset = dataset

    def pick(self, rng: np.random.Generator):
        i = int(rng.integers(len(self.dataset)))
        return self.dataset.poses[i], self.dataset.cameras[i], self.dataset.images[i]

    def pixel_gradient(self, rendered: np.ndarray, target_pixels: np.ndarray):
        if rendered.shape != target_pixels.shape:
            raise ValueError("rendered/target shape mismatch")
        return rendered.astype(np.float64) - target_pixels.astype(np.float64)


# ------------------------------------------------------------------ the step

def train_step(state: TrainState, cfg: TrainConfig, skeleton: SkeletonConfig,
               guidance) -> LossBreakdown:
    """One optimization step. Samples a view, renders with retained
    intermediates, assembles the guidance gradient plus auxiliary losses,
    chains everything to parameter gradients, and applies per-group Adam.
    A guidance failure propagates before any state mutation."""
    rng = state.rng
    lw = cfg.loss_weights
    replay = getattr(guidance, "replays_views", False)
    shape = Shape(state.beta.astype(np.float64))

    target = None
    if replay:
        region = "full_body"
        pose, camera, target = guidance.pick(rng)
        prompt = GuidancePrompt(cfg.prompt, REGION_FRAGMENTS[region],
                                view_fragment(camera.azimuth, camera.elevation))
        body = PosedBody(skeleton, pose, shape)
    else:
        names = list(REGIONS)
        probs = np.array([cfg.region_probs[r] for r in names])
        region = names[int(rng.choice(len(names), p=probs))]
        pose = sample_pose(rng, default_pose_sampler(skeleton, cfg.pose_scale))
        body = PosedBody(skeleton, pose, shape)
        camera, prompt = sample_camera_and_prompt(rng, cfg, body, region)

    lighting, light_is_random = sample_lighting(rng, state.lighting, cfg)
    mode = "albedo" if rng.random() < cfg.albedo_prob else "shaded"

    n_pix = camera.width * camera.height
    pixel_indices = None
    if cfg.rays_per_step and cfg.rays_per_step < n_pix \
            and not getattr(guidance, "requires_full_image", False):
        pixel_indices = rng.choice(n_pix, size=cfg.rays_per_step, replace=False)

    options = RenderOptions(
        n_coarse=cfg.n_coarse, n_fine=cfg.n_fine, mode=mode,
        normal_weight_cutoff=cfg.normal_weight_cutoff,
        shade_with_density_normals=cfg.shade_with_density_normals)
    out, inter = render(state.params, body, camera, lighting, options,
                        rng=rng, pixel_indices=pixel_indices, retain=True)

    # guidance gradient in image space (never differentiating the denoiser)
    if replay:
        tgt = target.reshape(-1, 3)
        if pixel_indices is not None:
            tgt = tgt[pixel_indices]
        g_img = guidance.pixel_gradient(out.rgb, tgt)
        g_diag = {}
    else:
        u = out.rgb.reshape(camera.height, camera.width, 3)
        g_img, g_diag = guidance.image_gradient(u, rng, prompt.composed)
        g_img = g_img.reshape(-1, 3)

    values = {}
    grad_norms = {"guidance": float(np.linalg.norm(g_img))}

    if inter is not None:
        Rh, N = inter.weights.shape
        values["density"], g_tau = density_loss_with_grad(inter.tau_raw, inter.tau_hat)
        values["normal"], g_norm = normal_loss_with_grad(
            inter.weights, inter.normal_pred.reshape(Rh, N, 3),
            inter.density_normals.reshape(Rh, N, 3),
            inter.density_normal_valid.reshape(Rh, N))
        values["orientation"], g_orient = orientation_loss_with_grad(
            inter.weights, inter.normal_pred.reshape(Rh, N, 3), inter.dirs[inter.hit])
        values["mask"], g_mask = mask_loss_with_grad(out.mask)
        values["proposal"], g_prop = proposal_loss_with_grad(
            inter.coarse_edges, inter.coarse_weights, inter.fine.edges, inter.weights)

        grads, dcond, dh = render_backward(
            state.params, inter, options,
            d_rgb=(lw.sds * g_img).astype(np.float64),
            d_mask=(lw.mask * g_mask).astype(np.float64),
            d_normal_pred=(lw.normal * g_norm + lw.orientation * g_orient).reshape(-1, 3),
            d_tau_raw=lw.density * g_tau,
            d_coarse_weights=lw.proposal * g_prop,
            body=body)
        dbeta = dcond[-NUM_SHAPE:]
    else:
        values = {k: 0.0 for k in ("density", "normal", "orientation", "mask", "proposal")}
        grads = {name: np.zeros_like(a) for name, a in state.params.param_items()}
        dbeta = np.zeros(NUM_SHAPE)
        dh = np.zeros(10)

    field_grads = {k: v for k, v in grads.items()}
    grad_norms["field"] = float(np.sqrt(sum((g.astype(np.float64) ** 2).sum()
                                            for g in field_grads.values())))

    # ---- state mutation starts here (guidance already succeeded) ----
    decay = 1.0
    if cfg.lr_decay == "cosine":
        decay = 0.5 * (1.0 + np.cos(np.pi * min(state.step / cfg.iterations, 1.0)))

    state.adam_t["field"] += 1
    adam_update(state.params.arrays, field_grads,
                {k: state.m[k] for k in field_grads}, {k: state.v[k] for k in field_grads},
                state.adam_t["field"], cfg.lr_field * decay)

    state.adam_t["shape"] += 1
    beta_dict = {"beta": state.beta}
    adam_update(beta_dict, {"beta": dbeta.astype(np.float32)},
                {"beta": state.m["beta"]}, {"beta": state.v["beta"]},
                state.adam_t["shape"], cfg.lr_shape * decay)
    state.beta = np.clip(beta_dict["beta"], *SHAPE_BOUNDS).astype(np.float32)

    if mode == "shaded" and not light_is_random:
        state.adam_t["lighting"] += 1
        light_dict = {"lighting": state.lighting}
        adam_update(light_dict, {"lighting": dh.astype(np.float32)},
                    {"lighting": state.m["lighting"]}, {"lighting": state.v["lighting"]},
                    state.adam_t["lighting"], cfg.lr_lighting * decay)
        state.lighting = light_dict["lighting"]

    state.step += 1
    return total_loss(values, lw, grad_norms)


def run_training(cfg: TrainConfig, skeleton: SkeletonConfig, guidance,
                 out_dir, resume: bool = False, log_every: int = 1):
    """Drive train_step for cfg.iterations, appending JSON-lines metrics and
    writing periodic + final checkpoints. Returns the final state."""
    os.makedirs(out_dir, exist_ok=True)
    ckpt_final = os.path.join(out_dir, "checkpoint_final.dhck")
    metrics_path = os.path.join(out_dir, "metrics.jsonl")

    state = None
    if resume:
        candidates = sorted(
            f for f in os.listdir(out_dir) if f.startswith("checkpoint_") and f.endswith(".dhck"))
        if candidates:
            latest = max(candidates, key=lambda f: checkpoint_load(os.path.join(out_dir, f)).step)
            state = checkpoint_load(os.path.join(out_dir, latest))
    if state is None:
        state = TrainState.init(cfg)

    mode = "a" if resume and state.step > 0 else "w"
    with open(metrics_path, mode, encoding="utf-8") as metrics:
        while state.step < cfg.iterations:
            bd = train_step(state, cfg, skeleton, guidance)
            if state.step % log_every == 0 or state.step == cfg.iterations:
                metrics.write(json.dumps(bd.to_record(state.step)) + "\n")
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0 \
                    and state.step < cfg.iterations:
                checkpoint_save(state, os.path.join(
                    out_dir, f"checkpoint_{state.step:06d}.dhck"))
    checkpoint_save(state, ckpt_final)
    return state
