"""Conditioned radiance field: a small MLP mapping the semantic body tuple
``(d, s)`` plus flattened pose/shape conditioning to albedo, raw density and a
predicted surface normal. Forward and reverse passes are written out
explicitly (the whole pipeline is a fixed graph); gradients are validated
against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body import Pose, Shape


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def softplus_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


@dataclass(frozen=True)
class ArchConfig:
    trunk_width: int = 64
    trunk_depth: int = 4
    enc_bands: int = 6          # frequency bands applied to (d, s)
    cond_dim: int = 16          # linear projection of flattened (pose, shape)
    prop_width: int = 32
    prop_depth: int = 2
    prop_enc_bands: int = 2     # the steering head needs far less detail
    num_joints: int = 16
    num_shape: int = 10
    init_density: float = 0.01  # raw density at init (near-transparent residual)

    def __post_init__(self):
        if min(self.trunk_width, self.trunk_depth, self.prop_width,
               self.prop_depth, self.cond_dim) < 1 or self.enc_bands < 0:
            raise ValueError("invalid architecture dimensions")

    @property
    def enc_dim(self) -> int:
        return 4 * (1 + 2 * self.enc_bands)

    @property
    def prop_enc_dim(self) -> int:
        return 4 * (1 + 2 * self.prop_enc_bands)

    @property
    def cond_in(self) -> int:
        return self.num_joints * 3 + 3 + self.num_shape

    @property
    def trunk_in(self) -> int:
        return self.enc_dim + self.cond_dim

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "trunk_width", "trunk_depth", "enc_bands", "cond_dim",
            "prop_width", "prop_depth", "num_joints", "num_shape", "init_density")}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


def param_shapes(arch: ArchConfig):
    """Declaration-ordered (name, shape) pairs; fixes checkpoint layout."""
    shapes = [("cond_w", (arch.cond_in, arch.cond_dim)), ("cond_b", (arch.cond_dim,))]
    w = arch.trunk_in
    for i in range(arch.trunk_depth):
        shapes += [(f"trunk_w{i}", (w, arch.trunk_width)), (f"trunk_b{i}", (arch.trunk_width,))]
        w = arch.trunk_width
    shapes += [
        ("rgbn_w", (arch.trunk_width, 6)), ("rgbn_b", (6,)),
        ("dens_w", (arch.trunk_width, 1)), ("dens_b", (1,)),
    ]
    w = arch.prop_enc_dim
    for i in range(arch.prop_depth):
        shapes += [(f"prop_w{i}", (w, arch.prop_width)), (f"prop_b{i}", (arch.prop_width,))]
        w = arch.prop_width
    shapes += [("prop_out_w", (arch.prop_width, 1)), ("prop_out_b", (1,))]
    return shapes


class FieldParams:
    """Named parameter arrays in declaration order, plus the architecture."""

    def __init__(self, arch: ArchConfig, arrays: dict):
        self.arch = arch
        self.arrays = arrays
        for name, shape in param_shapes(arch):
            if name not in arrays or arrays[name].shape != shape:
                raise ValueError(f"parameter {name} missing or wrong shape")
            if not np.isfinite(arrays[name]).all():
                raise ValueError(f"parameter {name} contains non-finite values")

    def __getitem__(self, name):
        return self.arrays[name]

    def param_items(self):
        return [(name, self.arrays[name]) for name, _ in param_shapes(self.arch)]

    @property
    def dtype(self):
        return self.arrays["cond_w"].dtype

    @property
    def num_params(self) -> int:
        return sum(a.size for _, a in self.param_items())

    def copy(self) -> "FieldParams":
        return FieldParams(self.arch, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "FieldParams":
        return FieldParams(self.arch, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.param_items()])

    @classmethod
    def from_flat(cls, arch: ArchConfig, flat: np.ndarray) -> "FieldParams":
        arrays, pos = {}, 0
        for name, shape in param_shapes(arch):
            n = int(np.prod(shape))
            arrays[name] = flat[pos:pos + n].reshape(shape).copy()
            pos += n
        if pos != flat.size:
            raise ValueError("flat parameter vector has wrong length")
        return cls(arch, arrays)


def init_params(seed: int, arch: ArchConfig, dtype=np.float32) -> FieldParams:
    """Fan-in-scaled uniform init, deterministic in seed. The density-head
    biases start the raw densities near ``arch.init_density`` so the body
    proxy dominates geometry at step zero."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(arch):
        if len(shape) == 1:
            arrays[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    arrays["dens_b"][0] = softplus_inv(arch.init_density)
    arrays["prop_out_b"][0] = softplus_inv(arch.init_density)
    arrays["rgbn_b"][5] = 1.0  # normal head points +z at init (avoids a zero vector)
    return FieldParams(arch, {k: v.astype(dtype) for k, v in arrays.items()})


def encode_inputs(d: np.ndarray, s: np.ndarray, bands: int) -> np.ndarray:
    """Raw (d, s) plus sin/cos at frequencies 2^l * pi, l < bands."""
    v = np.concatenate([np.asarray(d)[:, None], np.asarray(s)], axis=1)
    parts = [v]
    for l in range(bands):
        w = (2.0 ** l) * np.pi
        parts.append(np.sin(w * v))
        parts.append(np.cos(w * v))
    return np.concatenate(parts, axis=1)


def cond_vector(pose: Pose, shape: Shape, dtype=np.float64) -> np.ndarray:
    return np.concatenate([
        pose.joint_rotations.ravel(), pose.root_translation, shape.beta,
    ]).astype(dtype)


def field_forward(params: FieldParams, enc: np.ndarray, cond: np.ndarray):
    """Returns (c, tau_raw, normal, cache). enc is (N, enc_dim); cond is a
    single conditioning vector shared by the batch."""
    p = params.arrays
    z = cond @ p["cond_w"] + p["cond_b"]
    h = np.concatenate([enc, np.broadcast_to(z, (enc.shape[0], z.shape[0]))], axis=1)
    cache = {"enc": enc, "cond": cond, "h0": h, "post": []}
    for i in range(params.arch.trunk_depth):
        h = h @ p[f"trunk_w{i}"]
        h += p[f"trunk_b{i}"]
        np.maximum(h, 0.0, out=h)   # relu; (post > 0) recovers the mask
        cache["post"].append(h)
    rgbn = h @ p["rgbn_w"] + p["rgbn_b"]
    c = sigmoid(rgbn[:, :3])
    v = rgbn[:, 3:6]
    norm = np.sqrt((v * v).sum(axis=1, keepdims=True))
    normal = v / np.maximum(norm, 1e-12)
    dens_pre = h @ p["dens_w"] + p["dens_b"]
    tau_raw = softplus(dens_pre)[:, 0]
    cache.update(rgbn=rgbn, c=c, v=v, vnorm=norm, normal=normal, dens_pre=dens_pre)
    return c, tau_raw, normal, cache


def field_backward(params: FieldParams, cache: dict, dc, dtau, dnormal):
    """Reverse pass: upstream gradients on (c, tau_raw, normal) to parameter
    gradients plus the conditioning-vector gradient. Linear in upstreams."""
    p = params.arrays
    n = cache["enc"].shape[0]
    dt = cache["enc"].dtype
    dc = np.zeros((n, 3), dtype=dt) if dc is None else dc
    dtau = np.zeros(n, dtype=dt) if dtau is None else dtau
    dnormal = np.zeros((n, 3), dtype=dt) if dnormal is None else dnormal
    for name, arr, want in (("dc", dc, (n, 3)), ("dtau", dtau, (n,)), ("dnormal", dnormal, (n, 3))):
        if arr.shape != want:
            raise ValueError(f"{name} has shape {arr.shape}, expected {want}")

    grads = {}
    d_rgbn = np.empty((n, 6), dtype=dt)
    c = cache["c"]
    d_rgbn[:, :3] = dc * c * (1.0 - c)
    nrm = cache["normal"]
    vnorm = np.maximum(cache["vnorm"], 1e-12)
    d_rgbn[:, 3:] = (dnormal - nrm * (nrm * dnormal).sum(axis=1, keepdims=True)) / vnorm

    h_last = cache["post"][-1]
    grads["rgbn_w"] = h_last.T @ d_rgbn
    grads["rgbn_b"] = d_rgbn.sum(axis=0)
    d_dens = (dtau * sigmoid(cache["dens_pre"][:, 0]))[:, None]
    grads["dens_w"] = h_last.T @ d_dens
    grads["dens_b"] = d_dens.sum(axis=0)

    dh = d_rgbn @ p["rgbn_w"].T + d_dens @ p["dens_w"].T
    for i in range(params.arch.trunk_depth - 1, -1, -1):
        da = dh * (cache["post"][i] > 0)
        below = cache["post"][i - 1] if i > 0 else cache["h0"]
        grads[f"trunk_w{i}"] = below.T @ da
        grads[f"trunk_b{i}"] = da.sum(axis=0)
        dh = da @ p[f"trunk_w{i}"].T

    E = params.arch.enc_dim
    d_enc = dh[:, :E]
    dz = dh[:, E:].sum(axis=0)
    grads["cond_w"] = np.outer(cache["cond"], dz)
    grads["cond_b"] = dz
    dcond = p["cond_w"] @ dz
    return grads, dcond, d_enc


def proposal_forward(params: FieldParams, enc: np.ndarray):
    """Tiny density-only head used to steer fine sampling."""
    p = params.arrays
    h = enc
    cache = {"enc": enc, "post": []}
    for i in range(params.arch.prop_depth):
        h = h @ p[f"prop_w{i}"]
        h += p[f"prop_b{i}"]
        np.maximum(h, 0.0, out=h)
        cache["post"].append(h)
    pre = h @ p["prop_out_w"] + p["prop_out_b"]
    tau = softplus(pre)[:, 0]
    cache["out_pre"] = pre
    return tau, cache


def proposal_backward(params: FieldParams, cache: dict, dtau: np.ndarray):
    p = params.arrays
    grads = {}
    d_pre = (dtau * sigmoid(cache["out_pre"][:, 0]))[:, None]
    grads["prop_out_w"] = cache["post"][-1].T @ d_pre
    grads["prop_out_b"] = d_pre.sum(axis=0)
    dh = d_pre @ p["prop_out_w"].T
    for i in range(params.arch.prop_depth - 1, -1, -1):
        da = dh * (cache["post"][i] > 0)
        below = cache["post"][i - 1] if i > 0 else cache["enc"]
        grads[f"prop_w{i}"] = below.T @ da
        grads[f"prop_b{i}"] = da.sum(axis=0)
        dh = da @ p[f"prop_w{i}"].T
    return grads


@dataclass
class FieldOutput:
    albedo: np.ndarray    # (N, 3) in [0, 1]
    tau_raw: np.ndarray   # (N,) >= 0
    normal: np.ndarray    # (N, 3) unit vectors


def field_eval(params: FieldParams, d, s, pose: Pose, shape: Shape) -> FieldOutput:
    """Evaluate the field on a batch of semantic tuples under one (pose, shape)."""
    d = np.atleast_1d(np.asarray(d, dtype=params.dtype))
    s = np.atleast_2d(np.asarray(s, dtype=params.dtype))
    enc = encode_inputs(d, s, params.arch.enc_bands).astype(params.dtype)
    cond = cond_vector(pose, shape, dtype=params.dtype)
    c, tau, normal, _ = field_forward(params, enc, cond)
    return FieldOutput(albedo=c, tau_raw=tau, normal=normal)


def field_eval_batch_with_param_grads(params: FieldParams, d, s, pose: Pose,
                                      shape: Shape, dc=None, dtau=None, dnormal=None):
    """Forward plus reverse: parameter gradients summed over the batch for the
    given upstream gradients. Returns (FieldOutput, grads, dcond)."""
    d = np.atleast_1d(np.asarray(d, dtype=params.dtype))
    s = np.atleast_2d(np.asarray(s, dtype=params.dtype))
    enc = encode_inputs(d, s, params.arch.enc_bands).astype(params.dtype)
    cond = cond_vector(pose, shape, dtype=params.dtype)
    c, tau, normal, cache = field_forward(params, enc, cond)
    grads, dcond, _ = field_backward(params, cache, dc, dtau, dnormal)
    return FieldOutput(albedo=c, tau_raw=tau, normal=normal), grads, dcond


def composite_density(tau_raw: np.ndarray, tau_proxy: np.ndarray) -> np.ndarray:
    """Final density: max of field density and body proxy."""
    return np.maximum(tau_raw, tau_proxy)


def composite_density_grad_mask(tau_raw: np.ndarray, tau_proxy: np.ndarray) -> np.ndarray:
    """Subgradient selector for the max: 1 where the field branch wins
    (ties included), 0 where the proxy floor dominates."""
    return (tau_raw >= tau_proxy).astype(tau_raw.dtype)
