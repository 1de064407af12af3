"""Volumetric renderer: pinhole rays, proposal-steered fine sampling, alpha
compositing, spherical-harmonics shading, and the full image pipeline over the
body-conditioned field. Forward passes retain enough intermediates to run the
exact reverse pass used by training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .body import PosedBody, density_proxy
from .field import (
    FieldParams, cond_vector, encode_inputs, field_forward, field_backward,
    proposal_forward, proposal_backward, composite_density,
    composite_density_grad_mask, sigmoid,
)

MODES = ("shaded", "albedo", "normals", "mask")


@dataclass
class Camera:
    """Spherical-orbit pinhole camera looking at a point."""

    azimuth: float
    elevation: float
    radius: float
    look_at: np.ndarray
    focal: float            # pixels
    width: int = 64
    height: int = 64

    def __post_init__(self):
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        if self.radius <= 0 or self.focal <= 0:
            raise ValueError("radius and focal must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dims must be >= 1")
        if not -np.pi / 2 < self.elevation < np.pi / 2:
            raise ValueError("elevation must be inside (-pi/2, pi/2)")

    @property
    def position(self) -> np.ndarray:
        az, el = self.azimuth, self.elevation
        offset = np.array([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])
        return self.look_at + self.radius * offset

    def basis(self):
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        right = right / np.linalg.norm(right)
        up = np.cross(right, fwd)
        return right, up, fwd


def generate_rays(camera: Camera, pixel_indices: np.ndarray | None = None):
    """Unit-direction rays through pixel centers; the image-center ray passes
    through the look-at point. Returns (origins, directions), each (R, 3)."""
    right, up, fwd = camera.basis()
    W, H = camera.width, camera.height
    if pixel_indices is None:
        iy, ix = np.mgrid[0:H, 0:W]
        ix = ix.ravel()
        iy = iy.ravel()
    else:
        pixel_indices = np.asarray(pixel_indices)
        iy, ix = pixel_indices // W, pixel_indices % W
    u = ix - (W - 1) / 2.0
    v = iy - (H - 1) / 2.0
    dirs = (u[:, None] * right + (-v)[:, None] * up + camera.focal * fwd)
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    return origins, dirs


@dataclass
class SHLighting:
    """First 9 spherical-harmonics coefficients plus an ambient offset."""

    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if self.coeffs.shape != (10,):
            raise ValueError("lighting needs 10 coefficients (9 SH + ambient)")
        if not np.isfinite(self.coeffs).all():
            raise ValueError("lighting coefficients must be finite")

    @classmethod
    def default(cls) -> "SHLighting":
        h = np.zeros(10)
        h[0] = 2.8   # DC irradiance ~ 0.79
        h[9] = 0.1
        return cls(h)


_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = 1.0925484305920792
_C3 = 0.31539156525252005
_C4 = 0.5462742152960396


def sh_basis(n: np.ndarray) -> np.ndarray:
    """Real SH basis (l <= 2), (N, 9) for unit normals (N, 3)."""
    x, y, z = n[:, 0], n[:, 1], n[:, 2]
    return np.stack([
        np.full_like(x, _C0),
        _C1 * y, _C1 * z, _C1 * x,
        _C2 * x * y, _C2 * y * z,
        _C3 * (3.0 * z * z - 1.0),
        _C2 * x * z,
        _C4 * (x * x - y * y),
    ], axis=1)


def sh_basis_grad(n: np.ndarray) -> np.ndarray:
    """d(basis)/d(n): (N, 9, 3)."""
    N = n.shape[0]
    x, y, z = n[:, 0], n[:, 1], n[:, 2]
    g = np.zeros((N, 9, 3), dtype=n.dtype)
    g[:, 1, 1] = _C1
    g[:, 2, 2] = _C1
    g[:, 3, 0] = _C1
    g[:, 4, 0] = _C2 * y
    g[:, 4, 1] = _C2 * x
    g[:, 5, 1] = _C2 * z
    g[:, 5, 2] = _C2 * y
    g[:, 6, 2] = _C3 * 6.0 * z
    g[:, 7, 0] = _C2 * z
    g[:, 7, 2] = _C2 * x
    g[:, 8, 0] = _C4 * 2.0 * x
    g[:, 8, 1] = -_C4 * 2.0 * y
    return g


def sh_irradiance(normal: np.ndarray, lighting: SHLighting) -> np.ndarray:
    h = lighting.coeffs.astype(normal.dtype)
    return sh_basis(normal) @ h[:9] + h[9]


def sh_shade(albedo: np.ndarray, normal: np.ndarray, lighting: SHLighting):
    """Shaded rgb: albedo * max(E(normal), 0), clamped to [0, 1]."""
    E = sh_irradiance(normal, lighting)
    raw = albedo * np.maximum(E, 0.0)[:, None]
    return np.clip(raw, 0.0, 1.0)


def sh_shade_vjp(albedo, normal, lighting: SHLighting, d_shaded):
    """Gradients of sh_shade w.r.t. albedo, normal and the 10 coefficients."""
    h = lighting.coeffs.astype(albedo.dtype)
    basis = sh_basis(normal)
    E = basis @ h[:9] + h[9]
    Epos = np.maximum(E, 0.0)
    raw = albedo * Epos[:, None]
    live = (raw < 1.0) & (raw > 0.0)  # clip pass-through
    dr = d_shaded * live
    d_albedo = dr * Epos[:, None]
    dE = (dr * albedo).sum(axis=1) * (E > 0.0)
    d_normal = np.einsum("n,nkc,k->nc", dE, sh_basis_grad(normal), h[:9])
    dh = np.zeros(10, dtype=np.float64)
    dh[:9] = dE @ basis
    dh[9] = dE.sum()
    return d_albedo, d_normal, dh


def composite(colors: np.ndarray, taus: np.ndarray, deltas: np.ndarray):
    """Alpha-composite one or many rays.

    colors (..., N, 3), taus (..., N), deltas (..., N). Returns (C, weights, m)
    with no background term: empty rays composite to black.
    """
    alpha = 1.0 - np.exp(-taus * deltas)
    trans = np.cumprod(1.0 - alpha + 0.0, axis=-1)
    trans = np.concatenate([np.ones_like(trans[..., :1]), trans[..., :-1]], axis=-1)
    weights = alpha * trans
    C = (weights[..., None] * colors).sum(axis=-2)
    m = weights.sum(axis=-1)
    return C, weights, m


def composite_vjp(colors, taus, deltas, dC=None, dm=None, dw=None):
    """Exact reverse of `composite`: gradients w.r.t. colors and taus.

    Upstreams: dC (..., 3) on the composited color, dm (...) on the mask,
    dw (..., N) directly on the weights. Any may be None.
    """
    alpha = 1.0 - np.exp(-taus * deltas)
    trans = np.cumprod(1.0 - alpha, axis=-1)
    trans = np.concatenate([np.ones_like(trans[..., :1]), trans[..., :-1]], axis=-1)
    weights = alpha * trans

    dweights = np.zeros_like(weights)
    dcolors = np.zeros_like(colors)
    if dC is not None:
        dweights += (colors * dC[..., None, :]).sum(axis=-1)
        dcolors += weights[..., None] * dC[..., None, :]
    if dm is not None:
        dweights += dm[..., None]
    if dw is not None:
        dweights += dw

    # d w_j / d alpha_i = T_i       (j == i)
    #                   = -w_j / (1 - alpha_i)   (j > i)
    wg = weights * dweights
    suffix = np.flip(np.cumsum(np.flip(wg, axis=-1), axis=-1), axis=-1)
    suffix = np.concatenate([suffix[..., 1:], np.zeros_like(suffix[..., :1])], axis=-1)
    one_m_alpha = 1.0 - alpha
    safe = one_m_alpha > 1e-12
    dalpha = trans * dweights - np.where(safe, suffix / np.where(safe, one_m_alpha, 1.0), 0.0)
    dtaus = dalpha * deltas * (1.0 - alpha)
    return dcolors, dtaus


def sample_from_histogram(edges: np.ndarray, weights: np.ndarray, n_out: int,
                          rng: np.random.Generator, uniform_mix: float = 0.01):
    """Inverse-transform draw of n_out sorted positions per ray from a
    piecewise-constant histogram. Rays whose weights sum to zero fall back to
    stratified sampling and are flagged.

    edges (R, B+1), weights (R, B) -> (positions (R, n_out), degenerate (R,)).
    """
    R, B = weights.shape
    wsum = weights.sum(axis=1, keepdims=True)
    degenerate = wsum[:, 0] <= 0.0
    p = np.where(wsum > 0, weights / np.where(wsum > 0, wsum, 1.0), 1.0 / B)
    p = (1.0 - uniform_mix) * p + uniform_mix / B
    cdf = np.concatenate([np.zeros((R, 1), dtype=p.dtype), np.cumsum(p, axis=1)], axis=1)
    cdf[:, -1] = 1.0

    u = (np.arange(n_out) + rng.random((R, n_out))) / n_out
    u = np.sort(u, axis=1)
    # bin index per sample: count of cdf edges <= u, minus 1
    idx = (u[:, :, None] >= cdf[:, None, :-1]).sum(axis=-1) - 1
    idx = np.clip(idx, 0, B - 1)
    rows = np.arange(R)[:, None]
    lo, hi = cdf[rows, idx], cdf[rows, idx + 1]
    frac = np.where(hi > lo, (u - lo) / np.where(hi > lo, hi - lo, 1.0), 0.5)
    pos = edges[rows, idx] + frac * (edges[rows, idx + 1] - edges[rows, idx])
    pos = np.maximum.accumulate(pos, axis=1)
    return pos, degenerate


@dataclass
class RaySampleSet:
    """Sorted sample positions along rays with strictly positive deltas."""

    t: np.ndarray        # (R, N) midpoints
    positions: np.ndarray  # (R, N, 3)
    deltas: np.ndarray   # (R, N)
    edges: np.ndarray    # (R, N+1)

    def validate(self):
        if not (np.diff(self.edges, axis=-1) > 0).all():
            raise ValueError("sample edges must be strictly increasing")
        if not (self.deltas > 0).all():
            raise ValueError("deltas must be positive")


@dataclass
class RenderOptions:
    n_coarse: int = 32
    n_fine: int = 32
    mode: str = "shaded"
    bounds_margin: float = 0.1
    normal_weight_cutoff: float = 1e-3
    density_normal_step: float = 1e-3
    shade_with_density_normals: bool = False
    uniform_mix: float = 0.01
    # the coarse pass runs on a softened proxy so thin limbs register in
    # wide stratified bins; fine samples then resolve the sharp density
    proposal_sharpness: float = 60.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.n_coarse < 1 or self.n_fine < 1:
            raise ValueError("sample counts must be >= 1")


@dataclass
class RenderOutput:
    """Per-pixel color, mask, normal map and retained per-ray sample weights."""

    rgb: np.ndarray          # (R, 3)
    mask: np.ndarray         # (R,)
    normal_map: np.ndarray   # (R, 3)
    weights: np.ndarray      # (R, n_fine), zero rows for rays missing the scene
    degenerate_rays: np.ndarray  # (R,) proposal-histogram fallback diagnostics
    shape: tuple             # (H, W) of the full image

    def image(self, arr=None):
        a = self.rgb if arr is None else arr
        return a.reshape(self.shape + a.shape[1:])


@dataclass
class RenderIntermediates:
    """Everything the training reverse pass needs."""

    hit: np.ndarray          # (R,) rays that intersect the scene bounds
    dirs: np.ndarray         # (R, 3)
    fine: RaySampleSet       # hit rays only
    d: np.ndarray            # (Rh*N,)
    s: np.ndarray            # (Rh*N, 3)
    tau_raw: np.ndarray
    tau_hat: np.ndarray
    tau_final: np.ndarray
    albedo: np.ndarray
    normal_pred: np.ndarray
    field_cache: dict
    cond: np.ndarray
    sample_colors: np.ndarray   # per-sample color fed to compositing
    weights: np.ndarray         # (Rh, N)
    density_normals: np.ndarray  # (Rh*N, 3); zero where not computed
    density_normal_valid: np.ndarray  # (Rh*N,) bool
    coarse_edges: np.ndarray    # (Rh, nc+1)
    coarse_weights: np.ndarray  # (Rh, nc)
    prop_cache: dict
    prop_tau_raw: np.ndarray
    prop_tau_hat: np.ndarray
    lighting_used: SHLighting
    E_pos: np.ndarray | None


def intersect_aabb(origins, dirs, lo, hi):
    """Slab test; returns (hit, t_near, t_far) with t_near clamped >= 1e-3."""
    inv = 1.0 / np.where(np.abs(dirs) > 1e-12, dirs, 1e-12)
    t0 = (lo - origins) * inv
    t1 = (hi - origins) * inv
    tmin = np.minimum(t0, t1).max(axis=1)
    tmax = np.maximum(t0, t1).min(axis=1)
    tmin = np.maximum(tmin, 1e-3)
    hit = tmax > tmin
    return hit, tmin, tmax


def propose_and_resample(origins, dirs, t_near, t_far, params: FieldParams,
                         body: PosedBody, rng: np.random.Generator,
                         n_coarse: int, n_fine: int, uniform_mix: float = 0.01,
                         proposal_sharpness: float | None = None,
                         retain: bool = False):
    """Coarse stratified pass on the proposal head, then inverse-transform
    fine sampling of the coarse weight histogram.

    Returns (fine RaySampleSet, coarse_edges, coarse_weights, degenerate,
    prop_extras) for the rays given (assumed to hit the scene bounds)."""
    R = origins.shape[0]
    dt = origins.dtype
    span = (t_far - t_near)[:, None].astype(dt)
    base = t_near[:, None].astype(dt)
    grid = np.linspace(0.0, 1.0, n_coarse + 1, dtype=dt)[None, :]
    coarse_edges = base + grid * span
    u = rng.random((R, n_coarse)).astype(dt)
    t_c = coarse_edges[:, :-1] + u * np.diff(coarse_edges, axis=1)
    pts = origins[:, None, :] + t_c[..., None] * dirs[:, None, :]

    d, s, _ = body.semantic_coords(pts.reshape(-1, 3))
    enc = encode_inputs(d, s, params.arch.prop_enc_bands).astype(params.dtype)
    prop_tau, prop_cache = proposal_forward(params, enc)
    sharp = min(body.skeleton.density_sharpness, proposal_sharpness or np.inf)
    tau_hat = density_proxy(d, sharp).astype(params.dtype)
    tau = composite_density(prop_tau, tau_hat).reshape(R, n_coarse)
    deltas_c = np.diff(coarse_edges, axis=1)
    alpha = 1.0 - np.exp(-tau * deltas_c)
    trans = np.cumprod(1.0 - alpha, axis=-1)
    trans = np.concatenate([np.ones_like(trans[:, :1]), trans[:, :-1]], axis=-1)
    coarse_w = alpha * trans

    fine_edges, degenerate = sample_from_histogram(
        coarse_edges, coarse_w, n_fine + 1, rng, uniform_mix)
    # strictly increasing edges (duplicates collapse alpha to zero anyway)
    eps_ramp = (np.arange(n_fine + 1, dtype=dt) * np.asarray(1e-7, dtype=dt))[None, :] * span
    fine_edges = np.maximum.accumulate(fine_edges, axis=1) + eps_ramp
    t_mid = 0.5 * (fine_edges[:, :-1] + fine_edges[:, 1:])
    deltas = np.diff(fine_edges, axis=1)
    positions = origins[:, None, :] + t_mid[..., None] * dirs[:, None, :]
    fine = RaySampleSet(t=t_mid, positions=positions, deltas=deltas, edges=fine_edges)

    extras = {"prop_cache": prop_cache, "prop_tau_raw": prop_tau, "prop_tau_hat": tau_hat} if retain else None
    return fine, coarse_edges, coarse_w, degenerate, extras


def _density_normals(params, body, pose_cond, pts, proxy_dominant, step):
    """Central-difference normals of the composited density field at pts.

    The gradient of max(tau_raw, tau_hat) is the gradient of the dominant
    branch. Where the body proxy wins, -grad(tau_hat) is parallel to +grad(d)
    (the proxy is a decreasing function of the signed distance), so the SDF
    gradient is used directly: it stays well-conditioned however sharp the
    proxy is. Where the field wins, tau_raw is differenced. Stop-gradient
    supervision targets; returns (normals, valid)."""
    n_pts = pts.shape[0]
    if n_pts == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=bool)
    normals = np.zeros((n_pts, 3))
    valid = np.zeros(n_pts, dtype=bool)

    prox = np.asarray(proxy_dominant, dtype=bool)
    if prox.any():
        g, ok = body.sdf_gradient(pts[prox], step=step, normalize=True)
        normals[prox] = g
        valid[prox] = ok
    fld = ~prox
    if fld.any():
        sub = pts[fld]
        m = sub.shape[0]
        offsets = np.concatenate([np.eye(3) * step, -np.eye(3) * step])
        probes = (sub[None, :, :] + offsets[:, None, :]).reshape(-1, 3)
        d, s, _ = body.semantic_coords(probes)
        enc = encode_inputs(d, s, params.arch.enc_bands).astype(params.dtype)
        _, tau_raw, _, _ = field_forward(params, enc, pose_cond)
        tau6 = tau_raw.astype(np.float64).reshape(6, m)
        g = ((tau6[:3] - tau6[3:]) / (2.0 * step)).T
        norm = np.linalg.norm(g, axis=1)
        ok = norm > 1e-8
        normals[fld] = np.where(ok[:, None], -g / np.maximum(norm[:, None], 1e-30), 0.0)
        valid[fld] = ok
    return normals, valid


def render(params: FieldParams, body: PosedBody, camera: Camera,
           lighting: SHLighting, options: RenderOptions,
           rng: np.random.Generator | None = None,
           pixel_indices: np.ndarray | None = None,
           retain: bool = False):
    """Render color/mask/normal outputs for a camera (optionally a pixel
    subset). With retain=True also returns RenderIntermediates for the
    training reverse pass."""
    rng = rng or np.random.default_rng(0)
    dtype = params.dtype
    origins, dirs = generate_rays(camera, pixel_indices)
    origins = origins.astype(dtype)
    dirs = dirs.astype(dtype)
    R = origins.shape[0]
    n_pix = R if pixel_indices is not None else camera.width * camera.height

    lo, hi = body.bounds("full_body", margin=options.bounds_margin)
    hit, t0, t1 = intersect_aabb(origins, dirs, lo.astype(dtype), hi.astype(dtype))

    rgb = np.zeros((R, 3), dtype=dtype)
    mask = np.zeros(R, dtype=dtype)
    nmap = np.zeros((R, 3), dtype=dtype)
    weights_full = np.zeros((R, options.n_fine), dtype=dtype)
    degenerate_full = np.zeros(R, dtype=bool)
    inter = None

    if hit.any():
        o_h, d_h = origins[hit], dirs[hit]
        fine, c_edges, c_w, degen, prop_extras = propose_and_resample(
            o_h, d_h, t0[hit], t1[hit], params, body, rng,
            options.n_coarse, options.n_fine, options.uniform_mix,
            proposal_sharpness=options.proposal_sharpness, retain=retain)
        Rh, N = fine.t.shape
        pts = fine.positions.reshape(-1, 3)
        d, s, _ = body.semantic_coords(pts)
        enc = encode_inputs(d, s, params.arch.enc_bands).astype(dtype)
        cond = cond_vector(body.pose, body.shape, dtype=dtype)
        c, tau_raw, n_pred, cache = field_forward(params, enc, cond)
        tau_hat = density_proxy(d, body.skeleton.density_sharpness).astype(dtype)
        tau_final = composite_density(tau_raw, tau_hat)

        need_normals = retain or options.mode == "normals" or options.shade_with_density_normals
        dens_normals = np.zeros((Rh * N, 3), dtype=np.float64)
        dens_valid = np.zeros(Rh * N, dtype=bool)

        # first compositing pass to find which samples matter
        _, w, m = composite(c.reshape(Rh, N, 3), tau_final.reshape(Rh, N), fine.deltas)
        if need_normals:
            sel = np.nonzero(w.reshape(-1) > options.normal_weight_cutoff)[0]
            nsel, vsel = _density_normals(
                params, body, cond, pts[sel].astype(np.float64),
                (tau_hat >= tau_raw)[sel], options.density_normal_step)
            dens_normals[sel] = nsel
            dens_valid[sel] = vsel

        E_pos = None
        if options.mode == "shaded":
            shade_n = dens_normals.astype(dtype) if options.shade_with_density_normals else n_pred
            sample_colors = sh_shade(c, shade_n, lighting).astype(dtype)
            E_pos = np.maximum(sh_irradiance(shade_n, lighting), 0.0)
        else:
            sample_colors = c

        C, w, m = composite(sample_colors.reshape(Rh, N, 3), tau_final.reshape(Rh, N), fine.deltas)

        # composited density normals (stop-gradient display/supervision signal)
        n_comp = (w.reshape(Rh, N, 1) * dens_normals.reshape(Rh, N, 3)).sum(axis=1) if need_normals \
            else (w.reshape(Rh, N, 1) * n_pred.reshape(Rh, N, 3)).sum(axis=1)
        n_norm = np.linalg.norm(n_comp, axis=1, keepdims=True)
        n_unit = np.where(n_norm > 1e-8, n_comp / np.maximum(n_norm, 1e-30), 0.0)

        rgb[hit] = C
        mask[hit] = m
        nmap[hit] = n_unit
        weights_full[hit] = w
        degenerate_full[hit] = degen

        if options.mode == "normals":
            rgb[hit] = (n_unit + 1.0) / 2.0 * (m > 1e-3)[:, None]
        elif options.mode == "mask":
            rgb[hit] = m[:, None].repeat(3, axis=1)

        if retain:
            inter = RenderIntermediates(
                hit=hit, dirs=dirs, fine=fine, d=d, s=s, tau_raw=tau_raw,
                tau_hat=tau_hat, tau_final=tau_final, albedo=c,
                normal_pred=n_pred, field_cache=cache, cond=cond,
                sample_colors=sample_colors, weights=w,
                density_normals=dens_normals, density_normal_valid=dens_valid,
                coarse_edges=c_edges, coarse_weights=c_w,
                prop_cache=prop_extras["prop_cache"],
                prop_tau_raw=prop_extras["prop_tau_raw"],
                prop_tau_hat=prop_extras["prop_tau_hat"],
                lighting_used=lighting, E_pos=E_pos)

    out = RenderOutput(
        rgb=rgb, mask=mask, normal_map=nmap, weights=weights_full,
        degenerate_rays=degenerate_full,
        shape=(camera.height, camera.width) if pixel_indices is None else (n_pix,))
    return (out, inter) if retain else out


def render_backward(params: FieldParams, inter: RenderIntermediates,
                    options: RenderOptions,
                    d_rgb: np.ndarray, d_mask: np.ndarray | None = None,
                    d_normal_pred: np.ndarray | None = None,
                    d_tau_raw: np.ndarray | None = None,
                    d_coarse_weights: np.ndarray | None = None,
                    body: PosedBody | None = None):
    """Chain upstream image/mask gradients (plus optional per-sample loss
    gradients) back to field parameters, conditioning vector, and lighting.

    d_rgb, d_mask are per-ray over all R rays; per-sample upstreams are over
    hit-ray samples (Rh*N). Returns (grads dict, dcond, d_lighting). When the
    body is supplied, the shape part of dcond also carries the geometric path
    through the density proxy (the semantic code stays stop-gradient).
    """
    hit = inter.hit
    Rh, N = inter.weights.shape
    dC = d_rgb[hit].astype(np.float64)
    dm = d_mask[hit].astype(np.float64) if d_mask is not None else None

    colors = inter.sample_colors.reshape(Rh, N, 3).astype(np.float64)
    taus = inter.tau_final.reshape(Rh, N).astype(np.float64)
    deltas = inter.fine.deltas.astype(np.float64)
    d_colors, d_taus = composite_vjp(colors, taus, deltas, dC=dC, dm=dm)
    d_colors = d_colors.reshape(-1, 3)
    d_tau_final = d_taus.reshape(-1)

    dh_light = np.zeros(10)
    if options.mode == "shaded":
        shade_n = inter.density_normals if options.shade_with_density_normals else inter.normal_pred
        d_alb, d_n, dh_light = sh_shade_vjp(
            inter.albedo.astype(np.float64), shade_n.astype(np.float64),
            inter.lighting_used, d_colors)
        if options.shade_with_density_normals:
            d_n = None  # stop-gradient on density normals
    else:
        d_alb, d_n = d_colors, None

    dc_total = d_alb
    dn_total = np.zeros_like(inter.normal_pred, dtype=np.float64)
    if d_n is not None:
        dn_total += d_n
    if d_normal_pred is not None:
        dn_total += d_normal_pred
    dtau_raw_total = d_tau_final * composite_density_grad_mask(
        inter.tau_raw.astype(np.float64), inter.tau_hat.astype(np.float64))
    if d_tau_raw is not None:
        dtau_raw_total = dtau_raw_total + d_tau_raw

    dt = params.dtype
    grads, dcond, _ = field_backward(
        params, inter.field_cache, dc_total.astype(dt),
        dtau_raw_total.astype(dt), dn_total.astype(dt))
    dcond = dcond.astype(np.float64)

    if body is not None:
        # geometric shape gradient: where the proxy density wins the max and
        # sits inside its transition band, d(tau_hat)/dd = -tau_hat*(a - tau_hat)
        a = body.skeleton.density_sharpness
        tau_hat = inter.tau_hat.astype(np.float64)
        dproxy = -tau_hat * (a - tau_hat)
        sel = (tau_hat > inter.tau_raw.astype(np.float64)) \
            & (np.abs(dproxy) > 1e-6 * a * a) & (d_tau_final != 0.0)
        if sel.any():
            dL_dd = d_tau_final[sel] * dproxy[sel]
            jac = body.sdf_beta_gradient(inter.fine.positions.reshape(-1, 3)[sel])
            dcond[-jac.shape[1]:] += (dL_dd[:, None] * jac).sum(axis=0)

    if d_coarse_weights is not None:
        nc = inter.coarse_weights.shape[1]
        cdeltas = np.diff(inter.coarse_edges, axis=1).astype(np.float64)
        ctaus = composite_density(inter.prop_tau_raw, inter.prop_tau_hat)
        ctaus = ctaus.reshape(Rh, nc).astype(np.float64)
        _, d_ctaus = composite_vjp(
            np.zeros((Rh, nc, 3)), ctaus, cdeltas, dw=d_coarse_weights.astype(np.float64))
        mask_prop = composite_density_grad_mask(
            inter.prop_tau_raw.astype(np.float64), inter.prop_tau_hat.astype(np.float64))
        d_prop = (d_ctaus.reshape(-1) * mask_prop).astype(dt)
        pgrads = proposal_backward(params, inter.prop_cache, d_prop)
        for k, v in pgrads.items():
            grads[k] = v

    for name, arr in params.param_items():
        if name not in grads:
            grads[name] = np.zeros_like(arr)
    return grads, dcond, dh_light
