"""Auxiliary loss terms over rendered quantities, each with exact gradients
w.r.t. the inputs it is allowed to move (verified against finite differences).

All reductions are means over samples/rays/pixels so magnitudes do not scale
with resolution or sample counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MASK_EPS = 1e-4
PROPOSAL_EPS = 1e-7


@dataclass
class LossWeights:
    sds: float = 1.0
    orientation: float = 1.0
    proposal: float = 1.0
    mask: float = 1.0
    normal: float = 1.0
    density: float = 1.0

    def validate(self):
        for k, v in self.__dict__.items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {k} must be finite and >= 0")

    TERMS = ("orientation", "proposal", "mask", "normal", "density")


@dataclass
class LossBreakdown:
    values: dict
    total: float
    grad_norms: dict = field(default_factory=dict)

    def to_record(self, step: int) -> dict:
        rec = {"step": step, "total": self.total}
        rec.update({f"loss_{k}": v for k, v in self.values.items()})
        rec.update({f"gnorm_{k}": v for k, v in self.grad_norms.items()})
        return rec


def density_loss_with_grad(tau_raw: np.ndarray, tau_hat: np.ndarray):
    """Mean L1 between field density and body proxy; subgradient 0 at ties.
    Gradient flows to the field density only."""
    tau_raw = np.asarray(tau_raw)
    tau_hat = np.asarray(tau_hat)
    if tau_raw.shape != tau_hat.shape:
        raise ValueError("density_loss inputs must have matching shapes")
    if tau_raw.size == 0:
        raise ValueError("density_loss on an empty batch")
    diff = tau_raw.astype(np.float64) - tau_hat.astype(np.float64)
    value = float(np.abs(diff).mean())
    grad = np.sign(diff) / diff.size
    return value, grad


def density_loss(tau_raw, tau_hat) -> float:
    return density_loss_with_grad(tau_raw, tau_hat)[0]


def normal_loss_with_grad(weights: np.ndarray, n_pred: np.ndarray,
                          n_dens: np.ndarray, valid: np.ndarray | None = None):
    """sum_i w_i ||n' - n||_2 per ray, averaged over the rays given. The
    density normals are supervision targets (stop-gradient); samples the
    normal estimator flagged degenerate are skipped."""
    w = np.asarray(weights, dtype=np.float64)
    npred = np.asarray(n_pred, dtype=np.float64)
    ndens = np.asarray(n_dens, dtype=np.float64)
    R = w.shape[0]
    diff = npred - ndens
    norm = np.sqrt((diff * diff).sum(-1))
    live = norm > 1e-12
    if valid is not None:
        live = live & np.asarray(valid, dtype=bool)
    value = float((w * norm * live).sum() / R)
    denom = np.where(live, np.maximum(norm, 1e-30), 1.0)
    grad_npred = np.where(live[..., None], w[..., None] * diff / denom[..., None], 0.0) / R
    return value, grad_npred


def normal_loss(weights, n_pred, n_dens, valid=None) -> float:
    return normal_loss_with_grad(weights, n_pred, n_dens, valid)[0]


def mask_loss_with_grad(mask: np.ndarray):
    """Binarization pressure: mean of min(log M, log(1-M)) with M clamped to
    [eps, 1-eps]. Maximal at M = 0.5; the gradient pushes M > 0.5 up toward 1
    and M < 0.5 down toward 0."""
    M = np.asarray(mask, dtype=np.float64)
    Mc = np.clip(M, MASK_EPS, 1.0 - MASK_EPS)
    low = np.log(Mc)
    high = np.log1p(-Mc)
    value = float(np.minimum(low, high).mean())
    inside = (M > MASK_EPS) & (M < 1.0 - MASK_EPS)
    grad = np.where(low <= high, 1.0 / Mc, -1.0 / (1.0 - Mc))
    grad = np.where(inside, grad, 0.0) / M.size
    return value, grad


def mask_loss(mask) -> float:
    return mask_loss_with_grad(mask)[0]


def orientation_loss_with_grad(weights: np.ndarray, normals: np.ndarray,
                               view_dirs: np.ndarray):
    """Penalty on normals facing away from the camera: sum_i w_i
    max(0, n_i . v)^2 per ray, averaged over rays; v points into the scene."""
    w = np.asarray(weights, dtype=np.float64)
    n = np.asarray(normals, dtype=np.float64)
    v = np.asarray(view_dirs, dtype=np.float64)
    R = w.shape[0]
    dot = (n * v[:, None, :]).sum(-1)
    pos = np.maximum(dot, 0.0)
    value = float((w * pos * pos).sum() / R)
    grad_n = (2.0 * w * pos)[..., None] * v[:, None, :] / R
    return value, grad_n


def orientation_loss(weights, normals, view_dirs) -> float:
    return orientation_loss_with_grad(weights, normals, view_dirs)[0]


def proposal_loss_with_grad(coarse_edges: np.ndarray, coarse_weights: np.ndarray,
                            fine_edges: np.ndarray, fine_weights: np.ndarray):
    """Interlevel consistency: for each fine interval, the summed overlapping
    coarse weights must bound the fine weight; excess is penalized
    quadratically, normalized by the fine weight. Gradients reach the coarse
    weights only (the steering head chases the field, not vice versa)."""
    ce = np.asarray(coarse_edges, dtype=np.float64)
    cw = np.asarray(coarse_weights, dtype=np.float64)
    fe = np.asarray(fine_edges, dtype=np.float64)
    fw = np.asarray(fine_weights, dtype=np.float64)
    if ce.shape[-1] != cw.shape[-1] + 1 or fe.shape[-1] != fw.shape[-1] + 1:
        raise ValueError("histogram edges must have one more entry than weights")
    R = cw.shape[0]
    # overlap[r, j, i]: coarse interval i intersects fine interval j
    overlap = (ce[:, None, :-1] < fe[:, 1:, None]) & (ce[:, None, 1:] > fe[:, :-1, None])
    bound = (overlap * cw[:, None, :]).sum(-1)
    excess = np.maximum(fw - bound, 0.0)
    denom = fw + PROPOSAL_EPS
    value = float((excess * excess / denom).sum() / R)
    dbound = -2.0 * excess / denom / R
    grad_cw = (overlap * dbound[:, :, None]).sum(1)
    return value, grad_cw


def proposal_loss(coarse_edges, coarse_weights, fine_edges, fine_weights) -> float:
    return proposal_loss_with_grad(coarse_edges, coarse_weights, fine_edges, fine_weights)[0]


def total_loss(values: dict, weights: LossWeights,
               grad_norms: dict | None = None) -> LossBreakdown:
    """Weighted sum of the scalar terms. The diffusion-guidance term enters
    training as an injected image-space gradient, so it contributes a gradient
    norm diagnostic here rather than a scalar."""
    weights.validate()
    total = 0.0
    for k in LossWeights.TERMS:
        if k in values:
            total += getattr(weights, k) * values[k]
    return LossBreakdown(values=dict(values), total=float(total),
                         grad_norms=dict(grad_norms or {}))
