"""Articulated capsule-skeleton body with a semantic signed distance function.

The body is a tree of joints carrying capsule primitives. Querying a 3D point
returns ``(d, s)``: the smooth-union signed distance to the posed, shaped
capsule set, and a semantic code ``s`` giving the nearest surface point mapped
back into the canonical (rest-pose, mean-shape) body frame. A sigmoid of the
signed distance provides a volumetric density proxy used to floor the field's
geometry.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field

import numpy as np

JOINT_NAMES = [
    "root", "spine", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
]
NUM_JOINTS = len(JOINT_NAMES)

# Shape vector layout: one global scale plus per-class length/radius scales.
SHAPE_NAMES = [
    "global", "torso_len", "head_len", "arm_len", "leg_len",
    "width", "torso_rad", "head_rad", "arm_rad", "leg_rad",
]
NUM_SHAPE = len(SHAPE_NAMES)
SHAPE_BOUNDS = (0.5, 2.0)

REGIONS = [
    "head", "upper_body", "lower_body", "midsection",
    "left_arm", "right_arm", "full_body",
]


class SurfaceSamplingError(RuntimeError):
    """Raised when surface-point projection fails to converge for a seed."""


def _sigmoid(x):
    # numerically stable logistic, preserves dtype
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def axis_angle_to_matrix(aa: np.ndarray) -> np.ndarray:
    """Rodrigues formula; aa is a 3-vector whose norm is the angle in radians."""
    aa = np.asarray(aa, dtype=np.float64)
    angle = float(np.linalg.norm(aa))
    if angle < 1e-12:
        return np.eye(3)
    axis = aa / angle
    kx, ky, kz = axis
    K = np.array([[0.0, -kz, ky], [kz, 0.0, -kx], [-ky, kx, 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def matrix_to_axis_angle(R: np.ndarray) -> np.ndarray:
    cos = (np.trace(R) - 1.0) / 2.0
    cos = min(1.0, max(-1.0, cos))
    angle = float(np.arccos(cos))
    if angle < 1e-12:
        return np.zeros(3)
    if angle > np.pi - 1e-6:
        # near pi: extract axis from R + I
        M = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(M), 0.0))
        # fix signs from off-diagonals
        if M[0, 1] < 0:
            axis[1] = -axis[1]
        if M[0, 2] < 0:
            axis[2] = -axis[2]
        n = np.linalg.norm(axis)
        axis = axis / n if n > 0 else np.array([1.0, 0.0, 0.0])
        return axis * angle
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return v / (2.0 * np.sin(angle)) * angle


@dataclass
class Pose:
    """Per-joint axis-angle rotations (J x 3, radians) plus root translation (m)."""

    joint_rotations: np.ndarray
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=np.float64)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)

    @classmethod
    def rest(cls, num_joints: int = NUM_JOINTS) -> "Pose":
        return cls(np.zeros((num_joints, 3)), np.zeros(3))

    def validate(self, num_joints: int = NUM_JOINTS) -> None:
        if self.joint_rotations.shape != (num_joints, 3):
            raise ValueError(
                f"expected {num_joints} joint rotations, got shape {self.joint_rotations.shape}"
            )
        if self.root_translation.shape != (3,):
            raise ValueError("root_translation must be a 3-vector")
        if not (np.isfinite(self.joint_rotations).all() and np.isfinite(self.root_translation).all()):
            raise ValueError("pose contains non-finite values")

    def canonicalized(self) -> "Pose":
        """Wrap every axis-angle magnitude into [0, pi] (flipping the axis as needed)."""
        rots = self.joint_rotations.copy()
        norms = np.linalg.norm(rots, axis=1)
        for j in np.nonzero(norms > np.pi)[0]:
            angle = norms[j] % (2.0 * np.pi)
            if angle > np.pi:
                angle -= 2.0 * np.pi
            rots[j] = rots[j] / norms[j] * angle
        return Pose(rots, self.root_translation.copy())


@dataclass
class Shape:
    """Unitless scale factors; see SHAPE_NAMES for the layout."""

    beta: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)

    @classmethod
    def mean(cls) -> "Shape":
        return cls(np.ones(NUM_SHAPE))

    def validate(self) -> None:
        if self.beta.shape != (NUM_SHAPE,):
            raise ValueError(f"beta must have {NUM_SHAPE} entries")
        if not np.isfinite(self.beta).all():
            raise ValueError("beta contains non-finite values")
        lo, hi = SHAPE_BOUNDS
        if (self.beta < lo).any() or (self.beta > hi).any():
            raise ValueError(f"beta outside bounds [{lo}, {hi}]")

    def clipped(self) -> "Shape":
        lo, hi = SHAPE_BOUNDS
        return Shape(np.clip(self.beta, lo, hi))


@dataclass
class SemanticCoord:
    """Signed distance (m, negative inside) and canonical-frame surface code."""

    d: float
    s: np.ndarray
    bone: int


@dataclass
class CapsuleSpec:
    name: str
    joint: int          # joint index the primitive rigidly follows
    p0: np.ndarray      # endpoints in the joint's rest-local frame (m)
    p1: np.ndarray
    radius: float
    len_class: int      # index into SHAPE_NAMES for the length scale
    rad_class: int      # index into SHAPE_NAMES for the radius scale


@dataclass
class SkeletonConfig:
    """Joint tree plus capsule primitives and SDF blending constants."""

    joint_names: list
    parents: np.ndarray            # (J,), parent index, -1 for root
    rest_offsets: np.ndarray       # (J, 3), offset from parent in rest pose (m)
    offset_len_class: np.ndarray   # (J,), shape index scaling each offset
    capsules: list                 # list[CapsuleSpec]
    blend_radius: float = 0.02     # smooth-union k (m)
    # transition band ~1/a; sub-pixel at 64x64 so mask silhouettes track the
    # analytic SDF silhouette tightly
    density_sharpness: float = 2500.0  # a (1/m)
    region_capsules: dict = field(default_factory=dict)

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.rest_offsets = np.asarray(self.rest_offsets, dtype=np.float64)
        self.offset_len_class = np.asarray(self.offset_len_class, dtype=np.int64)
        self.validate()

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def num_capsules(self) -> int:
        return len(self.capsules)

    def validate(self) -> None:
        J = self.num_joints
        if self.parents[0] != -1:
            raise ValueError("joint 0 must be the root")
        for j in range(1, J):
            if not 0 <= self.parents[j] < j:
                raise ValueError("parents must form a tree with children after parents")
        if self.blend_radius <= 0:
            raise ValueError("blend_radius must be positive")
        if self.density_sharpness <= 0:
            raise ValueError("density_sharpness must be positive")
        for cap in self.capsules:
            if cap.radius <= 0:
                raise ValueError(f"capsule {cap.name} has non-positive radius")
            if not 0 <= cap.joint < J:
                raise ValueError(f"capsule {cap.name} references invalid joint")

    def rest_joint_positions(self) -> np.ndarray:
        """Joint positions in the canonical frame (identity pose, mean shape)."""
        pos = np.zeros((self.num_joints, 3))
        for j in range(self.num_joints):
            p = self.parents[j]
            pos[j] = self.rest_offsets[j] if p < 0 else pos[p] + self.rest_offsets[j]
        return pos

    @classmethod
    def default(cls) -> "SkeletonConfig":
        return _build_default_skeleton()

    # -- structured-text round trip ------------------------------------------

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        cp["skeleton"] = {
            "blend_radius": repr(float(self.blend_radius)),
            "density_sharpness": repr(float(self.density_sharpness)),
        }
        for j, name in enumerate(self.joint_names):
            sec = f"joint {name}"
            parent = "none" if self.parents[j] < 0 else self.joint_names[self.parents[j]]
            cp[sec] = {
                "parent": parent,
                "offset": " ".join(repr(float(v)) for v in self.rest_offsets[j]),
                "len_class": SHAPE_NAMES[self.offset_len_class[j]],
            }
        for cap in self.capsules:
            cp[f"capsule {cap.name}"] = {
                "joint": self.joint_names[cap.joint],
                "p0": " ".join(repr(float(v)) for v in cap.p0),
                "p1": " ".join(repr(float(v)) for v in cap.p1),
                "radius": repr(float(cap.radius)),
                "len_class": SHAPE_NAMES[cap.len_class],
                "rad_class": SHAPE_NAMES[cap.rad_class],
            }
        for region, caps in self.region_capsules.items():
            cp[f"region {region}"] = {"capsules": " ".join(caps)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "SkeletonConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        joint_names, parents, offsets, off_classes = [], [], [], []
        for sec in cp.sections():
            if not sec.startswith("joint "):
                continue
            name = sec[len("joint "):]
            joint_names.append(name)
            parent = cp[sec]["parent"]
            parents.append(-1 if parent == "none" else joint_names.index(parent))
            offsets.append([float(v) for v in cp[sec]["offset"].split()])
            off_classes.append(SHAPE_NAMES.index(cp[sec].get("len_class", "global")))
        capsules = []
        for sec in cp.sections():
            if not sec.startswith("capsule "):
                continue
            name = sec[len("capsule "):]
            c = cp[sec]
            capsules.append(CapsuleSpec(
                name=name,
                joint=joint_names.index(c["joint"]),
                p0=np.array([float(v) for v in c["p0"].split()]),
                p1=np.array([float(v) for v in c["p1"].split()]),
                radius=float(c["radius"]),
                len_class=SHAPE_NAMES.index(c.get("len_class", "global")),
                rad_class=SHAPE_NAMES.index(c.get("rad_class", "global")),
            ))
        regions = {}
        for sec in cp.sections():
            if sec.startswith("region "):
                regions[sec[len("region "):]] = cp[sec]["capsules"].split()
        sk = cp["skeleton"]
        return cls(
            joint_names=joint_names,
            parents=np.array(parents),
            rest_offsets=np.array(offsets),
            offset_len_class=np.array(off_classes),
            capsules=capsules,
            blend_radius=float(sk["blend_radius"]),
            density_sharpness=float(sk["density_sharpness"]),
            region_capsules=regions,
        )

    @classmethod
    def from_file(cls, path) -> "SkeletonConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_text(f.read())


def _build_default_skeleton() -> SkeletonConfig:
    # Canonical frame: y up, +x is the body's left, body faces +z. A-pose.
    S = {n: i for i, n in enumerate(SHAPE_NAMES)}
    j = {n: i for i, n in enumerate(JOINT_NAMES)}

    arm_dir_l = np.array([np.sin(0.6), -np.cos(0.6), 0.0])  # ~34 deg from vertical
    arm_dir_r = arm_dir_l * np.array([-1.0, 1.0, 1.0])
    upper_arm, forearm = 0.28, 0.26

    rest_pos = np.zeros((NUM_JOINTS, 3))
    rest_pos[j["root"]] = (0.0, 0.95, 0.0)
    rest_pos[j["spine"]] = (0.0, 1.10, 0.0)
    rest_pos[j["neck"]] = (0.0, 1.47, 0.0)
    rest_pos[j["head"]] = (0.0, 1.56, 0.0)
    rest_pos[j["l_shoulder"]] = (0.18, 1.42, 0.0)
    rest_pos[j["l_elbow"]] = rest_pos[j["l_shoulder"]] + upper_arm * arm_dir_l
    rest_pos[j["l_wrist"]] = rest_pos[j["l_elbow"]] + forearm * arm_dir_l
    rest_pos[j["r_shoulder"]] = (-0.18, 1.42, 0.0)
    rest_pos[j["r_elbow"]] = rest_pos[j["r_shoulder"]] + upper_arm * arm_dir_r
    rest_pos[j["r_wrist"]] = rest_pos[j["r_elbow"]] + forearm * arm_dir_r
    rest_pos[j["l_hip"]] = (0.09, 0.90, 0.0)
    rest_pos[j["l_knee"]] = (0.09, 0.50, 0.0)
    rest_pos[j["l_ankle"]] = (0.09, 0.08, 0.0)
    rest_pos[j["r_hip"]] = (-0.09, 0.90, 0.0)
    rest_pos[j["r_knee"]] = (-0.09, 0.50, 0.0)
    rest_pos[j["r_ankle"]] = (-0.09, 0.08, 0.0)

    parents = np.array([
        -1, j["root"], j["spine"], j["neck"],
        j["spine"], j["l_shoulder"], j["l_elbow"],
        j["spine"], j["r_shoulder"], j["r_elbow"],
        j["root"], j["l_hip"], j["l_knee"],
        j["root"], j["r_hip"], j["r_knee"],
    ])
    offsets = np.zeros((NUM_JOINTS, 3))
    for jj in range(1, NUM_JOINTS):
        offsets[jj] = rest_pos[jj] - rest_pos[parents[jj]]
    # root offset stays zero: the pelvis is the canonical-frame origin, so a
    # global rigid transform composes exactly with the root joint
    offset_class = np.array([
        S["global"], S["torso_len"], S["torso_len"], S["head_len"],
        S["width"], S["arm_len"], S["arm_len"],
        S["width"], S["arm_len"], S["arm_len"],
        S["width"], S["leg_len"], S["leg_len"],
        S["width"], S["leg_len"], S["leg_len"],
    ])

    def local(cap_joint, world_pt):
        return np.asarray(world_pt, dtype=np.float64) - rest_pos[j[cap_joint]]

    caps = []

    def add(name, joint_name, p0w, p1w, radius, len_class, rad_class):
        caps.append(CapsuleSpec(
            name=name, joint=j[joint_name],
            p0=local(joint_name, p0w), p1=local(joint_name, p1w),
            radius=radius, len_class=S[len_class], rad_class=S[rad_class]))

    add("pelvis", "root", (-0.08, 0.95, 0.0), (0.08, 0.95, 0.0), 0.11, "width", "torso_rad")
    add("torso", "spine", (0.0, 1.10, 0.0), (0.0, 1.38, 0.0), 0.12, "torso_len", "torso_rad")
    add("neck_c", "neck", (0.0, 1.46, 0.0), (0.0, 1.56, 0.0), 0.05, "head_len", "head_rad")
    add("head_c", "head", (0.0, 1.62, 0.0), (0.0, 1.70, 0.0), 0.09, "head_len", "head_rad")

    for side, jj0, dirv in (("l", "l_", arm_dir_l), ("r", "r_", arm_dir_r)):
        sh, el, wr = rest_pos[j[jj0 + "shoulder"]], rest_pos[j[jj0 + "elbow"]], rest_pos[j[jj0 + "wrist"]]
        add(f"{side}_upper_arm", jj0 + "shoulder", sh + 0.02 * dirv, el, 0.045, "arm_len", "arm_rad")
        add(f"{side}_forearm", jj0 + "elbow", el, wr, 0.038, "arm_len", "arm_rad")
        add(f"{side}_hand", jj0 + "wrist", wr, wr + 0.13 * dirv, 0.034, "arm_len", "arm_rad")

    for side, jj0 in (("l", "l_"), ("r", "r_")):
        hip, knee, ankle = rest_pos[j[jj0 + "hip"]], rest_pos[j[jj0 + "knee"]], rest_pos[j[jj0 + "ankle"]]
        add(f"{side}_thigh", jj0 + "hip", hip, knee, 0.075, "leg_len", "leg_rad")
        add(f"{side}_shin", jj0 + "knee", knee, ankle, 0.055, "leg_len", "leg_rad")
        add(f"{side}_foot", jj0 + "ankle", ankle + (0.0, -0.03, 0.0),
            ankle + (0.0, -0.04, 0.13), 0.04, "leg_len", "leg_rad")

    regions = {
        "head": ["neck_c", "head_c"],
        "upper_body": ["torso", "l_upper_arm", "r_upper_arm"],
        "midsection": ["pelvis", "torso"],
        "lower_body": ["l_thigh", "l_shin", "l_foot", "r_thigh", "r_shin", "r_foot"],
        "left_arm": ["l_upper_arm", "l_forearm", "l_hand"],
        "right_arm": ["r_upper_arm", "r_forearm", "r_hand"],
        "full_body": [c.name for c in caps],
    }

    return SkeletonConfig(
        joint_names=list(JOINT_NAMES),
        parents=parents,
        rest_offsets=offsets,
        offset_len_class=offset_class,
        capsules=caps,
        region_capsules=regions,
    )


class PosedBody:
    """One (pose, shape) instantiation: forward kinematics done once, then
    pure point queries. Safe for concurrent read-only use."""

    def __init__(self, skeleton: SkeletonConfig, pose: Pose, shape: Shape):
        pose.validate(skeleton.num_joints)
        shape.validate()
        self.skeleton = skeleton
        self.pose = pose
        self.shape = shape
        self._run_fk()

    def _run_fk(self):
        sk = self.skeleton
        beta = self.shape.beta
        g = beta[0]
        J = sk.num_joints

        R = np.zeros((J, 3, 3))
        t = np.zeros((J, 3))
        for jj in range(J):
            Rj = axis_angle_to_matrix(self.pose.joint_rotations[jj])
            off = sk.rest_offsets[jj] * (g * beta[sk.offset_len_class[jj]])
            p = sk.parents[jj]
            if p < 0:
                t[jj] = self.pose.root_translation + off
                R[jj] = Rj
            else:
                t[jj] = t[p] + R[p] @ off
                R[jj] = R[p] @ Rj
        self.joint_rotmats = R
        self.joint_origins = t

        P = sk.num_capsules
        A = np.zeros((P, 3))
        B = np.zeros((P, 3))
        rad = np.zeros(P)
        cap_joint = np.zeros(P, dtype=np.int64)
        for i, cap in enumerate(sk.capsules):
            lscale = g * beta[cap.len_class]
            rscale = g * beta[cap.rad_class]
            jj = cap.joint
            A[i] = t[jj] + R[jj] @ (cap.p0 * lscale)
            B[i] = t[jj] + R[jj] @ (cap.p1 * lscale)
            rad[i] = cap.radius * rscale
            cap_joint[i] = jj
        self.cap_a = A
        self.cap_b = B
        self.cap_r = rad
        self.cap_joint = cap_joint
        # canonical-frame capsule geometry, gatherable per sample
        rest_pos = sk.rest_joint_positions()
        self.canon_p0 = np.stack([rest_pos[c.joint] + c.p0 for c in sk.capsules])
        self.canon_p1 = np.stack([rest_pos[c.joint] + c.p1 for c in sk.capsules])
        self.canon_r = np.array([c.radius for c in sk.capsules])
        self._cap_cache = {}

    def _caps(self, dtype):
        key = np.dtype(dtype).name
        if key not in self._cap_cache:
            center = 0.5 * (self.cap_a + self.cap_b).mean(axis=0)
            Ac = self.cap_a - center
            ab = self.cap_b - self.cap_a
            len2 = (ab * ab).sum(-1)
            self._cap_cache[key] = {
                "center": center.astype(dtype),
                "Ac": Ac.astype(dtype),
                "ab": ab.astype(dtype),
                "A2": (Ac * Ac).sum(-1).astype(dtype),
                "Aab": (Ac * ab).sum(-1).astype(dtype),
                "len2": len2.astype(dtype),
                "inv_len2": (1.0 / np.maximum(len2, 1e-30)).astype(dtype),
                "r": self.cap_r.astype(dtype),
            }
        return self._cap_cache[key]

    def _capsule_distances(self, x: np.ndarray):
        """Per-capsule signed distances (N, P) and axis parameters (N, P).

        Uses the expansion |x - A - t*ab|^2 = |x-A|^2 - 2t (x-A).ab + t^2|ab|^2
        around a recentered origin so the heavy products are two matmuls."""
        c = self._caps(x.dtype)
        xc = x - c["center"]
        dot_xA = xc @ c["Ac"].T                       # (N, P)
        dot_xab = xc @ c["ab"].T
        rel_ab = dot_xab - c["Aab"]
        tpar = np.clip(rel_ab * c["inv_len2"], 0.0, 1.0)
        d2 = ((xc * xc).sum(-1)[:, None] - 2.0 * dot_xA + c["A2"]
              - 2.0 * tpar * rel_ab + tpar * tpar * c["len2"])
        dist = np.sqrt(np.maximum(d2, 0.0))
        return dist - c["r"], tpar

    def capsule_sdf(self, x: np.ndarray) -> np.ndarray:
        """Exact distance to the nearest single capsule (no blending), (N,)."""
        d, _ = self._capsule_distances(np.atleast_2d(np.asarray(x)))
        return d.min(axis=1)

    def signed_distance(self, x: np.ndarray) -> np.ndarray:
        """Smooth-union (log-sum-exp) signed distance, (N,) for x (N, 3)."""
        x = np.atleast_2d(np.asarray(x))
        d, _ = self._capsule_distances(x)
        k = np.asarray(self.skeleton.blend_radius, dtype=x.dtype)
        m = d.min(axis=1, keepdims=True)
        return (m[:, 0] - k * np.log(np.exp((m - d) / k).sum(axis=1))).astype(x.dtype)

    def semantic_coords(self, x: np.ndarray):
        """Returns (d, s, bone): blended signed distance, canonical-frame
        nearest-surface codes (N, 3), and nearest-capsule indices (N,)."""
        x = np.atleast_2d(np.asarray(x))
        sk = self.skeleton
        dists, tpar = self._capsule_distances(x)
        k = np.asarray(sk.blend_radius, dtype=x.dtype)
        m = dists.min(axis=1, keepdims=True)
        d = (m[:, 0] - k * np.log(np.exp((m - dists) / k).sum(axis=1))).astype(x.dtype)

        bone = dists.argmin(axis=1)
        n = x.shape[0]
        idx = np.arange(n)
        tb_raw = tpar[idx, bone]
        A = self.cap_a.astype(x.dtype)[bone]
        ab = (self.cap_b - self.cap_a).astype(x.dtype)[bone]
        cl = A + tb_raw[:, None] * ab                 # (N, 3) world axis point
        dirv = x - cl
        norm = np.linalg.norm(dirv, axis=1, keepdims=True)
        # on-axis query: any radial direction is valid; pick +z deterministically
        fallback = np.zeros_like(dirv)
        fallback[:, 2] = 1.0
        dirv = np.where(norm > 1e-12, dirv / np.maximum(norm, 1e-30), fallback)

        jidx = self.cap_joint[bone]
        Rj = self.joint_rotmats.astype(x.dtype)[jidx]             # (N, 3, 3)
        u_local = np.einsum("nji,nj->ni", Rj, dirv)               # R^T turns world into local

        p0 = self.canon_p0.astype(x.dtype)[bone]
        p1 = self.canon_p1.astype(x.dtype)[bone]
        r0 = self.canon_r.astype(x.dtype)[bone]
        s = p0 + tb_raw[:, None] * (p1 - p0) + r0[:, None] * u_local
        return d, s, bone

    def canonical_capsule_residual(self, s: np.ndarray, bone: np.ndarray) -> np.ndarray:
        """|capsule SDF| of codes against their assigned canonical capsule."""
        sk = self.skeleton
        rest_pos = sk.rest_joint_positions()
        out = np.zeros(len(s))
        for i, (pt, b) in enumerate(zip(np.atleast_2d(s), bone)):
            cap = sk.capsules[b]
            a = rest_pos[cap.joint] + cap.p0
            bb = rest_pos[cap.joint] + cap.p1
            ab = bb - a
            tt = np.clip(np.dot(pt - a, ab) / max(np.dot(ab, ab), 1e-30), 0.0, 1.0)
            out[i] = abs(np.linalg.norm(pt - (a + tt * ab)) - cap.radius)
        return out

    def capsule_beta_jacobians(self):
        """Exact derivatives of posed capsule geometry w.r.t. the shape vector:
        (dA (P, B, 3), dB (P, B, 3), dr (P, B)). Joint rotations do not depend
        on beta, so these are closed-form."""
        if hasattr(self, "_beta_jac"):
            return self._beta_jac
        sk = self.skeleton
        beta = self.shape.beta
        g = beta[0]
        J, B = sk.num_joints, NUM_SHAPE
        dt = np.zeros((J, B, 3))
        for jj in range(J):
            p = sk.parents[jj]
            cls = sk.offset_len_class[jj]
            if p < 0:
                continue
            base = self.joint_rotmats[p] @ sk.rest_offsets[jj]
            dt[jj] = dt[p].copy()
            dt[jj, 0] += base * beta[cls]
            dt[jj, cls] += base * g
        P = sk.num_capsules
        dA = np.zeros((P, B, 3))
        dB = np.zeros((P, B, 3))
        dr = np.zeros((P, B))
        for i, cap in enumerate(sk.capsules):
            jj = cap.joint
            b0 = self.joint_rotmats[jj] @ cap.p0
            b1 = self.joint_rotmats[jj] @ cap.p1
            dA[i] = dt[jj].copy()
            dB[i] = dt[jj].copy()
            dA[i, 0] += b0 * beta[cap.len_class]
            dA[i, cap.len_class] += b0 * g
            dB[i, 0] += b1 * beta[cap.len_class]
            dB[i, cap.len_class] += b1 * g
            dr[i, 0] = cap.radius * beta[cap.rad_class]
            dr[i, cap.rad_class] = cap.radius * g
        self._beta_jac = (dA, dB, dr)
        return self._beta_jac

    def sdf_beta_gradient(self, x: np.ndarray) -> np.ndarray:
        """d(blended signed distance)/d(beta), (N, B). Exact up to the clamped
        segment parameter (envelope theorem at the clamp)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        if n == 0:
            return np.zeros((0, NUM_SHAPE))
        dA, dB, dr = self.capsule_beta_jacobians()
        A, Bp = self.cap_a, self.cap_b
        ab = Bp - A
        denom = np.maximum((ab * ab).sum(-1), 1e-30)
        rel = x[:, None, :] - A[None, :, :]
        tpar = np.clip((rel * ab).sum(-1) / denom, 0.0, 1.0)
        closest = A + tpar[..., None] * ab
        diff = x[:, None, :] - closest
        dist = np.sqrt(np.maximum((diff * diff).sum(-1), 1e-30))
        nhat = diff / dist[..., None]                          # (N, P, 3)
        d_caps = dist - self.cap_r
        # d(dist_i)/d(beta) = -nhat . ((1-t) dA + t dB)
        dend = (1.0 - tpar)[..., None, None] * dA[None] + tpar[..., None, None] * dB[None]
        ddist = -(nhat[:, :, None, :] * dend).sum(-1)          # (N, P, B)
        dd = ddist - dr[None]
        k = self.skeleton.blend_radius
        m = d_caps.min(axis=1, keepdims=True)
        wts = np.exp((m - d_caps) / k)
        wts = wts / wts.sum(axis=1, keepdims=True)
        return (wts[..., None] * dd).sum(axis=1)

    def bounds(self, region: str = "full_body", margin: float = 0.1):
        """Axis-aligned box (lo, hi) around the region's posed primitives."""
        if region not in REGIONS:
            raise ValueError(f"unknown region {region!r}")
        names = self.skeleton.region_capsules[region]
        name_to_idx = {c.name: i for i, c in enumerate(self.skeleton.capsules)}
        ids = [name_to_idx[n] for n in names]
        a, b, r = self.cap_a[ids], self.cap_b[ids], self.cap_r[ids][:, None]
        lo = np.minimum(a - r, b - r).min(axis=0) - margin
        hi = np.maximum(a + r, b + r).max(axis=0) + margin
        return lo, hi

    def sdf_gradient(self, x: np.ndarray, step: float = 1e-4, normalize: bool = True):
        """Central-difference spatial gradient of the blended SDF.

        Returns (grad, valid); valid is False where the raw gradient norm
        is <= 1e-8 so callers can skip degenerate samples.
        """
        if step <= 0:
            raise ValueError("step must be positive")
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        g = np.zeros_like(x)
        for axis in range(3):
            e = np.zeros(3)
            e[axis] = step
            g[:, axis] = (self.signed_distance(x + e) - self.signed_distance(x - e)) / (2 * step)
        norm = np.linalg.norm(g, axis=1)
        valid = norm > 1e-8
        if normalize:
            g = np.where(valid[:, None], g / np.maximum(norm[:, None], 1e-30), g)
        return g, valid

    def sample_surface_points(self, n: int, rng_seed: int = 0, tol: float = 1e-3):
        """n points with |signed_distance| <= tol, seeded from capsule surfaces.

        Projection uses damped SDF Newton steps; raises SurfaceSamplingError if
        any seed fails to converge within 50 iterations.
        """
        if n == 0:
            return np.zeros((0, 3))
        rng = np.random.default_rng(rng_seed)
        lengths = np.linalg.norm(self.cap_b - self.cap_a, axis=1)
        areas = 2 * np.pi * self.cap_r * lengths + 4 * np.pi * self.cap_r ** 2
        probs = areas / areas.sum()
        cap_idx = rng.choice(len(probs), size=n, p=probs)

        # random point on each chosen capsule surface (cylinder side or caps)
        a, b, r = self.cap_a[cap_idx], self.cap_b[cap_idx], self.cap_r[cap_idx]
        axis = b - a
        alen = np.linalg.norm(axis, axis=1, keepdims=True)
        axis_u = axis / np.maximum(alen, 1e-30)
        side_frac = (2 * np.pi * r * alen[:, 0]) / (2 * np.pi * r * alen[:, 0] + 4 * np.pi * r ** 2)
        u = rng.random(n)
        dirs = rng.normal(size=(n, 3))
        pts = np.zeros((n, 3))
        on_side = u < side_frac
        tt = rng.random(n)
        radial = dirs - (dirs * axis_u).sum(1, keepdims=True) * axis_u
        radial /= np.maximum(np.linalg.norm(radial, axis=1, keepdims=True), 1e-30)
        pts[on_side] = (a + tt[:, None] * axis)[on_side] + (r[:, None] * radial)[on_side]
        sph = dirs / np.maximum(np.linalg.norm(dirs, axis=1, keepdims=True), 1e-30)
        endpoint = np.where(((sph * axis_u).sum(1) > 0)[:, None], b, a)
        pts[~on_side] = (endpoint + r[:, None] * sph)[~on_side]

        # project onto the blended surface
        for _ in range(50):
            d = self.signed_distance(pts)
            if np.abs(d).max() <= tol:
                return pts
            g, valid = self.sdf_gradient(pts)
            stepv = d[:, None] * g
            stepv[~valid] = 0.0
            pts = pts - 0.9 * stepv
        bad = int((np.abs(self.signed_distance(pts)) > tol).sum())
        raise SurfaceSamplingError(f"{bad}/{n} surface seeds failed to converge")


def evaluate_semantic_sdf(x, pose: Pose, shape: Shape,
                          skeleton: SkeletonConfig | None = None) -> SemanticCoord:
    """Single-point convenience wrapper; batch callers should use PosedBody."""
    skeleton = skeleton or SkeletonConfig.default()
    body = PosedBody(skeleton, pose, shape)
    d, s, bone = body.semantic_coords(np.asarray(x, dtype=np.float64)[None, :])
    return SemanticCoord(d=float(d[0]), s=s[0], bone=int(bone[0]))


def density_proxy(d, sharpness: float):
    """Smooth scaled indicator: a * sigmoid(-a * d); in (0, a) for finite d."""
    if sharpness <= 0:
        raise ValueError("sharpness must be positive")
    d = np.asarray(d)
    a = np.asarray(sharpness, dtype=d.dtype if d.dtype.kind == "f" else np.float64)
    return a * _sigmoid(-a * d)


def semantic_region_bounds(pose: Pose, shape: Shape, region: str,
                           skeleton: SkeletonConfig | None = None,
                           margin: float = 0.1):
    skeleton = skeleton or SkeletonConfig.default()
    return PosedBody(skeleton, pose, shape).bounds(region, margin)
