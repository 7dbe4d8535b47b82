"""Core primitive types.

Structure primitives are invisible anisotropic Gaussians carrying a learnable
branch/leaf probability; depending on that label they convert to an explicit
cylinder (branch) or elliptic disk (leaf). Appearance primitives are small
surface-bound Gaussians carrying color, opacity and a semantic feature, each
bound to exactly one structure primitive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

ORTHO_TOL = 1e-9
SCALE_FLOOR = 1e-9


def sigmoid(x):
    """Numerically stable logistic function (scalar or array)."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p: float) -> float:
    """Inverse of :func:`sigmoid` for p in (0, 1)."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"logit requires p in (0,1), got {p}")
    return math.log(p / (1.0 - p))


def _as_vec3(v, name: str) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {a.shape}")
    return a


def is_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        return False
    return (
        np.allclose(R.T @ R, np.eye(3), atol=tol)
        and abs(np.linalg.det(R) - 1.0) <= tol
    )


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Project a near-rotation matrix back onto SO(3) (polar decomposition)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def rotation_from_axis_angle(w) -> np.ndarray:
    """Rodrigues formula; w is an axis-angle 3-vector."""
    w = _as_vec3(w, "axis-angle")
    theta = float(np.linalg.norm(w))
    if theta < 1e-14:
        return np.eye(3)
    k = w / theta
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(theta) * K + (1.0 - math.cos(theta)) * (K @ K)


def apply_rotation_tangent(R: np.ndarray, w) -> np.ndarray:
    """Right-perturb R by the tangent vector w and re-orthonormalize."""
    return orthonormalize(np.asarray(R, float) @ rotation_from_axis_angle(w))


def rotation_grad_from_column_grads(R: np.ndarray, col_grads) -> np.ndarray:
    """Map gradients w.r.t. the columns of R to the right-tangent chart.

    With R(w) = R @ expm(hat(w)), column k moves as dv_k = R (w x e_k), so
    dL/dw = sum_k e_k x (R^T g_k) for per-column gradients g_k.
    """
    g = np.zeros(3)
    for k, gk in col_grads:
        h = R.T @ np.asarray(gk, float)
        e = np.zeros(3)
        e[k] = 1.0
        g += np.cross(e, h)
    return g


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    A = rng.normal(size=(3, 3))
    Q, Rm = np.linalg.qr(A)
    Q = Q @ np.diag(np.sign(np.diag(Rm)))
    if np.linalg.det(Q) < 0:
        Q[:, 2] = -Q[:, 2]
    return Q


def perpendicular_frame(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal pair completing `axis` to a right-handed frame."""
    axis = np.asarray(axis, float)
    ref = np.zeros(3)
    ref[int(np.argmin(np.abs(axis)))] = 1.0
    e1 = np.cross(axis, ref)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)
    return e1, e2


class PrimitiveKind(Enum):
    BRANCH = "branch"
    LEAF = "leaf"


@dataclass(frozen=True)
class StructurePrimitive:
    """Invisible coarse primitive: Gaussian geometry plus a branch/leaf logit.

    Attributes:
        center: Gaussian mean, scene units.
        rotation: orthonormal 3x3, columns are the principal axes v1, v2, v3.
        scales: per-axis standard deviations, sorted descending, all positive.
        branch_logit: real; branch probability is sigmoid(branch_logit).
        active: False once removed by density control.
    """

    center: np.ndarray
    rotation: np.ndarray
    scales: np.ndarray
    branch_logit: float
    active: bool = True

    def __post_init__(self):
        object.__setattr__(self, "center", _as_vec3(self.center, "center"))
        R = np.asarray(self.rotation, dtype=float)
        if not is_rotation(R):
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        s = _as_vec3(self.scales, "scales")
        if not (s[0] >= s[1] >= s[2] > 0):
            raise ValueError(f"scales must be sorted descending and positive, got {s}")
        object.__setattr__(self, "scales", s)
        object.__setattr__(self, "branch_logit", float(self.branch_logit))

    @property
    def axes(self) -> np.ndarray:
        """Principal axes as rows (v1, v2, v3)."""
        return self.rotation.T

    @property
    def branch_prob(self) -> float:
        return float(sigmoid(self.branch_logit))

    @property
    def covariance(self) -> np.ndarray:
        S = np.diag(self.scales)
        return self.rotation @ S @ S.T @ self.rotation.T


@dataclass(frozen=True)
class Cylinder:
    """Explicit branch surface: axis-aligned finite cylinder."""

    center: np.ndarray
    axis: np.ndarray
    radius: float
    length: float

    def __post_init__(self):
        object.__setattr__(self, "center", _as_vec3(self.center, "center"))
        u = _as_vec3(self.axis, "axis")
        if abs(np.linalg.norm(u) - 1.0) > ORTHO_TOL:
            raise ValueError("cylinder axis must be unit length")
        object.__setattr__(self, "axis", u)
        if not self.radius > 0 or not self.length > 0:
            raise ValueError("cylinder radius and length must be positive")


@dataclass(frozen=True)
class Disk:
    """Explicit leaf surface: elliptic disk with an in-plane frame."""

    center: np.ndarray
    normal: np.ndarray
    major: float
    minor: float
    e1: np.ndarray
    e2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _as_vec3(self.center, "center"))
        n = _as_vec3(self.normal, "normal")
        e1 = _as_vec3(self.e1, "e1")
        e2 = _as_vec3(self.e2, "e2")
        M = np.stack([e1, e2, n])
        if not np.allclose(M @ M.T, np.eye(3), atol=ORTHO_TOL):
            raise ValueError("disk frame (e1, e2, normal) must be orthonormal")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "e1", e1)
        object.__setattr__(self, "e2", e2)
        if not (self.major >= self.minor > 0):
            raise ValueError("disk requires major >= minor > 0")


@dataclass(frozen=True)
class AppearancePrimitive:
    """Visible surface-bound Gaussian with color, opacity and feature."""

    center: np.ndarray
    rotation: np.ndarray
    scales: np.ndarray
    color: np.ndarray
    opacity: float
    feature: np.ndarray
    parent: int

    def __post_init__(self):
        object.__setattr__(self, "center", _as_vec3(self.center, "center"))
        R = np.asarray(self.rotation, dtype=float)
        if not is_rotation(R):
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        s = _as_vec3(self.scales, "scales")
        if np.any(s < 0):
            raise ValueError("appearance scales must be non-negative")
        object.__setattr__(self, "scales", s)
        c = np.clip(_as_vec3(self.color, "color"), 0.0, 1.0)
        object.__setattr__(self, "color", c)
        object.__setattr__(self, "opacity", float(np.clip(self.opacity, 0.0, 1.0)))
        object.__setattr__(self, "feature", np.asarray(self.feature, dtype=float).ravel())
        if self.parent < 0:
            raise ValueError("parent index must be non-negative")


def to_cylinder(stp: StructurePrimitive) -> Cylinder:
    """Convert to the branch surface form: axis v1, radius s2, length 3*s1."""
    return Cylinder(
        center=stp.center,
        axis=stp.rotation[:, 0],
        radius=float(stp.scales[1]),
        length=3.0 * float(stp.scales[0]),
    )


def to_disk(stp: StructurePrimitive) -> Disk:
    """Convert to the leaf surface form: normal v3, major 2*s1, minor s2."""
    return Disk(
        center=stp.center,
        normal=stp.rotation[:, 2],
        major=2.0 * float(stp.scales[0]),
        minor=float(stp.scales[1]),
        e1=stp.rotation[:, 0],
        e2=stp.rotation[:, 1],
    )


def classify(stp: StructurePrimitive) -> PrimitiveKind:
    """Branch iff the branch probability is at least one half (tie -> branch)."""
    return PrimitiveKind.BRANCH if stp.branch_prob >= 0.5 else PrimitiveKind.LEAF
