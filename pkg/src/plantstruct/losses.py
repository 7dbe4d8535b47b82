"""Differentiable objectives and their analytic gradients.

Every loss returns `(value, ParamGrads)` where the gradients cover structure
centers / scales / rotations (tangent-space) / logits and appearance centers /
colors / features. Rotation gradients live in the right-tangent chart
R(w) = R @ expm(hat(w)); the finite-difference checker perturbs the same chart.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .primitives import Cylinder, Disk, rotation_from_axis_angle, sigmoid
from .scene import AppearanceSet, PlantCloud, Scene, SemanticReference, StructureSet

TERMS = ("fit", "bind", "sem", "op", "cls", "graph")

PI_CLAMP = 1e-12
REL_ERR_FLOOR = 1e-6


@dataclass
class LossWeights:
    """Per-term weights, the semantic temperature, and per-term stage flags."""

    bind: float = 1.0
    sem: float = 0.2
    op: float = 0.05
    cls: float = 0.1
    fit: float = 1.0
    graph: float = 1.0
    tau: float = 0.2
    enabled: dict = field(default_factory=lambda: {t: True for t in TERMS})

    def __post_init__(self):
        for t in TERMS:
            if self.weight(t) < 0:
                raise ValueError(f"weight for '{t}' must be non-negative")
            self.enabled.setdefault(t, True)
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    def weight(self, term: str) -> float:
        return float(getattr(self, term))

    def effective(self) -> dict[str, float]:
        return {t: (self.weight(t) if self.enabled[t] else 0.0) for t in TERMS}


@dataclass
class ParamGrads:
    """Gradient arrays matching the scene's parameter arrays."""

    stp_center: np.ndarray   # (S, 3)
    stp_scale: np.ndarray    # (S, 3)
    stp_rot: np.ndarray      # (S, 3) tangent coordinates
    stp_logit: np.ndarray    # (S,)
    app_center: np.ndarray   # (A, 3)
    app_color: np.ndarray    # (A, 3)
    app_feature: np.ndarray  # (A, D)

    @classmethod
    def zeros(cls, n_stps: int, n_apps: int, feat_dim: int) -> "ParamGrads":
        return cls(
            stp_center=np.zeros((n_stps, 3)),
            stp_scale=np.zeros((n_stps, 3)),
            stp_rot=np.zeros((n_stps, 3)),
            stp_logit=np.zeros(n_stps),
            app_center=np.zeros((n_apps, 3)),
            app_color=np.zeros((n_apps, 3)),
            app_feature=np.zeros((n_apps, feat_dim)),
        )

    def add_scaled(self, other: "ParamGrads", w: float) -> None:
        self.stp_center += w * other.stp_center
        self.stp_scale += w * other.stp_scale
        self.stp_rot += w * other.stp_rot
        self.stp_logit += w * other.stp_logit
        self.app_center += w * other.app_center
        self.app_color += w * other.app_color
        self.app_feature += w * other.app_feature

    def all_finite(self) -> bool:
        return all(
            np.all(np.isfinite(a))
            for a in (self.stp_center, self.stp_scale, self.stp_rot,
                      self.stp_logit, self.app_center, self.app_color,
                      self.app_feature)
        )


@dataclass
class LossReport:
    """Per-term values plus gradients of the weighted total."""

    values: dict[str, float]
    total: float
    grads: ParamGrads


# ---------------------------------------------------------------------------
# Point-to-surface distances
# ---------------------------------------------------------------------------

def _tangent_from_column_grads(rots: np.ndarray, g1, g2, g3) -> np.ndarray:
    """Batched map from per-column gradients to right-tangent coordinates.

    h_k = R^T g_k; tangent = sum_k e_k x h_k.
    """
    out = np.zeros((len(rots), 3))
    hs = []
    for g in (g1, g2, g3):
        if g is None:
            hs.append(None)
        else:
            hs.append(np.einsum("aim,ai->am", rots, g))
    h1, h2, h3 = hs
    if h1 is not None:
        out[:, 1] -= h1[:, 2]
        out[:, 2] += h1[:, 1]
    if h2 is not None:
        out[:, 0] += h2[:, 2]
        out[:, 2] -= h2[:, 0]
    if h3 is not None:
        out[:, 0] -= h3[:, 1]
        out[:, 1] += h3[:, 0]
    return out


def _cylinder_terms(q, centers, rots, scales):
    """Vectorized distance-to-cylinder (axis v1, radius s2) with gradients."""
    u = rots[:, :, 0]
    r = scales[:, 1]
    delta = q - centers
    proj = np.einsum("ai,ai->a", delta, u)
    w = delta - proj[:, None] * u
    raddist = np.linalg.norm(w, axis=1)
    d = np.maximum(0.0, raddist - r)
    mask = d > 0
    what = np.zeros_like(w)
    what[mask] = w[mask] / raddist[mask, None]
    dq = what
    dc = -what
    ds2 = -mask.astype(float)
    dv1 = -proj[:, None] * what
    return d, dq, dc, ds2, dv1


def project_to_ellipse(u0: np.ndarray, v0: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Closest boundary point on the ellipse (x/a)^2+(y/b)^2=1 for exterior
    first-quadrant points (u0, v0). Bisection on the Lagrange parameter."""
    au = a * u0
    bv = b * v0
    hi = np.sqrt(au**2 + bv**2) - np.minimum(a, b) ** 2
    hi = np.maximum(hi, 0.0)
    lo = np.zeros_like(hi)
    for _ in range(90):
        mid = 0.5 * (lo + hi)
        f = (au / (mid + a**2)) ** 2 + (bv / (mid + b**2)) ** 2
        high = f > 1.0
        lo = np.where(high, mid, lo)
        hi = np.where(high, hi, mid)
    s = 0.5 * (lo + hi)
    return (a**2) * u0 / (s + a**2), (b**2) * v0 / (s + b**2)


def _disk_terms(q, centers, rots, scales):
    """Vectorized distance-to-elliptic-disk (normal v3, semi-axes 2*s1, s2)
    with gradients. Exterior points use the exact boundary projection; the
    gradient w.r.t. disk parameters follows the envelope theorem."""
    n = len(q)
    e1 = rots[:, :, 0]
    e2 = rots[:, :, 1]
    nrm = rots[:, :, 2]
    a = 2.0 * scales[:, 0]
    b = scales[:, 1]
    delta = q - centers
    z = np.einsum("ai,ai->a", delta, nrm)
    x = np.einsum("ai,ai->a", delta, e1)
    y = np.einsum("ai,ai->a", delta, e2)
    rho2 = (x / a) ** 2 + (y / b) ** 2
    interior = rho2 <= 1.0

    d = np.empty(n)
    dq = np.zeros((n, 3))
    dc = np.zeros((n, 3))
    ds1 = np.zeros(n)
    ds2 = np.zeros(n)
    gv1 = np.zeros((n, 3))
    gv2 = np.zeros((n, 3))
    gv3 = np.zeros((n, 3))

    if np.any(interior):
        zi = z[interior]
        sgn = np.sign(zi)
        d[interior] = np.abs(zi)
        dq[interior] = sgn[:, None] * nrm[interior]
        dc[interior] = -dq[interior]
        gv3[interior] = sgn[:, None] * delta[interior]

    ext = ~interior
    if np.any(ext):
        ax, bx = a[ext], b[ext]
        X0, Y0 = project_to_ellipse(np.abs(x[ext]), np.abs(y[ext]), ax, bx)
        X = np.sign(x[ext]) * X0
        Y = np.sign(y[ext]) * Y0
        rx = x[ext] - X
        ry = y[ext] - Y
        de = np.sqrt(rx**2 + ry**2)
        dd = np.sqrt(z[ext] ** 2 + de**2)
        d[ext] = dd
        # 3D offset from the closest disk point, expressed in the disk frame.
        u3 = (
            z[ext, None] * nrm[ext] + rx[:, None] * e1[ext] + ry[:, None] * e2[ext]
        ) / dd[:, None]
        dq[ext] = u3
        dc[ext] = -u3
        da = -(rx / dd) * (X / ax)
        db = -(ry / dd) * (Y / bx)
        ds1[ext] = 2.0 * da
        ds2[ext] = db
        gv1[ext] = -X[:, None] * u3
        gv2[ext] = -Y[:, None] * u3

    return d, dq, dc, ds1, ds2, gv1, gv2, gv3


def dist_point_cylinder(q, cy: Cylinder) -> float:
    """Distance from a point to the solid infinite cylinder around cy's axis."""
    q = np.asarray(q, dtype=float).reshape(1, 3)
    rot = np.zeros((1, 3, 3))
    rot[0, :, 0] = cy.axis
    scales = np.array([[cy.length / 3.0, cy.radius, cy.radius]])
    d, *_ = _cylinder_terms(q, cy.center.reshape(1, 3), rot, scales)
    return float(d[0])


def dist_point_disk(q, di: Disk) -> float:
    """Distance from a point to the closed elliptic disk."""
    q = np.asarray(q, dtype=float).reshape(1, 3)
    rot = np.zeros((1, 3, 3))
    rot[0, :, 0] = di.e1
    rot[0, :, 1] = di.e2
    rot[0, :, 2] = di.normal
    scales = np.array([[di.major / 2.0, di.minor, di.minor]])
    d, *_ = _disk_terms(q, di.center.reshape(1, 3), rot, scales)
    return float(d[0])


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

def _gather_parents(apps: AppearanceSet, stps: StructureSet):
    idx = apps.parents
    if len(idx) and (idx.min() < 0 or idx.max() >= len(stps)):
        raise ValueError("dangling appearance parent index")
    return idx, stps.centers[idx], stps.rotations[idx], stps.scales[idx]


def binding_loss(apps: AppearanceSet, stps: StructureSet) -> tuple[float, ParamGrads]:
    """Soft-masked point-to-surface attachment.

    Each appearance primitive is measured against both surface forms of its
    parent; the parent's branch probability mixes the two distances:
    mean(p * d_cylinder) + mean((1 - p) * d_disk).
    """
    g = ParamGrads.zeros(len(stps), len(apps), apps.feature_dim)
    n = len(apps)
    if n == 0:
        return 0.0, g
    idx, centers, rots, scales = _gather_parents(apps, stps)
    p = sigmoid(stps.logits)[idx]
    q = apps.centers

    d_cy, cq, cc, cs2, cv1 = _cylinder_terms(q, centers, rots, scales)
    d_di, dq, dc, ds1, ds2, gv1, gv2, gv3 = _disk_terms(q, centers, rots, scales)

    loss = float(np.mean(p * d_cy) + np.mean((1.0 - p) * d_di))
    pw = (p / n)[:, None]
    qw = ((1.0 - p) / n)[:, None]

    g.app_center = pw * cq + qw * dq
    np.add.at(g.stp_center, idx, pw * cc + qw * dc)
    scale_contrib = np.zeros((n, 3))
    scale_contrib[:, 0] = qw[:, 0] * ds1
    scale_contrib[:, 1] = pw[:, 0] * cs2 + qw[:, 0] * ds2
    np.add.at(g.stp_scale, idx, scale_contrib)
    tangent = _tangent_from_column_grads(
        rots, pw * cv1 + qw * gv1, qw * gv2, qw * gv3
    )
    np.add.at(g.stp_rot, idx, tangent)
    np.add.at(g.stp_logit, idx, (d_cy - d_di) * p * (1.0 - p) / n)
    return loss, g


def binding_kink_margins(apps: AppearanceSet, stps: StructureSet) -> np.ndarray:
    """Per-appearance distance to the nearest non-smooth point of the binding
    term (cylinder max() clamp, disk plane crossing, ellipse boundary)."""
    idx, centers, rots, scales = _gather_parents(apps, stps)
    q = apps.centers
    u = rots[:, :, 0]
    delta = q - centers
    proj = np.einsum("ai,ai->a", delta, u)
    raddist = np.linalg.norm(delta - proj[:, None] * u, axis=1)
    m_cyl = np.abs(raddist - scales[:, 1])

    e1, e2, nrm = rots[:, :, 0], rots[:, :, 1], rots[:, :, 2]
    a = 2.0 * scales[:, 0]
    b = scales[:, 1]
    z = np.einsum("ai,ai->a", delta, nrm)
    x = np.einsum("ai,ai->a", delta, e1)
    y = np.einsum("ai,ai->a", delta, e2)
    rho = np.sqrt((x / a) ** 2 + (y / b) ** 2)
    r_xy = np.sqrt(x**2 + y**2)
    # In-plane gap to the ellipse boundary along the radial direction.
    gap = np.where(rho > 1e-12, r_xy * np.abs(1.0 - rho) / np.maximum(rho, 1e-12),
                   np.minimum(a, b))
    m_plane = np.where(rho <= 1.0 + 1e-9, np.abs(z), np.inf)
    return np.minimum(np.minimum(m_cyl, gap), m_plane)


def overlap_loss(stps: StructureSet, k: int = 3) -> tuple[float, ParamGrads]:
    """Gaussian-weighted Mahalanobis overlap with each primitive's k nearest
    neighbors; the covariance in each pair term is the neighbor's."""
    s_count = len(stps)
    if s_count < 2:
        raise ValueError("overlap loss needs at least two structure primitives")
    g = ParamGrads.zeros(s_count, 0, 0)
    kq = min(k, s_count - 1)

    diff = stps.centers[:, None, :] - stps.centers[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")[:, :kq]

    i_idx = np.repeat(np.arange(s_count), kq)
    j_idx = order.ravel()
    delta = stps.centers[i_idx] - stps.centers[j_idx]
    rj = stps.rotations[j_idx]
    sj = np.maximum(stps.scales[j_idx], 1e-9)
    c = np.einsum("ai,aik->ak", delta, rj)          # components along v_k of j
    qform = np.sum((c / sj) ** 2, axis=1)
    t = np.exp(-0.5 * qform)
    loss = float(np.sum(t))

    mdelta = np.einsum("aik,ak->ai", rj, c / sj**2)  # Sigma_j^{-1} delta
    np.add.at(g.stp_center, i_idx, -t[:, None] * mdelta)
    np.add.at(g.stp_center, j_idx, t[:, None] * mdelta)
    np.add.at(g.stp_scale, j_idx, t[:, None] * c**2 / sj**3)
    col_grads = [(-t * c[:, m] / sj[:, m] ** 2)[:, None] * delta for m in range(3)]
    tangent = _tangent_from_column_grads(rj, *col_grads)
    np.add.at(g.stp_rot, j_idx, tangent)
    return loss, g


def classification_loss(
    stps: StructureSet, apps: AppearanceSet, class_means: tuple[np.ndarray, np.ndarray]
) -> tuple[float, ParamGrads]:
    """Color-consistency plus confidence terms.

    The color term pairs the branch probability with the squared residual to
    the branch mean color (so a primitive whose appearance matches the branch
    mean is pushed toward the branch label); the confidence term penalizes
    probabilities near one half.
    """
    c_branch, c_leaf = (np.asarray(m, dtype=float) for m in class_means)
    g = ParamGrads.zeros(len(stps), len(apps), apps.feature_dim)
    probs = sigmoid(stps.logits)
    s_count = len(stps)

    l_conf = float(np.mean(probs * (1.0 - probs)))
    g.stp_logit += (1.0 - 2.0 * probs) * probs * (1.0 - probs) / s_count

    l_col = 0.0
    n = len(apps)
    if n:
        idx = apps.parents
        p = probs[idx]
        res_b = apps.colors - c_branch
        res_l = apps.colors - c_leaf
        db = np.sum(res_b**2, axis=1)
        dl = np.sum(res_l**2, axis=1)
        l_col = float(np.mean(p * db + (1.0 - p) * dl))
        g.app_color = (2.0 * p[:, None] * res_b + 2.0 * (1.0 - p)[:, None] * res_l) / n
        np.add.at(g.stp_logit, idx, (db - dl) * p * (1.0 - p) / n)
    return l_col + l_conf, g


def _pooled_features(stps: StructureSet, apps: AppearanceSet):
    s_count = len(stps)
    counts = np.bincount(apps.parents, minlength=s_count).astype(float)
    fsum = np.zeros((s_count, apps.feature_dim))
    np.add.at(fsum, apps.parents, apps.features)
    has = counts > 0
    f_st = np.zeros_like(fsum)
    f_st[has] = fsum[has] / counts[has, None]
    return f_st, counts, has


def semantic_likelihood(
    stps: StructureSet,
    apps: AppearanceSet,
    ref: SemanticReference,
    tau: float,
) -> np.ndarray:
    """Per-primitive (pi_branch, pi_leaf) from the cosine-softmax of the
    pooled appearance features against the class references. Primitives whose
    pooled feature has zero norm get the uniform (0.5, 0.5) with a warning."""
    f_st, counts, has = _pooled_features(stps, apps)
    norms = np.linalg.norm(f_st, axis=1)
    valid = has & (norms > 1e-12)
    if np.any(has & ~valid):
        warnings.warn("zero-norm pooled feature; defaulting to uniform likelihood")
    out = np.full((len(stps), 2), 0.5)
    if np.any(valid):
        u = f_st[valid]
        nz = norms[valid, None]
        cos = np.stack(
            [(u @ ref.f_branch), (u @ ref.f_leaf)], axis=1
        ) / nz
        z = cos / tau
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        out[valid] = e / e.sum(axis=1, keepdims=True)
    return out


def semantic_loss(
    stps: StructureSet,
    apps: AppearanceSet,
    ref: SemanticReference,
    tau: float,
) -> tuple[float, ParamGrads]:
    """Cross-entropy between the branch probability and the semantic
    likelihood, averaged over structure primitives."""
    if apps.feature_dim != ref.dim:
        raise ValueError(
            f"feature dimension mismatch: appearance {apps.feature_dim} vs reference {ref.dim}"
        )
    g = ParamGrads.zeros(len(stps), len(apps), apps.feature_dim)
    s_count = len(stps)
    f_st, counts, has = _pooled_features(stps, apps)
    norms = np.linalg.norm(f_st, axis=1)
    valid = has & (norms > 1e-12)
    pi = semantic_likelihood(stps, apps, ref, tau)
    pi_c = np.clip(pi, PI_CLAMP, 1.0 - PI_CLAMP)
    probs = sigmoid(stps.logits)
    y = np.stack([probs, 1.0 - probs], axis=1)

    terms = -(y[:, 0] * np.log(pi_c[:, 0]) + y[:, 1] * np.log(pi_c[:, 1]))
    loss = float(np.mean(terms))

    g.stp_logit += (
        -(np.log(pi_c[:, 0]) - np.log(pi_c[:, 1])) * probs * (1.0 - probs) / s_count
    )

    if np.any(valid):
        u = f_st[valid]
        nz = norms[valid]
        refs = np.stack([ref.f_branch, ref.f_leaf])      # (2, D)
        cos = (u @ refs.T) / nz[:, None]                  # (V, 2)
        coeff = (pi[valid] - y[valid]) / tau              # (V, 2)
        # d cos_c / d u = g_c / |u| - cos_c * u / |u|^2
        du = (
            coeff @ refs / nz[:, None]
            - np.sum(coeff * cos, axis=1)[:, None] * u / (nz**2)[:, None]
        ) / s_count
        du_full = np.zeros((s_count, apps.feature_dim))
        du_full[valid] = du
        g.app_feature = du_full[apps.parents] / counts[apps.parents, None]
    return loss, g


def data_fit_loss(apps: AppearanceSet, cloud: PlantCloud) -> tuple[float, ParamGrads]:
    """Symmetric nearest-neighbor data term tying appearance primitives to
    the observed cloud: mean geometric distance in both directions, plus
    squared color (and feature, when present) residuals on matched pairs."""
    if len(apps) == 0 or len(cloud) == 0:
        raise ValueError("data fit requires non-empty appearance set and cloud")
    g = ParamGrads.zeros(0, len(apps), apps.feature_dim)
    n_cloud = len(cloud)
    n_apps = len(apps)
    use_features = cloud.features is not None and apps.feature_dim > 0
    if cloud.features is not None and cloud.features.shape[1] != apps.feature_dim:
        raise ValueError("feature dimension mismatch between cloud and appearance set")

    d_f, idx_f = cKDTree(apps.centers).query(cloud.points, k=1)
    d_b, idx_b = cKDTree(cloud.points).query(apps.centers, k=1)

    res_col_f = apps.colors[idx_f] - cloud.colors           # (N, 3)
    res_col_b = apps.colors - cloud.colors[idx_b]           # (A, 3)
    forward = d_f + np.sum(res_col_f**2, axis=1)
    backward = d_b + np.sum(res_col_b**2, axis=1)
    if use_features:
        res_ft_f = apps.features[idx_f] - cloud.features
        res_ft_b = apps.features - cloud.features[idx_b]
        forward = forward + np.sum(res_ft_f**2, axis=1)
        backward = backward + np.sum(res_ft_b**2, axis=1)
    loss = 0.5 * (float(np.mean(forward)) + float(np.mean(backward)))

    ok_b = d_b > 1e-12
    g.app_center[ok_b] = (
        (apps.centers[ok_b] - cloud.points[idx_b[ok_b]]) / d_b[ok_b, None] / (2.0 * n_apps)
    )
    ok_f = d_f > 1e-12
    unit_f = np.zeros((n_cloud, 3))
    unit_f[ok_f] = (apps.centers[idx_f[ok_f]] - cloud.points[ok_f]) / d_f[ok_f, None]
    np.add.at(g.app_center, idx_f, unit_f / (2.0 * n_cloud))

    g.app_color += 2.0 * res_col_b / (2.0 * n_apps)
    np.add.at(g.app_color, idx_f, 2.0 * res_col_f / (2.0 * n_cloud))
    if use_features:
        g.app_feature += 2.0 * res_ft_b / (2.0 * n_apps)
        np.add.at(g.app_feature, idx_f, 2.0 * res_ft_f / (2.0 * n_cloud))
    return loss, g


def total_loss(scene: Scene, weights: LossWeights, active: Optional[dict] = None) -> LossReport:
    """Weighted sum of the enabled terms with accumulated gradients.

    `active` overrides the per-term effective weights (used by the staged
    optimizer); it maps term name -> weight, with missing terms treated as 0.
    The graph weight covers both the connectivity and Laplacian terms.
    """
    from .structgraph import graph_loss, laplacian_loss

    eff = weights.effective() if active is None else {t: active.get(t, 0.0) for t in TERMS}
    grads = ParamGrads.zeros(len(scene.stps), len(scene.apps), scene.apps.feature_dim)
    values: dict[str, float] = {}
    total = 0.0

    def accumulate(name: str, value: float, g: ParamGrads, w: float):
        nonlocal total
        values[name] = value
        grads.add_scaled(g, w)
        total += w * value

    if eff["fit"] > 0:
        v, g = data_fit_loss(scene.apps, scene.cloud)
        accumulate("fit", v, g, eff["fit"])
    if eff["bind"] > 0:
        v, g = binding_loss(scene.apps, scene.stps)
        accumulate("bind", v, g, eff["bind"])
    if eff["sem"] > 0:
        if scene.semantic_ref is None:
            raise ValueError("semantic term enabled but the scene has no reference features")
        v, g = semantic_loss(scene.stps, scene.apps, scene.semantic_ref, weights.tau)
        accumulate("sem", v, g, eff["sem"])
    if eff["op"] > 0 and len(scene.stps) >= 2:
        v, g = overlap_loss(scene.stps)
        accumulate("op", v, g, eff["op"])
    if eff["cls"] > 0:
        if scene.color_means is None:
            raise ValueError("classification term enabled but the scene has no color means")
        v, g = classification_loss(scene.stps, scene.apps, scene.color_means)
        accumulate("cls", v, g, eff["cls"])
    if eff["graph"] > 0 and scene.graph is not None:
        v, g = graph_loss(scene.graph, scene.stps)
        accumulate("graph", v, g, eff["graph"])
        v, g = laplacian_loss(scene.graph, scene.stps)
        accumulate("lap", v, g, eff["graph"])

    return LossReport(values=values, total=total, grads=grads)


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

def central_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


_PARAM_KINDS = (
    "stp_center", "stp_scale", "stp_rot", "stp_logit",
    "app_center", "app_color", "app_feature",
)


def _perturbed_total(scene: Scene, weights: LossWeights, active, kind: str,
                     i: int, c: int, delta: float) -> float:
    s2 = scene.copy()
    if kind == "stp_center":
        s2.stps.centers[i, c] += delta
    elif kind == "stp_scale":
        s2.stps.scales[i, c] += delta
    elif kind == "stp_rot":
        w = np.zeros(3)
        w[c] = delta
        s2.stps.rotations[i] = s2.stps.rotations[i] @ rotation_from_axis_angle(w)
    elif kind == "stp_logit":
        s2.stps.logits[i] += delta
    elif kind == "app_center":
        s2.apps.centers[i, c] += delta
    elif kind == "app_color":
        s2.apps.colors[i, c] += delta
    elif kind == "app_feature":
        s2.apps.features[i, c] += delta
    else:  # pragma: no cover
        raise ValueError(kind)
    return total_loss(s2, weights, active).total


def finite_diff_check(
    scene: Scene,
    weights: LossWeights,
    h: float = 1e-5,
    n_samples: int = 60,
    seed: int = 0,
    active: Optional[dict] = None,
    kink_tol: Optional[float] = None,
) -> float:
    """Compare analytic gradients against central finite differences on a
    random parameter subsample; returns the maximum relative error.

    Parameters adjacent to binding kinks (the distance clamp, the disk plane
    at interior points, the ellipse boundary) and to degenerate graph edges
    are excluded, since only subgradients exist there.
    """
    if kink_tol is None:
        kink_tol = 50.0 * h
    eff = weights.effective() if active is None else active
    report = total_loss(scene, weights, active)

    excluded_apps: set[int] = set()
    excluded_stps: set[int] = set()
    if eff.get("bind", 0.0) > 0 and len(scene.apps):
        margins = binding_kink_margins(scene.apps, scene.stps)
        bad = np.nonzero(margins < kink_tol)[0]
        excluded_apps.update(int(i) for i in bad)
        excluded_stps.update(int(scene.apps.parents[i]) for i in bad)
    if eff.get("graph", 0.0) > 0 and scene.graph is not None:
        from .structgraph import endpoint_positions

        pos = endpoint_positions(scene.graph, scene.stps)
        for i, j in scene.graph.cross_edges:
            if np.linalg.norm(pos[i] - pos[j]) < kink_tol:
                excluded_stps.add(int(scene.graph.node_stp[i]))
                excluded_stps.add(int(scene.graph.node_stp[j]))

    candidates: list[tuple[str, int, int]] = []
    sizes = {
        "stp_center": (len(scene.stps), 3),
        "stp_scale": (len(scene.stps), 3),
        "stp_rot": (len(scene.stps), 3),
        "stp_logit": (len(scene.stps), 1),
        "app_center": (len(scene.apps), 3),
        "app_color": (len(scene.apps), 3),
        "app_feature": (len(scene.apps), scene.apps.feature_dim),
    }
    for kind in _PARAM_KINDS:
        rows, cols = sizes[kind]
        for i in range(rows):
            if kind.startswith("stp") and i in excluded_stps:
                continue
            if kind.startswith("app") and i in excluded_apps:
                continue
            for c in range(cols):
                candidates.append((kind, i, c))
    if not candidates:
        return 0.0
    rng = np.random.default_rng(seed)
    if len(candidates) > n_samples:
        pick = rng.choice(len(candidates), size=n_samples, replace=False)
        candidates = [candidates[int(i)] for i in pick]

    max_err = 0.0
    for kind, i, c in candidates:
        fp = _perturbed_total(scene, weights, active, kind, i, c, +h)
        fm = _perturbed_total(scene, weights, active, kind, i, c, -h)
        fd = (fp - fm) / (2.0 * h)
        arr = getattr(report.grads, kind)
        analytic = float(arr[i] if arr.ndim == 1 else arr[i, c])
        err = abs(analytic - fd) / max(abs(analytic), abs(fd), REL_ERR_FLOOR)
        max_err = max(max_err, err)
    return max_err
