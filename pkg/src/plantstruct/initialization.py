"""Initialization: cluster the cloud, fit one structure primitive per cluster,
and sample appearance primitives on the explicit surfaces."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .primitives import classify, logit, to_cylinder, to_disk, PrimitiveKind
from .scene import AppearanceSet, PlantCloud, Scene, StructureSet, compute_class_color_means

PCA_EPS = 1e-12
MIN_SCALE = 1e-6


@dataclass
class InitConfig:
    """Knobs for the cluster-and-fit initialization.

    points_per_cluster sets the cluster count k = max(1, N // points_per_cluster).
    alpha_st scales the PCA standard deviations into primitive scales.
    Branch-like clusters need elongation above elongation_min and flatness
    below flatness_max; they start at branch probability 0.6, others at 0.4.
    """

    points_per_cluster: int = 100
    alpha_st: float = 1.5
    apps_per_stp: int = 50
    elongation_min: float = 4.0
    flatness_max: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.points_per_cluster < 1 or self.apps_per_stp < 1:
            raise ValueError("counts must be >= 1")
        if self.alpha_st <= 0 or self.elongation_min <= 0 or self.flatness_max <= 0:
            raise ValueError("thresholds must be positive")


def kmeans(points: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded to the point farthest from its assigned
    center. Stops when assignments are stable or after 100 iterations.

    Returns:
        (N,) int array of cluster indices in [0, k).
    """
    points = np.asarray(points, dtype=float)
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)

    centers = np.empty((k, 3))
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j] = points[rng.integers(n)]
            continue
        centers[j] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((points - centers[j]) ** 2, axis=1))

    assign = np.full(n, -1, dtype=int)
    for _ in range(100):
        dists = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
        new_assign = np.argmin(dists, axis=1)
        # Re-seed empties to the globally farthest point from its center.
        for j in range(k):
            if not np.any(new_assign == j):
                far = int(np.argmax(dists[np.arange(n), new_assign]))
                centers[j] = points[far]
                new_assign[far] = j
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            centers[j] = points[assign == j].mean(axis=0)
    return assign


def pca_cluster(points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean and eigen-decomposition of one cluster's covariance.

    The covariance is regularized by PCA_EPS * I so degenerate clusters stay
    solvable. Eigenvalues come back descending and non-negative; eigenvectors
    are orthonormal with deterministic signs and a right-handed v3 = v1 x v2.

    Returns:
        (mean (3,), eigenvalues (3,), eigenvectors (3,3) with columns v1,v2,v3)
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) < 1:
        raise ValueError("cluster must contain at least one point")
    mean = points.mean(axis=0)
    centered = points - mean
    cov = centered.T @ centered / len(points) + PCA_EPS * np.eye(3)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    for j in range(2):  # deterministic sign: dominant component positive
        col = evecs[:, j]
        lead = int(np.argmax(np.abs(col)))
        if col[lead] < 0:
            evecs[:, j] = -col
    evecs[:, 2] = np.cross(evecs[:, 0], evecs[:, 1])
    return mean, evals, evecs


def init_stps(cloud: PlantCloud, config: InitConfig) -> StructureSet:
    """Build the initial structure primitives from the cloud.

    One primitive per k-means cluster (k = max(1, N // points_per_cluster)):
    the cluster PCA gives the rotation and, scaled by alpha_st, the scales.
    Elongated thin clusters start as branch-like (probability 0.6), the rest
    as leaf-like (0.4).
    """
    n = len(cloud)
    k = max(1, n // config.points_per_cluster)
    assign = kmeans(cloud.points, k, config.seed)

    centers = np.empty((k, 3))
    rotations = np.empty((k, 3, 3))
    scales = np.empty((k, 3))
    logits = np.empty(k)
    for j in range(k):
        mean, evals, evecs = pca_cluster(cloud.points[assign == j])
        sdev = np.sqrt(evals)
        centers[j] = mean
        rotations[j] = evecs
        scales[j] = np.maximum(config.alpha_st * sdev, MIN_SCALE)
        elongation = sdev[0] / max(sdev[1], 1e-30)
        flatness = sdev[2] / max(sdev[0], 1e-30)
        branch_like = elongation > config.elongation_min and flatness < config.flatness_max
        logits[j] = logit(0.6) if branch_like else logit(0.4)
    return StructureSet(centers=centers, rotations=rotations, scales=scales, logits=logits)


def _branch_surface_samples(stp, n: int, rng: np.random.Generator):
    cyl = to_cylinder(stp)
    e1, e2 = stp.rotation[:, 1], stp.rotation[:, 2]
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    h = rng.uniform(-cyl.length / 2.0, cyl.length / 2.0, size=n)
    radial = np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2
    pts = cyl.center + h[:, None] * cyl.axis + cyl.radius * radial
    normals = radial
    area = 2.0 * np.pi * cyl.radius * cyl.length
    tangents = np.broadcast_to(cyl.axis, (n, 3))
    return pts, normals, tangents, area


def _leaf_surface_samples(stp, n: int, rng: np.random.Generator):
    disk = to_disk(stp)
    r = np.sqrt(rng.uniform(0.0, 1.0, size=n))
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    x = disk.major * r * np.cos(phi)
    y = disk.minor * r * np.sin(phi)
    pts = disk.center + x[:, None] * disk.e1 + y[:, None] * disk.e2
    normals = np.broadcast_to(disk.normal, (n, 3))
    area = np.pi * disk.major * disk.minor
    tangents = np.broadcast_to(disk.e1, (n, 3))
    return pts, normals, tangents, area


def sample_apps(
    stp,
    stp_index: int,
    n: int,
    cloud: PlantCloud,
    rng: np.random.Generator,
) -> AppearanceSet:
    """Sample n appearance primitives area-uniformly on the explicit surface.

    Each sample's rotation aligns its local z-axis with the surface normal;
    its scales are (s, s, 0) with s = sqrt(area / n) / 2. Color and feature
    are copied from the nearest cloud point (zero feature if the cloud has
    none); parent is the structure primitive's index.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not stp.active:
        raise ValueError("cannot sample on an inactive structure primitive")
    if classify(stp) is PrimitiveKind.BRANCH:
        pts, normals, tangents, area = _branch_surface_samples(stp, n, rng)
    else:
        pts, normals, tangents, area = _leaf_surface_samples(stp, n, rng)

    s = np.sqrt(area / n) / 2.0
    scales = np.tile([s, s, 0.0], (n, 1))
    rots = np.empty((n, 3, 3))
    rots[:, :, 2] = normals
    rots[:, :, 0] = tangents
    rots[:, :, 1] = np.cross(normals, tangents)

    tree = cKDTree(cloud.points)
    _, nearest = tree.query(pts, k=1)
    colors = cloud.colors[nearest]
    if cloud.features is not None:
        feats = cloud.features[nearest]
    else:
        feats = np.zeros((n, 0))
    return AppearanceSet(
        centers=pts,
        rotations=rots,
        scales=scales,
        colors=colors,
        opacities=np.ones(n),
        features=feats,
        parents=np.full(n, stp_index, dtype=np.int64),
    )


def _concat_apps(parts: list[AppearanceSet]) -> AppearanceSet:
    return AppearanceSet(
        centers=np.concatenate([p.centers for p in parts]),
        rotations=np.concatenate([p.rotations for p in parts]),
        scales=np.concatenate([p.scales for p in parts]),
        colors=np.concatenate([p.colors for p in parts]),
        opacities=np.concatenate([p.opacities for p in parts]),
        features=np.concatenate([p.features for p in parts]),
        parents=np.concatenate([p.parents for p in parts]),
    )


def init_scene(cloud: PlantCloud, config: InitConfig, semantic_ref=None) -> Scene:
    """Full initialization: structure primitives, surface-sampled appearance
    primitives, and the initial class color means."""
    stps = init_stps(cloud, config)
    rng = np.random.default_rng(config.seed + 1)
    parts = [
        sample_apps(stps.primitive(i), i, config.apps_per_stp, cloud, rng)
        for i in range(len(stps))
    ]
    apps = _concat_apps(parts)
    scene = Scene(stps=stps, apps=apps, cloud=cloud, semantic_ref=semantic_ref)
    branch_mean, leaf_mean = compute_class_color_means(stps, apps)
    fallback = cloud.colors.mean(axis=0)
    scene.color_means = (
        branch_mean if branch_mean is not None else fallback,
        leaf_mean if leaf_mean is not None else fallback,
    )
    return scene
