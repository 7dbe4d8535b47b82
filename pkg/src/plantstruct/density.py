"""Adaptive density control: splitting over-stressed structure primitives,
pruning degenerate ones, merging fragmented branches, the radius-growth
filter on the spanning tree, and leaf instance clustering."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .losses import _cylinder_terms, _disk_terms
from .primitives import perpendicular_frame, sigmoid
from .scene import AppearanceSet, Scene, StructureSet
from .structgraph import StructureGraph


@dataclass
class DensityConfig:
    """Density-control knobs. Radius-like fields set to None are resolved at
    call time from the current branch radii (see each operation)."""

    max_stps: int = 256
    densify_grad_threshold: float = 1e-3
    densify_top_fraction: float = 0.05
    prune_scale_min: float = 1e-3
    prune_opacity_min: float = 0.05
    merge_radius: Optional[float] = None          # default: 0.5x mean branch radius
    merge_axis_cos_min: float = 0.95
    radius_growth_max: float = 1.5
    leaf_merge_radius: Optional[float] = None     # default: mean leaf major radius
    leaf_angle_max: float = math.radians(30.0)
    densify_interval: int = 100

    def __post_init__(self):
        if self.max_stps < 1:
            raise ValueError("max_stps must be >= 1")
        for name in ("densify_grad_threshold", "prune_scale_min", "prune_opacity_min"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.merge_axis_cos_min < 1:
            raise ValueError("merge_axis_cos_min must be in (0,1)")
        if self.radius_growth_max <= 1:
            raise ValueError("radius_growth_max must exceed 1")


def _remove_stps(stps: StructureSet, apps: AppearanceSet, drop: np.ndarray
                 ) -> tuple[StructureSet, AppearanceSet]:
    """Drop the flagged primitives, re-parenting their appearance primitives
    to the nearest surviving surface (classified form)."""
    drop = np.asarray(drop, dtype=bool)
    keep_idx = np.nonzero(~drop)[0]
    if len(keep_idx) == 0:
        raise ValueError("density control would remove every structure primitive")
    remap = -np.ones(len(stps), dtype=np.int64)
    remap[keep_idx] = np.arange(len(keep_idx))

    new_stps = StructureSet(
        centers=stps.centers[keep_idx],
        rotations=stps.rotations[keep_idx],
        scales=stps.scales[keep_idx],
        logits=stps.logits[keep_idx],
        active=stps.active[keep_idx],
    )
    orphaned = drop[apps.parents]
    parents = remap[apps.parents]
    if np.any(orphaned):
        q = apps.centers[orphaned]
        dists = surface_distances(q, new_stps)
        parents[orphaned] = np.argmin(dists, axis=1)
    new_apps = AppearanceSet(
        centers=apps.centers, rotations=apps.rotations, scales=apps.scales,
        colors=apps.colors, opacities=apps.opacities, features=apps.features,
        parents=parents,
    )
    return new_stps, new_apps


def surface_distances(points: np.ndarray, stps: StructureSet) -> np.ndarray:
    """(P, S) distances from points to each primitive's classified surface."""
    p_count, s_count = len(points), len(stps)
    out = np.empty((p_count, s_count))
    branch = stps.branch_mask
    for s in range(s_count):
        centers = np.broadcast_to(stps.centers[s], (p_count, 3))
        rots = np.broadcast_to(stps.rotations[s], (p_count, 3, 3))
        scales = np.broadcast_to(stps.scales[s], (p_count, 3))
        if branch[s]:
            d, *_ = _cylinder_terms(points, centers, rots, scales)
        else:
            d, *_ = _disk_terms(points, centers, rots, scales)
        out[:, s] = d
    return out


def densify_stps(
    stps: StructureSet,
    apps: AppearanceSet,
    grad_norms: np.ndarray,
    cfg: DensityConfig,
) -> tuple[StructureSet, AppearanceSet]:
    """Split primitives whose accumulated binding+semantic gradient magnitude
    is in the top fraction and above the absolute floor.

    A split halves the primitive along its major axis: children sit at
    mu +/- (s1/2) u with s1 halved and everything else copied; bound
    appearance primitives go to the nearer child. The total count never
    exceeds max_stps.
    """
    grad_norms = np.asarray(grad_norms, dtype=float)
    s_count = len(stps)
    if s_count >= cfg.max_stps:
        return stps, apps
    floor = cfg.densify_grad_threshold
    quantile = np.quantile(grad_norms, 1.0 - cfg.densify_top_fraction) if s_count > 1 else floor
    split_mask = grad_norms >= max(floor, quantile)
    budget = cfg.max_stps - s_count
    split_ids = np.nonzero(split_mask)[0]
    if len(split_ids) > budget:
        order = np.argsort(grad_norms[split_ids], kind="stable")[::-1]
        split_ids = np.sort(split_ids[order[:budget]])
    if len(split_ids) == 0:
        return stps, apps

    # The parent slot becomes the minus child; the plus child is appended.
    new_centers = [stps.centers.copy()]
    new_rotations = [stps.rotations.copy()]
    new_scales = [stps.scales.copy()]
    new_logits = [stps.logits.copy()]
    child_of = {}
    next_index = s_count
    for s in split_ids:
        u = stps.rotations[s][:, 0]
        off = 0.5 * stps.scales[s, 0] * u
        halved = stps.scales[s].copy()
        halved[0] = max(halved[0] / 2.0, halved[1])
        new_centers[0][s] = stps.centers[s] - off
        new_scales[0][s] = halved
        new_centers.append((stps.centers[s] + off)[None])
        new_rotations.append(stps.rotations[s][None])
        new_scales.append(halved[None])
        new_logits.append(np.array([stps.logits[s]]))
        child_of[int(s)] = next_index
        next_index += 1
    new_stps = StructureSet(
        centers=np.concatenate(new_centers),
        rotations=np.concatenate(new_rotations),
        scales=np.concatenate(new_scales),
        logits=np.concatenate(new_logits),
    )

    parents = apps.parents.copy()
    for s in split_ids:
        plus = child_of[int(s)]
        mask = apps.parents == s
        if not np.any(mask):
            continue
        d_minus = np.linalg.norm(apps.centers[mask] - new_stps.centers[s], axis=1)
        d_plus = np.linalg.norm(apps.centers[mask] - new_stps.centers[plus], axis=1)
        sub = parents[mask]
        sub[d_plus < d_minus] = plus
        parents[mask] = sub
    new_apps = AppearanceSet(
        centers=apps.centers, rotations=apps.rotations, scales=apps.scales,
        colors=apps.colors, opacities=apps.opacities, features=apps.features,
        parents=parents,
    )
    return new_stps, new_apps


def prune_stps(stps: StructureSet, apps: AppearanceSet, cfg: DensityConfig
               ) -> tuple[StructureSet, AppearanceSet]:
    """Remove primitives with a degenerate dominant scale or low mean bound
    opacity (structure primitives are invisible, so opacity is read from the
    bound appearance primitives)."""
    mean_opacity = np.ones(len(stps))
    counts = np.bincount(apps.parents, minlength=len(stps)).astype(float)
    sums = np.zeros(len(stps))
    np.add.at(sums, apps.parents, apps.opacities)
    has = counts > 0
    mean_opacity[has] = sums[has] / counts[has]
    drop = (stps.scales[:, 0] < cfg.prune_scale_min) | (mean_opacity < cfg.prune_opacity_min)
    if not np.any(drop):
        return stps, apps
    return _remove_stps(stps, apps, drop)


def _transitive_groups(n: int, related) -> list[list[int]]:
    """Connected components of a symmetric pairwise relation (callable i,j)."""
    labels = -np.ones(n, dtype=int)
    groups: list[list[int]] = []
    for i in range(n):
        if labels[i] >= 0:
            continue
        stack = [i]
        labels[i] = len(groups)
        members = [i]
        while stack:
            a = stack.pop()
            for b in range(n):
                if labels[b] < 0 and related(a, b):
                    labels[b] = labels[i]
                    members.append(b)
                    stack.append(b)
        groups.append(sorted(members))
    return groups


def merge_branch_stps(stps: StructureSet, apps: AppearanceSet, cfg: DensityConfig
                      ) -> tuple[StructureSet, AppearanceSet]:
    """Fuse fragmented collinear branch primitives.

    Branch primitives whose endpoints come within merge_radius and whose axes
    agree (|cos| >= merge_axis_cos_min) merge transitively. The merged
    primitive takes the endpoint centroid as center, the endpoints' first
    principal component as axis, half the projection span as dominant scale,
    and the mean radius as the two minor scales. Runs to a fixed point so a
    second call is a no-op.
    """
    while True:
        stps, apps, changed = _merge_pass(stps, apps, cfg)
        if not changed:
            return stps, apps


def _merge_pass(stps: StructureSet, apps: AppearanceSet, cfg: DensityConfig):
    branch_ids = np.nonzero(stps.branch_mask)[0]
    if len(branch_ids) < 2:
        return stps, apps, False
    u = stps.rotations[branch_ids][:, :, 0]
    s1 = stps.scales[branch_ids, 0]
    radii = stps.scales[branch_ids, 1]
    centers = stps.centers[branch_ids]
    tops = centers + s1[:, None] * u
    bots = centers - s1[:, None] * u
    merge_radius = cfg.merge_radius if cfg.merge_radius is not None else 0.5 * float(np.mean(radii))

    def related(a: int, b: int) -> bool:
        if a == b:
            return False
        if abs(float(u[a] @ u[b])) < cfg.merge_axis_cos_min:
            return False
        ends_a = (tops[a], bots[a])
        ends_b = (tops[b], bots[b])
        gap = min(np.linalg.norm(pa - pb) for pa in ends_a for pb in ends_b)
        return gap <= merge_radius

    groups = [grp for grp in _transitive_groups(len(branch_ids), related) if len(grp) > 1]
    if not groups:
        return stps, apps, False

    drop = np.zeros(len(stps), dtype=bool)
    new_rows = []
    reparent: dict[int, int] = {}
    next_index = len(stps)
    for grp in groups:
        members = branch_ids[grp]
        endpoints = np.concatenate([tops[grp], bots[grp]])
        centroid = endpoints.mean(axis=0)
        centered = endpoints - centroid
        cov = centered.T @ centered / len(endpoints)
        evals, evecs = np.linalg.eigh(cov)
        axis = evecs[:, np.argmax(evals)]
        lead = int(np.argmax(np.abs(axis)))
        if axis[lead] < 0:
            axis = -axis
        proj = centered @ axis
        half_span = 0.5 * float(proj.max() - proj.min())
        radius = float(np.mean(radii[grp]))
        e1, e2 = perpendicular_frame(axis)
        rot = np.stack([axis, e1, e2], axis=1)
        new_scales = np.array([max(half_span, radius), radius, radius])
        new_rows.append((
            centroid, rot, new_scales, float(np.mean(stps.logits[members]))
        ))
        for m in members:
            drop[m] = True
            reparent[int(m)] = next_index
        next_index += 1

    merged = StructureSet(
        centers=np.concatenate([stps.centers, np.stack([r[0] for r in new_rows])]),
        rotations=np.concatenate([stps.rotations, np.stack([r[1] for r in new_rows])]),
        scales=np.concatenate([stps.scales, np.stack([r[2] for r in new_rows])]),
        logits=np.concatenate([stps.logits, np.array([r[3] for r in new_rows])]),
    )
    parents = apps.parents.copy()
    for old, new in reparent.items():
        parents[apps.parents == old] = new
    apps2 = AppearanceSet(
        centers=apps.centers, rotations=apps.rotations, scales=apps.scales,
        colors=apps.colors, opacities=apps.opacities, features=apps.features,
        parents=parents,
    )
    keep = np.concatenate([~drop, np.ones(len(new_rows), dtype=bool)])
    stps2, apps2 = _remove_stps(merged, apps2, ~keep)
    return stps2, apps2, True


def radius_filter(graph: StructureGraph, stps: StructureSet, apps: AppearanceSet,
                  cfg: DensityConfig) -> tuple[StructureSet, AppearanceSet]:
    """Root the spanning tree at the lowest endpoint and prune child
    primitives whose radius exceeds the parent radius by more than
    radius_growth_max; their appearance primitives are re-parented."""
    if graph.n_nodes == 0:
        return stps, apps
    adj: dict[int, list[int]] = {i: [] for i in range(graph.n_nodes)}
    for i, j in graph.all_edges():
        adj[int(i)].append(int(j))
        adj[int(j)].append(int(i))
    root = int(np.argmin(graph.node_positions[:, 2]))
    radius_of = {int(s): float(stps.scales[s, 1]) for s in set(graph.node_stp.tolist())}

    drop = np.zeros(len(stps), dtype=bool)
    seen = {root}
    frontier = [(root, None)]
    while frontier:
        node, parent_stp = frontier.pop()
        s = int(graph.node_stp[node])
        if parent_stp is not None and s != parent_stp:
            if radius_of[s] > cfg.radius_growth_max * radius_of[parent_stp]:
                drop[s] = True
        for nxt in sorted(adj[node]):
            if nxt not in seen:
                seen.add(nxt)
                frontier.append((nxt, s))
    if not np.any(drop):
        return stps, apps
    return _remove_stps(stps, apps, drop)


def cluster_leaf_instances(stps: StructureSet, cfg: DensityConfig) -> np.ndarray:
    """Group leaf primitives into instances by single-linkage over center
    proximity plus normal and major-axis alignment (axes unsigned).

    Returns an (S,) int array: instance id per structure primitive, -1 for
    branch primitives. Instance ids are numbered by first member index.
    """
    labels = -np.ones(len(stps), dtype=np.int64)
    leaf_ids = np.nonzero(~stps.branch_mask)[0]
    if len(leaf_ids) == 0:
        return labels
    centers = stps.centers[leaf_ids]
    normals = stps.rotations[leaf_ids][:, :, 2]
    majors = stps.rotations[leaf_ids][:, :, 0]
    major_radius = 2.0 * stps.scales[leaf_ids, 0]
    radius = cfg.leaf_merge_radius if cfg.leaf_merge_radius is not None else float(np.mean(major_radius))
    cos_min = math.cos(cfg.leaf_angle_max)

    def related(a: int, b: int) -> bool:
        if a == b:
            return False
        if np.linalg.norm(centers[a] - centers[b]) > radius:
            return False
        if abs(float(normals[a] @ normals[b])) < cos_min:
            return False
        return abs(float(majors[a] @ majors[b])) >= cos_min

    groups = _transitive_groups(len(leaf_ids), related)
    for label, grp in enumerate(groups):
        labels[leaf_ids[np.array(grp)]] = label
    return labels
