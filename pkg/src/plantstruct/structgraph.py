"""Explicit branch graph: endpoint extraction, penalty-reweighted minimum
spanning tree over endpoint candidates, and the structure losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .losses import ParamGrads, _tangent_from_column_grads
from .primitives import PrimitiveKind, StructurePrimitive, classify
from .scene import AppearanceSet, StructureSet


class EmptyGraphError(ValueError):
    """Raised when no branch-classified structure primitives exist."""


@dataclass
class GraphConfig:
    """Graph construction knobs.

    rho_occ None means "2x the median branch radius", resolved at build time.
    rebuild_interval is how many optimizer steps a topology stays frozen.
    """

    knn_k: int = 6
    gamma_tan: float = 2.0
    gamma_occ: float = 4.0
    rho_occ: Optional[float] = None
    theta: int = 3
    k_samples: int = 8
    rebuild_interval: int = 50

    def __post_init__(self):
        if self.knn_k < 1 or self.k_samples < 1:
            raise ValueError("knn_k and k_samples must be >= 1")
        if self.gamma_tan < 0 or self.gamma_occ < 0:
            raise ValueError("penalty gains must be non-negative")
        if self.rho_occ is not None and self.rho_occ <= 0:
            raise ValueError("rho_occ must be positive")


@dataclass
class StructureGraph:
    """Endpoint graph: two tagged nodes per branch primitive, one inner edge
    each, and the cross edges chosen by the reweighted spanning tree."""

    node_positions: np.ndarray   # (V, 3) snapshot at build time
    node_stp: np.ndarray         # (V,) owning structure-primitive index
    node_end: np.ndarray         # (V,) +1 for top, -1 for bottom
    inner_edges: np.ndarray      # (E_in, 2) node index pairs
    cross_edges: np.ndarray      # (E_cross, 2)
    inner_radii: np.ndarray      # (E_in,)
    cross_radii: np.ndarray      # (E_cross,)

    def __post_init__(self):
        self.node_positions = np.asarray(self.node_positions, dtype=float).reshape(-1, 3)
        self.node_stp = np.asarray(self.node_stp, dtype=np.int64).ravel()
        self.node_end = np.asarray(self.node_end, dtype=np.int64).ravel()
        self.inner_edges = np.asarray(self.inner_edges, dtype=np.int64).reshape(-1, 2)
        self.cross_edges = np.asarray(self.cross_edges, dtype=np.int64).reshape(-1, 2)
        self.inner_radii = np.asarray(self.inner_radii, dtype=float).ravel()
        self.cross_radii = np.asarray(self.cross_radii, dtype=float).ravel()

    @property
    def n_nodes(self) -> int:
        return len(self.node_positions)

    def all_edges(self) -> np.ndarray:
        if len(self.inner_edges) == 0 and len(self.cross_edges) == 0:
            return np.zeros((0, 2), dtype=np.int64)
        return np.concatenate([self.inner_edges, self.cross_edges])

    def refresh_positions(self, stps: StructureSet) -> None:
        self.node_positions = endpoint_positions(self, stps)


def stp_endpoints(stp: StructurePrimitive) -> tuple[np.ndarray, np.ndarray]:
    """Top and bottom endpoints mu +/- s1 * axis of a branch primitive."""
    if classify(stp) is not PrimitiveKind.BRANCH:
        raise ValueError("endpoints are defined only for branch primitives")
    u = stp.rotation[:, 0]
    off = float(stp.scales[0]) * u
    return stp.center + off, stp.center - off


def endpoint_positions(graph: StructureGraph, stps: StructureSet) -> np.ndarray:
    """Node positions recomputed from the current primitive parameters."""
    idx = graph.node_stp
    u = stps.rotations[idx][:, :, 0]
    s1 = stps.scales[idx, 0]
    return stps.centers[idx] + graph.node_end[:, None] * s1[:, None] * u


def axis_penalty(p_i, p_j, u_i, u_j, gamma_tan: float) -> float:
    """Multiplier >= 1 penalizing edges misaligned with the incident axes."""
    p_i = np.asarray(p_i, float)
    p_j = np.asarray(p_j, float)
    d = p_i - p_j
    norm = np.linalg.norm(d)
    if norm < 1e-12:
        return 1.0 + gamma_tan  # coincident endpoints: worst case
    t = d / norm
    c = 0.5 * (abs(float(t @ np.asarray(u_i, float))) + abs(float(t @ np.asarray(u_j, float))))
    return 1.0 + gamma_tan * (1.0 - c)


def void_penalty(p_i, p_j, app_centers, rho_occ: float, theta: int, k: int,
                 gamma_occ: float) -> float:
    """Multiplier >= 1 penalizing edges crossing space unsupported by
    appearance primitives: k interior samples, each checked for at least
    theta neighbors within rho_occ."""
    p_i = np.asarray(p_i, float)
    p_j = np.asarray(p_j, float)
    ts = (np.arange(k) + 0.5) / k
    samples = p_i[None, :] + ts[:, None] * (p_j - p_i)[None, :]
    tree = cKDTree(np.asarray(app_centers, float).reshape(-1, 3))
    counts = np.array([len(ix) for ix in tree.query_ball_point(samples, rho_occ)])
    frac = float(np.mean(counts < theta))
    return 1.0 + gamma_occ * frac


def edge_cost(d_ij: float, pen_axis: float, pen_occ: float) -> float:
    """Structure-aware edge weight: Euclidean length times both penalties."""
    if d_ij < 0:
        raise ValueError("edge length must be non-negative")
    return d_ij * pen_axis * pen_occ


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[rb] = ra
        return True


def candidate_edges(endpoints: np.ndarray, owner: np.ndarray, knn_k: int) -> list[tuple[int, int]]:
    """KNN candidate pairs over endpoints, excluding same-primitive pairs."""
    n = len(endpoints)
    k = min(knn_k + 1, n)
    _, nbrs = cKDTree(endpoints).query(endpoints, k=k)
    nbrs = np.atleast_2d(nbrs)
    pairs = set()
    for i in range(n):
        for j in nbrs[i][1:] if k > 1 else []:
            j = int(j)
            if owner[i] == owner[j]:
                continue
            pairs.add((min(i, j), max(i, j)))
    return sorted(pairs)


def build_graph(stps: StructureSet, apps: AppearanceSet, cfg: GraphConfig) -> StructureGraph:
    """Build the branch endpoint graph.

    The two endpoints of each branch primitive are pre-merged (its inner edge
    is structural, not a spanning-tree candidate); Kruskal then runs over the
    penalty-reweighted KNN candidates. A disconnected candidate graph yields
    a spanning forest.
    """
    branch_idx = np.nonzero(stps.branch_mask & stps.active)[0]
    if len(branch_idx) == 0:
        raise EmptyGraphError("no branch structure primitives to build a graph from")

    u = stps.rotations[branch_idx][:, :, 0]
    s1 = stps.scales[branch_idx, 0]
    radii = stps.scales[branch_idx, 1]
    centers = stps.centers[branch_idx]
    n_b = len(branch_idx)

    positions = np.empty((2 * n_b, 3))
    node_stp = np.empty(2 * n_b, dtype=np.int64)
    node_end = np.empty(2 * n_b, dtype=np.int64)
    positions[0::2] = centers - s1[:, None] * u
    positions[1::2] = centers + s1[:, None] * u
    node_stp[0::2] = branch_idx
    node_stp[1::2] = branch_idx
    node_end[0::2] = -1
    node_end[1::2] = +1

    owner = np.repeat(np.arange(n_b), 2)
    inner_edges = np.stack([np.arange(0, 2 * n_b, 2), np.arange(1, 2 * n_b, 2)], axis=1)

    rho = cfg.rho_occ if cfg.rho_occ is not None else 2.0 * float(np.median(radii))
    rho = max(rho, 1e-12)

    cands = candidate_edges(positions, owner, cfg.knn_k)
    app_tree = cKDTree(apps.centers) if len(apps) else None
    weighted = []
    for i, j in cands:
        d = float(np.linalg.norm(positions[i] - positions[j]))
        pa = axis_penalty(positions[i], positions[j], u[owner[i]], u[owner[j]], cfg.gamma_tan)
        if app_tree is not None:
            ts = (np.arange(cfg.k_samples) + 0.5) / cfg.k_samples
            samples = positions[i][None, :] + ts[:, None] * (positions[j] - positions[i])[None, :]
            counts = np.array([len(ix) for ix in app_tree.query_ball_point(samples, rho)])
            po = 1.0 + cfg.gamma_occ * float(np.mean(counts < cfg.theta))
        else:
            po = 1.0 + cfg.gamma_occ
        weighted.append((edge_cost(d, pa, po), i, j))
    weighted.sort()

    uf = _UnionFind(2 * n_b)
    for i, j in inner_edges:
        uf.union(int(i), int(j))
    cross = []
    for _, i, j in weighted:
        if uf.union(i, j):
            cross.append((i, j))
    cross_edges = np.array(cross, dtype=np.int64).reshape(-1, 2)
    stp_radius = dict(zip(branch_idx.tolist(), radii.tolist()))
    cross_radii = np.array(
        [0.5 * (stp_radius[int(node_stp[i])] + stp_radius[int(node_stp[j])]) for i, j in cross_edges]
    )
    return StructureGraph(
        node_positions=positions,
        node_stp=node_stp,
        node_end=node_end,
        inner_edges=inner_edges,
        cross_edges=cross_edges,
        inner_radii=radii.copy(),
        cross_radii=cross_radii,
    )


def _scatter_endpoint_grads(g: ParamGrads, graph: StructureGraph, stps: StructureSet,
                            node_grads: np.ndarray) -> None:
    """Chain per-node position gradients to the owning primitives' center,
    dominant scale and rotation (first column) in the tangent chart."""
    idx = graph.node_stp
    sign = graph.node_end.astype(float)
    u = stps.rotations[idx][:, :, 0]
    s1 = stps.scales[idx, 0]
    np.add.at(g.stp_center, idx, node_grads)
    np.add.at(g.stp_scale, idx, np.stack(
        [sign * np.einsum("ni,ni->n", u, node_grads), np.zeros(len(idx)), np.zeros(len(idx))],
        axis=1,
    ))
    gv1 = (sign * s1)[:, None] * node_grads
    tangent = _tangent_from_column_grads(stps.rotations[idx], gv1, None, None)
    np.add.at(g.stp_rot, idx, tangent)


def graph_loss(graph: StructureGraph, stps: StructureSet) -> tuple[float, ParamGrads]:
    """Mean length of cross edges; pulls connected endpoints together.

    Topology is frozen; gradients flow through the endpoint positions only.
    """
    g = ParamGrads.zeros(len(stps), 0, 0)
    m = len(graph.cross_edges)
    if m == 0:
        return 0.0, g
    pos = endpoint_positions(graph, stps)
    pi = pos[graph.cross_edges[:, 0]]
    pj = pos[graph.cross_edges[:, 1]]
    diff = pi - pj
    lengths = np.linalg.norm(diff, axis=1)
    loss = float(np.mean(lengths))

    ok = lengths > 1e-12
    unit = np.zeros_like(diff)
    unit[ok] = diff[ok] / lengths[ok, None]
    node_grads = np.zeros((graph.n_nodes, 3))
    np.add.at(node_grads, graph.cross_edges[:, 0], unit / m)
    np.add.at(node_grads, graph.cross_edges[:, 1], -unit / m)
    _scatter_endpoint_grads(g, graph, stps, node_grads)
    return loss, g


def laplacian_loss(graph: StructureGraph, stps: StructureSet) -> tuple[float, ParamGrads]:
    """Mean squared offset of each node from its neighbor centroid.

    Isolated nodes contribute zero; the mean runs over all nodes.
    """
    g = ParamGrads.zeros(len(stps), 0, 0)
    v = graph.n_nodes
    if v == 0:
        return 0.0, g
    pos = endpoint_positions(graph, stps)
    edges = graph.all_edges()
    deg = np.zeros(v)
    nbr_sum = np.zeros((v, 3))
    for i, j in edges:
        deg[i] += 1
        deg[j] += 1
        nbr_sum[i] += pos[j]
        nbr_sum[j] += pos[i]
    connected = deg > 0
    r = np.zeros((v, 3))
    r[connected] = pos[connected] - nbr_sum[connected] / deg[connected, None]
    loss = float(np.sum(r**2) / v)

    node_grads = 2.0 * r / v
    for i, j in edges:
        node_grads[j] -= 2.0 * r[i] / (deg[i] * v)
        node_grads[i] -= 2.0 * r[j] / (deg[j] * v)
    _scatter_endpoint_grads(g, graph, stps, node_grads)
    return loss, g
