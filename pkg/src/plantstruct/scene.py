"""Scene state: observed point cloud plus array-backed primitive collections.

The per-primitive dataclasses in :mod:`plantstruct.primitives` are the value
types; optimization works on structure-of-arrays collections so losses and
updates stay vectorized. Collections are compact (no dead rows): density
control removes rows and remaps appearance parents.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

from .primitives import (
    AppearancePrimitive,
    StructurePrimitive,
    is_rotation,
    sigmoid,
)

if TYPE_CHECKING:  # pragma: no cover
    from .structgraph import StructureGraph


@dataclass
class PlantCloud:
    """Observed plant points with colors and optional features / labels.

    Attributes:
        points: (N, 3) positions in scene units.
        colors: (N, 3) RGB in [0, 1].
        features: optional (N, D) semantic feature vectors.
        gt_branch: optional (N,) bool, True for branch points.
        gt_instance: optional (N,) int leaf-instance ids, -1 for branch or
            unlabeled points.
    """

    points: np.ndarray
    colors: np.ndarray
    features: Optional[np.ndarray] = None
    gt_branch: Optional[np.ndarray] = None
    gt_instance: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        self.colors = np.asarray(self.colors, dtype=float)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or len(self.points) < 1:
            raise ValueError(f"points must be (N,3) with N >= 1, got {self.points.shape}")
        n = len(self.points)
        if self.colors.shape != (n, 3):
            raise ValueError("colors must match points in length and be (N,3)")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=float)
            if self.features.ndim != 2 or len(self.features) != n:
                raise ValueError("features must be (N,D)")
        if self.gt_branch is not None:
            self.gt_branch = np.asarray(self.gt_branch, dtype=bool)
            if self.gt_branch.shape != (n,):
                raise ValueError("gt_branch must be (N,)")
        if self.gt_instance is not None:
            self.gt_instance = np.asarray(self.gt_instance, dtype=int)
            if self.gt_instance.shape != (n,):
                raise ValueError("gt_instance must be (N,)")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def feature_dim(self) -> int:
        return 0 if self.features is None else self.features.shape[1]

    @property
    def scale(self) -> float:
        """Bounding-box diagonal; used to scale translation learning rates."""
        span = self.points.max(axis=0) - self.points.min(axis=0)
        return float(max(np.linalg.norm(span), 1e-12))


@dataclass
class SemanticReference:
    """Unit-norm class reference feature vectors for branch and leaf."""

    f_branch: np.ndarray
    f_leaf: np.ndarray

    def __post_init__(self):
        self.f_branch = np.asarray(self.f_branch, dtype=float).ravel()
        self.f_leaf = np.asarray(self.f_leaf, dtype=float).ravel()
        if self.f_branch.shape != self.f_leaf.shape:
            raise ValueError("reference features must share one dimension")
        for name, v in (("f_branch", self.f_branch), ("f_leaf", self.f_leaf)):
            if abs(np.linalg.norm(v) - 1.0) > 1e-9:
                raise ValueError(f"{name} must be unit-normalized")

    @property
    def dim(self) -> int:
        return self.f_branch.shape[0]


@dataclass
class StructureSet:
    """Array-backed collection of structure primitives."""

    centers: np.ndarray      # (S, 3)
    rotations: np.ndarray    # (S, 3, 3); columns of each matrix are v1, v2, v3
    scales: np.ndarray       # (S, 3) descending per row
    logits: np.ndarray       # (S,)
    active: np.ndarray = None  # (S,) bool

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        s = len(self.centers)
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(s, 3, 3)
        self.scales = np.asarray(self.scales, dtype=float).reshape(s, 3)
        self.logits = np.asarray(self.logits, dtype=float).reshape(s)
        if self.active is None:
            self.active = np.ones(s, dtype=bool)
        else:
            self.active = np.asarray(self.active, dtype=bool).reshape(s)

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def probs(self) -> np.ndarray:
        return sigmoid(self.logits)

    @property
    def branch_mask(self) -> np.ndarray:
        return self.probs >= 0.5

    def primitive(self, i: int) -> StructurePrimitive:
        return StructurePrimitive(
            center=self.centers[i],
            rotation=self.rotations[i],
            scales=self.scales[i],
            branch_logit=float(self.logits[i]),
            active=bool(self.active[i]),
        )

    @classmethod
    def from_primitives(cls, prims: list[StructurePrimitive]) -> "StructureSet":
        return cls(
            centers=np.array([p.center for p in prims]),
            rotations=np.array([p.rotation for p in prims]),
            scales=np.array([p.scales for p in prims]),
            logits=np.array([p.branch_logit for p in prims]),
            active=np.array([p.active for p in prims]),
        )

    def copy(self) -> "StructureSet":
        return StructureSet(
            self.centers.copy(), self.rotations.copy(), self.scales.copy(),
            self.logits.copy(), self.active.copy(),
        )

    def validate(self, rotation_tol: float = 1e-6) -> None:
        for i in range(len(self)):
            if not is_rotation(self.rotations[i], tol=rotation_tol):
                raise ValueError(f"structure primitive {i}: rotation drifted off SO(3)")
        s = self.scales
        if np.any(s <= 0) or np.any(s[:, 0] < s[:, 1]) or np.any(s[:, 1] < s[:, 2]):
            raise ValueError("structure scales must be positive and sorted descending")


@dataclass
class AppearanceSet:
    """Array-backed collection of appearance primitives."""

    centers: np.ndarray      # (A, 3)
    rotations: np.ndarray    # (A, 3, 3)
    scales: np.ndarray       # (A, 3)
    colors: np.ndarray       # (A, 3) in [0, 1]
    opacities: np.ndarray    # (A,)
    features: np.ndarray     # (A, D); D may be 0
    parents: np.ndarray      # (A,) int indices into a StructureSet

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        a = len(self.centers)
        self.rotations = np.asarray(self.rotations, dtype=float).reshape(a, 3, 3)
        self.scales = np.asarray(self.scales, dtype=float).reshape(a, 3)
        self.colors = np.asarray(self.colors, dtype=float).reshape(a, 3)
        self.opacities = np.asarray(self.opacities, dtype=float).reshape(a)
        self.features = np.asarray(self.features, dtype=float).reshape(a, -1)
        self.parents = np.asarray(self.parents, dtype=np.int64).reshape(a)

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def primitive(self, i: int) -> AppearancePrimitive:
        return AppearancePrimitive(
            center=self.centers[i],
            rotation=self.rotations[i],
            scales=self.scales[i],
            color=self.colors[i],
            opacity=float(self.opacities[i]),
            feature=self.features[i],
            parent=int(self.parents[i]),
        )

    def copy(self) -> "AppearanceSet":
        return AppearanceSet(
            self.centers.copy(), self.rotations.copy(), self.scales.copy(),
            self.colors.copy(), self.opacities.copy(), self.features.copy(),
            self.parents.copy(),
        )

    def check_parents(self, stps: StructureSet) -> None:
        if len(self) == 0:
            return
        bad = (self.parents < 0) | (self.parents >= len(stps))
        if np.any(bad):
            raise ValueError(f"dangling appearance parent indices: {np.nonzero(bad)[0][:5]}")
        if not np.all(stps.active[self.parents]):
            raise ValueError("appearance primitive bound to an inactive structure primitive")


@dataclass
class Scene:
    """Everything one optimization step reads: primitives, observations, state."""

    stps: StructureSet
    apps: AppearanceSet
    cloud: PlantCloud
    semantic_ref: Optional[SemanticReference] = None
    color_means: Optional[tuple[np.ndarray, np.ndarray]] = None  # (branch, leaf)
    graph: Optional["StructureGraph"] = None

    def copy(self) -> "Scene":
        means = None
        if self.color_means is not None:
            means = (self.color_means[0].copy(), self.color_means[1].copy())
        return Scene(
            stps=self.stps.copy(),
            apps=self.apps.copy(),
            cloud=self.cloud,
            semantic_ref=self.semantic_ref,
            color_means=means,
            graph=self.graph,
        )


def compute_class_color_means(
    stps: StructureSet, apps: AppearanceSet
) -> tuple[Optional[np.ndarray], Optional[np.ndarray]]:
    """Mean appearance color per hard class (branch / leaf) of the parent.

    Returns (branch_mean, leaf_mean); an entry is None when its class has no
    bound appearance primitives, in which case callers keep the previous mean.
    """
    if len(apps) == 0:
        return None, None
    parent_branch = stps.branch_mask[apps.parents]
    branch_mean = apps.colors[parent_branch].mean(axis=0) if np.any(parent_branch) else None
    leaf_mean = apps.colors[~parent_branch].mean(axis=0) if np.any(~parent_branch) else None
    return branch_mean, leaf_mean
