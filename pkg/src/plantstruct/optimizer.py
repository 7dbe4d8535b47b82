"""Staged optimization driver.

Stages: data-fit warm-up, joint fitting with density control, then graph
construction with the structure losses, and a final leaf-instance clustering
pass. Updates are plain gradient descent or diagonal adaptive moments
(config choice); rotations update in the tangent chart and are
re-orthonormalized every step.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .density import (
    DensityConfig,
    cluster_leaf_instances,
    densify_stps,
    merge_branch_stps,
    prune_stps,
    radius_filter,
)
from .initialization import InitConfig, init_scene
from .losses import LossReport, LossWeights, ParamGrads, total_loss
from .primitives import orthonormalize, rotation_from_axis_angle
from .scene import PlantCloud, Scene, SemanticReference, compute_class_color_means
from .structgraph import EmptyGraphError, GraphConfig, StructureGraph, build_graph

PARAM_CLASSES = (
    "stp_center", "stp_scale", "stp_rot", "stp_logit",
    "app_center", "app_color", "app_feature",
)

LOGIT_CLAMP = 10.0
SCALE_FLOOR = 1e-6


@dataclass
class Schedule:
    """Step budget, per-term activation steps, and per-class learning rates."""

    total_steps: int = 3000
    warmup_steps: int = 500
    densify_stop_step: int = 1500
    structure_start_step: int = 1500
    lr: dict = field(default_factory=dict)
    start: dict = field(default_factory=dict)
    method: str = "adam"   # "adam" | "sgd"

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.densify_stop_step <= self.total_steps:
            raise ValueError("need 0 <= warmup <= densify_stop <= total_steps")
        if not self.densify_stop_step <= self.structure_start_step <= self.total_steps:
            raise ValueError("structure stage must start after densification stops")
        defaults_lr = {
            "stp_center": 5e-3,
            "stp_scale": 5e-3,
            "stp_rot": 1e-2,
            "stp_logit": 5e-2,
            "app_center": 3e-3,
            "app_color": 1e-2,
            "app_feature": 1e-2,
        }
        defaults_start = {
            "fit": 0,
            "bind": self.warmup_steps,
            "sem": self.warmup_steps,
            "op": self.warmup_steps,
            "cls": self.warmup_steps,
            "graph": self.structure_start_step,
        }
        self.lr = {**defaults_lr, **self.lr}
        self.start = {**defaults_start, **self.start}
        if any(v <= 0 for v in self.lr.values()):
            raise ValueError("learning rates must be positive")
        if self.method not in ("adam", "sgd"):
            raise ValueError("method must be 'adam' or 'sgd'")

    def active_weights(self, weights: LossWeights, t: int) -> dict[str, float]:
        eff = weights.effective()
        return {term: (w if t >= self.start[term] else 0.0) for term, w in eff.items()}


def default_schedule(scene_scale: float = 1.0, **overrides) -> Schedule:
    """Schedule with translation rates scaled to the scene extent."""
    lr = overrides.pop("lr", {})
    lr.setdefault("stp_center", 5e-3 * scene_scale)
    lr.setdefault("app_center", 3e-3 * scene_scale)
    return Schedule(lr=lr, **overrides)


class _Moments:
    """Diagonal Adam state for one parameter class; remappable on structural
    changes (new rows start from zero state)."""

    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)

    def update(self, grad: np.ndarray, lr: float, t: int,
               beta1=0.9, beta2=0.999, eps=1e-8) -> np.ndarray:
        self.m = beta1 * self.m + (1 - beta1) * grad
        self.v = beta2 * self.v + (1 - beta2) * grad**2
        mhat = self.m / (1 - beta1**t)
        vhat = self.v / (1 - beta2**t)
        return lr * mhat / (np.sqrt(vhat) + eps)

    def remap(self, old_rows: np.ndarray, new_count: int):
        shape = (new_count,) + self.m.shape[1:]
        m2, v2 = np.zeros(shape), np.zeros(shape)
        keep = old_rows >= 0
        m2[keep] = self.m[old_rows[keep]]
        v2[keep] = self.v[old_rows[keep]]
        self.m, self.v = m2, v2


class OptimizerState:
    def __init__(self, scene: Scene, method: str):
        self.method = method
        self.t = 0
        self.moments = {}
        if method == "adam":
            self._alloc(scene)

    def _alloc(self, scene: Scene):
        s, a, d = len(scene.stps), len(scene.apps), scene.apps.feature_dim
        shapes = {
            "stp_center": (s, 3), "stp_scale": (s, 3), "stp_rot": (s, 3),
            "stp_logit": (s,), "app_center": (a, 3), "app_color": (a, 3),
            "app_feature": (a, d),
        }
        self.moments = {k: _Moments(v) for k, v in shapes.items()}

    def reset_for(self, scene: Scene):
        if self.method == "adam":
            self._alloc(scene)


def step(
    scene: Scene,
    weights: LossWeights,
    schedule: Schedule,
    t: int,
    state: Optional[OptimizerState] = None,
) -> LossReport:
    """One gradient step in place; returns the loss report at the old point."""
    if t >= schedule.total_steps:
        raise ValueError(f"step index {t} out of range (total {schedule.total_steps})")
    active = schedule.active_weights(weights, t)
    report = total_loss(scene, weights, active)
    if not np.isfinite(report.total) or not report.grads.all_finite():
        bad = [k for k, v in report.values.items() if not np.isfinite(v)]
        raise FloatingPointError(
            f"non-finite loss at step {t}; offending term(s): {bad or 'gradients'}"
        )

    updates = {}
    for kind in PARAM_CLASSES:
        grad = getattr(report.grads, kind)
        lr = schedule.lr[kind]
        if state is not None and state.method == "adam":
            updates[kind] = state.moments[kind].update(grad, lr, t + 1)
        else:
            updates[kind] = lr * grad

    stps, apps = scene.stps, scene.apps
    stps.centers -= updates["stp_center"]
    stps.scales = np.maximum(stps.scales - updates["stp_scale"], SCALE_FLOOR)
    stps.logits = np.clip(stps.logits - updates["stp_logit"], -LOGIT_CLAMP, LOGIT_CLAMP)
    for i in range(len(stps)):
        w = -updates["stp_rot"][i]
        if np.any(w):
            stps.rotations[i] = stps.rotations[i] @ rotation_from_axis_angle(w)
        stps.rotations[i] = orthonormalize(stps.rotations[i])
    _canonicalize_scales(stps)
    apps.centers -= updates["app_center"]
    apps.colors = np.clip(apps.colors - updates["app_color"], 0.0, 1.0)
    if apps.feature_dim:
        apps.features -= updates["app_feature"]
    return report


def _canonicalize_scales(stps) -> None:
    """Re-sort scales descending, permuting rotation columns to match and
    restoring a right-handed frame."""
    order = np.argsort(-stps.scales, axis=1, kind="stable")
    needs = np.any(order != np.arange(3), axis=1)
    for i in np.nonzero(needs)[0]:
        stps.scales[i] = stps.scales[i][order[i]]
        R = stps.rotations[i][:, order[i]]
        if np.linalg.det(R) < 0:
            R[:, 2] = -R[:, 2]
        stps.rotations[i] = R


@dataclass
class FitResult:
    scene: Scene
    graph: Optional[StructureGraph]
    instance_labels: np.ndarray          # per structure primitive, -1 for branch
    history: list[dict]


def run(
    cloud: PlantCloud,
    init_cfg: Optional[InitConfig] = None,
    weights: Optional[LossWeights] = None,
    schedule: Optional[Schedule] = None,
    density_cfg: Optional[DensityConfig] = None,
    graph_cfg: Optional[GraphConfig] = None,
    semantic_ref: Optional[SemanticReference] = None,
    seed: int = 0,
) -> FitResult:
    """Full pipeline: initialize, optimize in stages, extract the graph and
    the leaf instances. Deterministic given the seed."""
    init_cfg = replace(init_cfg, seed=seed) if init_cfg else InitConfig(seed=seed)
    weights = weights or LossWeights()
    density_cfg = density_cfg or DensityConfig()
    graph_cfg = graph_cfg or GraphConfig()
    scene = init_scene(cloud, init_cfg, semantic_ref=semantic_ref)
    if schedule is None:
        schedule = default_schedule(scene_scale=cloud.scale)
    if semantic_ref is None and weights.enabled.get("sem", True):
        warnings.warn("no semantic reference supplied; disabling the semantic term")
        weights.enabled["sem"] = False

    state = OptimizerState(scene, schedule.method)
    history: list[dict] = []
    grad_accum = np.zeros(len(scene.stps))

    def refresh_color_means():
        branch_mean, leaf_mean = compute_class_color_means(scene.stps, scene.apps)
        old = scene.color_means
        scene.color_means = (
            branch_mean if branch_mean is not None else old[0],
            leaf_mean if leaf_mean is not None else old[1],
        )

    def rebuild_graph():
        try:
            scene.graph = build_graph(scene.stps, scene.apps, graph_cfg)
        except EmptyGraphError:
            scene.graph = None

    for t in range(schedule.total_steps):
        joint_stage = schedule.warmup_steps <= t < schedule.densify_stop_step
        if joint_stage and t > schedule.warmup_steps and (t - schedule.warmup_steps) % density_cfg.densify_interval == 0:
            scene.stps, scene.apps = densify_stps(scene.stps, scene.apps, grad_accum, density_cfg)
            scene.stps, scene.apps = prune_stps(scene.stps, scene.apps, density_cfg)
            grad_accum = np.zeros(len(scene.stps))
            refresh_color_means()
            state.reset_for(scene)

        if t == schedule.structure_start_step:
            scene.stps, scene.apps = merge_branch_stps(scene.stps, scene.apps, density_cfg)
            rebuild_graph()
            if scene.graph is not None:
                scene.stps, scene.apps = radius_filter(scene.graph, scene.stps, scene.apps, density_cfg)
                rebuild_graph()
            refresh_color_means()
            state.reset_for(scene)
        elif t > schedule.structure_start_step and (t - schedule.structure_start_step) % graph_cfg.rebuild_interval == 0:
            rebuild_graph()

        report = step(scene, weights, schedule, t, state)

        if joint_stage:
            from .losses import binding_loss, semantic_loss  # accumulators only

            _, gb = binding_loss(scene.apps, scene.stps)
            acc = np.linalg.norm(gb.stp_center, axis=1)
            if scene.semantic_ref is not None and weights.enabled.get("sem", False):
                _, gs = semantic_loss(scene.stps, scene.apps, scene.semantic_ref, weights.tau)
                acc = acc + np.abs(gs.stp_logit)
            if len(acc) != len(grad_accum):
                grad_accum = np.zeros(len(acc))
            grad_accum += acc

        history.append({
            "step": t,
            "total": report.total,
            **{k: v for k, v in report.values.items()},
            "n_stps": len(scene.stps),
            "n_apps": len(scene.apps),
        })

    rebuild_graph()
    if scene.graph is not None:
        scene.graph.refresh_positions(scene.stps)
    labels = cluster_leaf_instances(scene.stps, density_cfg)
    return FitResult(scene=scene, graph=scene.graph, instance_labels=labels, history=history)
