"""Density control under a hard primitive budget.

The growth step clones small / splits large Gaussians chosen by the hybrid
position+color gradient criterion, displaces fresh clones along their
accumulated position gradient so parent and copy decorrelate, and is always
truncated so the set never exceeds the budget. Pruning removes transparent
primitives every growth event and, on its own cadence, the lowest ray
contributors when the set is over budget. Compensation collects the worst
pixels of each rendered view, back-projects them through the blended depth,
and periodically materializes new Gaussians there with ground-truth color.

Every structural edit goes through helpers that mutate the Gaussian set and
the Adam state in lockstep, so row alignment is preserved by construction.
All operations return a small event dict for the structured event log.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backward import LossGrad
from .core_math import Camera, dc_from_rgb, inverse_sigmoid
from .forward import RenderOptions, RenderOutput, render, render_depth_at
from .gaussians import (
    ORIGIN_CLONE,
    ORIGIN_COMPENSATION,
    ORIGIN_SPLIT,
    GaussianSet,
    nearest_neighbor_distances,
)
from .optim import AdamState

SPLIT_SCALE_SHRINK = 1.6
SPLIT_CHILDREN = 2


@dataclass
class BudgetPolicy:
    budget: int
    grow_interval: int = 50
    budget_prune_interval: int = 100
    densify_begin: int = 500
    densify_end: int = 10_000
    compensate_begin: int = 10_000
    compensate_end: int = 15_000
    compensate_interval: int = 100
    compensate_top_k: int = 100
    compensate_opacity: float = 0.1
    opacity_threshold: float = 0.005
    split_scale: float = 0.01  # world units; trainer resolves fraction * extent
    growth_cap_fraction: float = 0.05
    tau_grow: float = 2e-4
    shift_eta: float = -1.0
    importance_mode: str = "alpha_tau"  # or "tau"

    def validate(self, initial_count: int | None = None):
        if self.budget < 1:
            raise ValueError("budget must be >= 1")
        if initial_count is not None and self.budget < initial_count:
            raise ValueError(
                f"budget {self.budget} below initial point count {initial_count}"
            )
        for name in ("grow_interval", "budget_prune_interval", "compensate_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.densify_begin > self.densify_end or self.compensate_begin > self.compensate_end:
            raise ValueError("schedule windows must be ordered")
        overlaps = (
            self.compensate_begin < self.densify_end
            and self.compensate_end > self.densify_begin
        )
        if overlaps:
            raise ValueError("compensation window must not overlap the densify window")
        if self.importance_mode not in ("alpha_tau", "tau"):
            raise ValueError(f"unknown importance_mode {self.importance_mode!r}")


def _append(gs: GaussianSet, adam: AdamState, k: int, **kwargs) -> None:
    gs.append(**kwargs)
    adam.append_rows(k)
    adam.check_aligned(gs)


def _filter(gs: GaussianSet, adam: AdamState, keep: np.ndarray) -> None:
    gs.keep(keep)
    adam.filter_rows(keep)
    adam.check_aligned(gs)


def compute_shift(accum_grad: np.ndarray, eta: float, max_axis_scale: np.ndarray) -> np.ndarray:
    """Clone displacement: eta times the accumulated position gradient,
    clamped so its norm never exceeds the parent's largest scale axis."""
    delta = eta * np.asarray(accum_grad, dtype=np.float64).reshape(-1, 3)
    norm = np.linalg.norm(delta, axis=1)
    cap = np.asarray(max_axis_scale, dtype=np.float64).reshape(-1)
    factor = np.where(norm > cap, np.divide(cap, norm, out=np.ones_like(norm), where=norm > 0), 1.0)
    return delta * factor[:, None]


def select_growth(scores: np.ndarray, tau: float, limit: int) -> np.ndarray:
    """Rows with score above tau, highest first (id breaks ties), capped."""
    if limit <= 0:
        return np.zeros(0, dtype=np.int64)
    eligible = np.flatnonzero(scores > tau)
    if eligible.size == 0:
        return eligible
    order = np.lexsort((eligible, -scores[eligible]))
    return eligible[order][:limit]


def grow(
    gs: GaussianSet,
    adam: AdamState,
    scores: np.ndarray,
    policy: BudgetPolicy,
    rng: np.random.Generator,
    iteration: int = 0,
    budget_gate: bool = True,
) -> dict:
    """Clone-and-split by score, then shift the fresh clones (Eq.-style
    accumulated-gradient displacement). Never exceeds the budget."""
    before = len(gs)
    headroom = policy.budget - before if budget_gate else np.iinfo(np.int64).max
    cap = max(1, int(policy.growth_cap_fraction * policy.budget))
    selected = select_growth(np.asarray(scores, dtype=np.float64), policy.tau_grow, min(headroom, cap))
    event = {
        "event": "grow",
        "iteration": iteration,
        "before": before,
        "threshold": policy.tau_grow,
        "cloned": 0,
        "split": 0,
    }
    if selected.size == 0 or (budget_gate and before >= policy.budget):
        event["after"] = len(gs)
        return event

    max_axis = np.exp(gs.log_scales[selected].astype(np.float64)).max(axis=1)
    is_small = max_axis <= policy.split_scale
    clone_ids = selected[is_small]
    split_ids = selected[~is_small]

    new_pos, new_rot, new_scale, new_logit, new_sh, new_origin = [], [], [], [], [], []

    if clone_ids.size:
        delta = compute_shift(
            gs.grad_pos3d_sum[clone_ids],
            policy.shift_eta,
            np.exp(gs.log_scales[clone_ids].astype(np.float64)).max(axis=1),
        )
        new_pos.append(gs.positions[clone_ids].astype(np.float64) + delta)
        new_rot.append(gs.rotations[clone_ids])
        new_scale.append(gs.log_scales[clone_ids])
        new_logit.append(gs.opacity_logits[clone_ids])
        new_sh.append(gs.sh[clone_ids])
        new_origin.append(np.full(clone_ids.size, ORIGIN_CLONE))

    if split_ids.size:
        # Children sampled from the parent's own density: mu + R S n.
        from .core_math import quat_to_rotmat

        Rm = quat_to_rotmat(gs.rotations[split_ids])
        s = np.exp(gs.log_scales[split_ids].astype(np.float64))
        samples = rng.standard_normal((split_ids.size, SPLIT_CHILDREN, 3))
        offsets = np.einsum("vij,vcj->vci", Rm, samples * s[:, None, :])
        child_pos = gs.positions[split_ids].astype(np.float64)[:, None, :] + offsets
        child_scale = gs.log_scales[split_ids].astype(np.float64) - np.log(SPLIT_SCALE_SHRINK)
        for c in range(SPLIT_CHILDREN):
            new_pos.append(child_pos[:, c, :])
            new_rot.append(gs.rotations[split_ids])
            new_scale.append(child_scale)
            new_logit.append(gs.opacity_logits[split_ids])
            new_sh.append(gs.sh[split_ids])
            new_origin.append(np.full(split_ids.size, ORIGIN_SPLIT))

    k = sum(len(p) for p in new_pos)
    gs.append(
        positions=np.concatenate(new_pos),
        rotations=np.concatenate(new_rot),
        log_scales=np.concatenate(new_scale),
        opacity_logits=np.concatenate(new_logit),
        sh=np.concatenate(new_sh),
        birth_iteration=iteration,
        origin=0,
    )
    gs.origin[-k:] = np.concatenate(new_origin).astype(np.uint8)
    adam.append_rows(k)
    adam.check_aligned(gs)

    if split_ids.size:
        keep = np.ones(len(gs), dtype=bool)
        keep[split_ids] = False
        _filter(gs, adam, keep)

    event["cloned"] = int(clone_ids.size)
    event["split"] = int(split_ids.size)
    event["after"] = len(gs)
    return event


def opacity_prune(gs: GaussianSet, adam: AdamState, o_t: float, iteration: int = 0) -> dict:
    before = len(gs)
    keep = gs.opacities() >= o_t
    if not keep.all():
        _filter(gs, adam, keep)
    return {
        "event": "opacity_prune",
        "iteration": iteration,
        "before": before,
        "after": len(gs),
        "threshold": o_t,
    }


def importance_scores(
    gs: GaussianSet,
    cameras: list[Camera],
    opts: RenderOptions,
    mode: str = "alpha_tau",
) -> np.ndarray:
    """Max ray contribution per Gaussian across all given views.

    mode "alpha_tau" is the literal max(alpha_i * tau_i); "tau" is the
    max-blend-weight variant.
    """
    scores = np.zeros(len(gs))
    for cam in cameras:
        out = render(gs, cam, opts)
        contrib = out.max_contrib if mode == "alpha_tau" else out.max_tau
        np.maximum(scores, contrib, out=scores)
    return scores


def budget_prune(
    gs: GaussianSet,
    adam: AdamState,
    scores: np.ndarray,
    budget: int,
    iteration: int = 0,
) -> dict:
    """Remove exactly len(gs) - budget of the lowest scorers (ties: smaller
    opacity, then smaller id). No-op at or under budget."""
    before = len(gs)
    n_remove = before - budget
    event = {
        "event": "budget_prune",
        "iteration": iteration,
        "before": before,
        "after": before,
        "removed": 0,
    }
    if n_remove <= 0:
        return event
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(before), gs.opacities(), scores))
    remove = order[:n_remove]
    keep = np.ones(before, dtype=bool)
    keep[remove] = False
    _filter(gs, adam, keep)
    event["after"] = len(gs)
    event["removed"] = int(n_remove)
    event["threshold"] = float(scores[remove].max())
    return event


@dataclass
class CompensationBuffer:
    """Back-projected error-pixel samples awaiting materialization."""

    positions: list = field(default_factory=list)
    colors: list = field(default_factory=list)
    views: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.positions)

    def clear(self) -> None:
        self.positions.clear()
        self.colors.clear()
        self.views.clear()


def collect_compensation(
    buffer: CompensationBuffer,
    gs: GaussianSet,
    out: RenderOutput,
    loss_grads: LossGrad,
    target: np.ndarray,
    top_k: int,
) -> dict:
    """Pick the top-K error pixels of this view and buffer their
    back-projections paired with the ground-truth colors."""
    cam = out.camera
    err = np.asarray(loss_grads.pixel_error_map, dtype=np.float64).reshape(-1)
    hot = np.flatnonzero(err > 0)
    appended = 0
    if hot.size:
        order = np.lexsort((hot, -err[hot]))
        chosen = hot[order][:top_k]
        rows = chosen // cam.width
        cols = chosen % cam.width
        d_mid, found = render_depth_at(gs, cam, np.stack([rows, cols], axis=1), out.options)
        blended = np.asarray(out.depth, dtype=np.float64).reshape(-1)[chosen]
        depth = np.where(found, d_mid, blended)
        usable = depth > 0
        if np.any(usable):
            world = cam.backproject(cols[usable] + 0.5, rows[usable] + 0.5, depth[usable])
            gt = np.asarray(target, dtype=np.float64).reshape(-1, 3)[chosen[usable]]
            buffer.positions.extend(world)
            buffer.colors.extend(gt)
            buffer.views.extend([cam.cam_id] * int(usable.sum()))
            appended = int(usable.sum())
    return {
        "event": "compensate_collect",
        "iteration": None,
        "view": cam.cam_id,
        "appended": appended,
        "buffered": len(buffer),
    }


def flush_compensation(
    buffer: CompensationBuffer,
    gs: GaussianSet,
    adam: AdamState,
    opacity: float = 0.1,
    iteration: int = 0,
    scale_clip: tuple = (1e-4, 1.0),
) -> dict:
    """Materialize every buffered sample as a new Gaussian (ground-truth DC
    color, isotropic scale from the nearest existing center) and clear the
    buffer. The caller runs budget pruning immediately afterwards."""
    before = len(gs)
    k = len(buffer)
    event = {
        "event": "compensate_flush",
        "iteration": iteration,
        "before": before,
        "added": k,
    }
    if k == 0:
        event["after"] = before
        return event
    positions = np.asarray(buffer.positions, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(buffer.colors, dtype=np.float64).reshape(-1, 3)

    if before > 0:
        from scipy.spatial import cKDTree

        d, _ = cKDTree(gs.positions.astype(np.float64)).query(positions, k=1)
    else:
        d = nearest_neighbor_distances(positions)
    dist = np.clip(d, scale_clip[0], scale_clip[1])

    K = gs.sh.shape[2]
    rot = np.zeros((k, 4))
    rot[:, 0] = 1.0
    sh = np.zeros((k, 3, K))
    sh[:, :, 0] = dc_from_rgb(np.clip(colors, 0.0, 1.0))
    _append(
        gs,
        adam,
        k,
        positions=positions,
        rotations=rot,
        log_scales=np.log(dist)[:, None].repeat(3, axis=1),
        opacity_logits=np.full(k, inverse_sigmoid(opacity)),
        sh=sh,
        birth_iteration=iteration,
        origin=ORIGIN_COMPENSATION,
    )
    buffer.clear()
    event["after"] = len(gs)
    return event
