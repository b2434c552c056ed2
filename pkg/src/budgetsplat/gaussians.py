"""Structure-of-arrays store for all Gaussian parameters plus the
per-primitive training statistics the density controller consumes.

Structural edits (append/filter) go through this module so the statistics
stay row-aligned with the parameters; the Adam moment arrays mirror the same
edits through :mod:`budgetsplat.optim`. ``structure_version`` increments on
every structural edit and ``step_version`` on every optimizer step, which lets
downstream consumers (blend records, optimizer state) detect staleness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .core_math import (
    Gaussian,
    build_covariance,
    dc_from_rgb,
    inverse_sigmoid,
    sh_coeff_count,
    sigmoid,
)

# Provenance codes for per-primitive `origin`.
ORIGIN_INIT = 0
ORIGIN_CLONE = 1
ORIGIN_SPLIT = 2
ORIGIN_COMPENSATION = 3


@dataclass
class GaussianSet:
    positions: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) quaternions (w, x, y, z)
    log_scales: np.ndarray  # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray  # (N, 3, K) channel-major

    # Densification statistics, reset after every grow event.
    grad_pos2d_accum: np.ndarray = None  # (N,) sum of per-view 2D grad norms
    grad_color_accum: np.ndarray = None  # (N,) sum of per-view color grad norms
    grad_pos3d_sum: np.ndarray = None  # (N, 3) summed 3D position gradients
    accum_count: np.ndarray = None  # (N,) views the Gaussian contributed to

    # Bookkeeping.
    birth_iteration: np.ndarray = None  # (N,) int32
    origin: np.ndarray = None  # (N,) uint8
    structure_version: int = 0
    step_version: int = 0

    def __post_init__(self):
        n = len(self.positions)
        dt = self.positions.dtype
        if self.grad_pos2d_accum is None:
            self.grad_pos2d_accum = np.zeros(n, dtype=dt)
        if self.grad_color_accum is None:
            self.grad_color_accum = np.zeros(n, dtype=dt)
        if self.grad_pos3d_sum is None:
            self.grad_pos3d_sum = np.zeros((n, 3), dtype=dt)
        if self.accum_count is None:
            self.accum_count = np.zeros(n, dtype=np.int64)
        if self.birth_iteration is None:
            self.birth_iteration = np.zeros(n, dtype=np.int32)
        if self.origin is None:
            self.origin = np.full(n, ORIGIN_INIT, dtype=np.uint8)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def dtype(self):
        return self.positions.dtype

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[2]))) - 1

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def scales(self) -> np.ndarray:
        return np.exp(np.asarray(self.log_scales, dtype=np.float64))

    def covariances(self) -> np.ndarray:
        return build_covariance(self.rotations, self.log_scales)

    def get(self, i: int) -> Gaussian:
        return Gaussian(
            position=np.array(self.positions[i], dtype=np.float64),
            rotation=np.array(self.rotations[i], dtype=np.float64),
            log_scale=np.array(self.log_scales[i], dtype=np.float64),
            opacity_logit=float(self.opacity_logits[i]),
            sh=np.array(self.sh[i], dtype=np.float64),
        )

    def normalize_rotations(self) -> None:
        norm = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        np.divide(self.rotations, norm, out=self.rotations, where=norm > 0)

    def reset_densify_stats(self) -> None:
        self.grad_pos2d_accum[:] = 0
        self.grad_color_accum[:] = 0
        self.grad_pos3d_sum[:] = 0
        self.accum_count[:] = 0

    def param_nbytes(self) -> int:
        return (
            self.positions.nbytes
            + self.rotations.nbytes
            + self.log_scales.nbytes
            + self.opacity_logits.nbytes
            + self.sh.nbytes
        )

    def stats_nbytes(self) -> int:
        return (
            self.grad_pos2d_accum.nbytes
            + self.grad_color_accum.nbytes
            + self.grad_pos3d_sum.nbytes
            + self.accum_count.nbytes
            + self.birth_iteration.nbytes
            + self.origin.nbytes
        )

    def append(
        self,
        positions,
        rotations,
        log_scales,
        opacity_logits,
        sh,
        birth_iteration: int = 0,
        origin: int = ORIGIN_INIT,
    ) -> None:
        """Append rows with zeroed statistics. Bumps structure_version."""
        dt = self.dtype
        k = positions.shape[0]
        self.positions = np.concatenate([self.positions, np.asarray(positions, dtype=dt)])
        self.rotations = np.concatenate([self.rotations, np.asarray(rotations, dtype=dt)])
        self.log_scales = np.concatenate([self.log_scales, np.asarray(log_scales, dtype=dt)])
        self.opacity_logits = np.concatenate(
            [self.opacity_logits, np.asarray(opacity_logits, dtype=dt)]
        )
        self.sh = np.concatenate([self.sh, np.asarray(sh, dtype=dt)])
        self.grad_pos2d_accum = np.concatenate([self.grad_pos2d_accum, np.zeros(k, dtype=dt)])
        self.grad_color_accum = np.concatenate([self.grad_color_accum, np.zeros(k, dtype=dt)])
        self.grad_pos3d_sum = np.concatenate([self.grad_pos3d_sum, np.zeros((k, 3), dtype=dt)])
        self.accum_count = np.concatenate([self.accum_count, np.zeros(k, dtype=np.int64)])
        self.birth_iteration = np.concatenate(
            [self.birth_iteration, np.full(k, birth_iteration, dtype=np.int32)]
        )
        self.origin = np.concatenate([self.origin, np.full(k, origin, dtype=np.uint8)])
        self.structure_version += 1

    def keep(self, mask: np.ndarray) -> None:
        """Drop rows where mask is False. Bumps structure_version."""
        mask = np.asarray(mask, dtype=bool)
        self.positions = self.positions[mask]
        self.rotations = self.rotations[mask]
        self.log_scales = self.log_scales[mask]
        self.opacity_logits = self.opacity_logits[mask]
        self.sh = self.sh[mask]
        self.grad_pos2d_accum = self.grad_pos2d_accum[mask]
        self.grad_color_accum = self.grad_color_accum[mask]
        self.grad_pos3d_sum = self.grad_pos3d_sum[mask]
        self.accum_count = self.accum_count[mask]
        self.birth_iteration = self.birth_iteration[mask]
        self.origin = self.origin[mask]
        self.structure_version += 1

    def copy(self) -> "GaussianSet":
        out = GaussianSet(
            positions=self.positions.copy(),
            rotations=self.rotations.copy(),
            log_scales=self.log_scales.copy(),
            opacity_logits=self.opacity_logits.copy(),
            sh=self.sh.copy(),
            grad_pos2d_accum=self.grad_pos2d_accum.copy(),
            grad_color_accum=self.grad_color_accum.copy(),
            grad_pos3d_sum=self.grad_pos3d_sum.copy(),
            accum_count=self.accum_count.copy(),
            birth_iteration=self.birth_iteration.copy(),
            origin=self.origin.copy(),
        )
        out.structure_version = self.structure_version
        out.step_version = self.step_version
        return out

    def astype(self, dtype) -> "GaussianSet":
        out = self.copy()
        for name in ("positions", "rotations", "log_scales", "opacity_logits", "sh",
                     "grad_pos2d_accum", "grad_color_accum", "grad_pos3d_sum"):
            setattr(out, name, getattr(out, name).astype(dtype))
        return out


def empty_set(sh_degree: int, dtype=np.float64) -> GaussianSet:
    K = sh_coeff_count(sh_degree)
    return GaussianSet(
        positions=np.zeros((0, 3), dtype=dtype),
        rotations=np.zeros((0, 4), dtype=dtype),
        log_scales=np.zeros((0, 3), dtype=dtype),
        opacity_logits=np.zeros(0, dtype=dtype),
        sh=np.zeros((0, 3, K), dtype=dtype),
    )


def make_set(positions, rotations, log_scales, opacity_logits, sh, dtype=np.float64) -> GaussianSet:
    # Owned copies: the optimizer updates these arrays in place, so they must
    # never alias caller storage (e.g. a dataset's point cloud).
    return GaussianSet(
        positions=np.array(positions, dtype=dtype).reshape(-1, 3),
        rotations=np.array(rotations, dtype=dtype).reshape(-1, 4),
        log_scales=np.array(log_scales, dtype=dtype).reshape(-1, 3),
        opacity_logits=np.array(opacity_logits, dtype=dtype).reshape(-1),
        sh=np.array(sh, dtype=dtype),
    )


def set_from_gaussians(gaussians, dtype=np.float64) -> GaussianSet:
    return make_set(
        positions=np.stack([g.position for g in gaussians]),
        rotations=np.stack([g.rotation for g in gaussians]),
        log_scales=np.stack([g.log_scale for g in gaussians]),
        opacity_logits=np.array([g.opacity_logit for g in gaussians]),
        sh=np.stack([g.sh for g in gaussians]),
        dtype=dtype,
    )


def nearest_neighbor_distances(points: np.ndarray) -> np.ndarray:
    """Distance from each point to its nearest other point (self excluded)."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < 2:
        return np.full(len(points), 0.1)
    tree = cKDTree(points)
    d, _ = tree.query(points, k=2)
    return d[:, 1]


def init_from_points(
    points: np.ndarray,
    colors: np.ndarray,
    sh_degree: int,
    opacity: float = 0.1,
    dtype=np.float64,
) -> GaussianSet:
    """Seed a set from a sparse point cloud: isotropic scales from nearest
    neighbor spacing, identity rotations, DC-only color."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    K = sh_coeff_count(sh_degree)
    dist = np.clip(nearest_neighbor_distances(points), 1e-4, None)
    log_scales = np.log(dist)[:, None].repeat(3, axis=1)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    sh = np.zeros((n, 3, K))
    sh[:, :, 0] = dc_from_rgb(np.clip(colors, 0.0, 1.0))
    return make_set(
        positions=points,
        rotations=rotations,
        log_scales=log_scales,
        opacity_logits=np.full(n, inverse_sigmoid(opacity)),
        sh=sh,
        dtype=dtype,
    )
