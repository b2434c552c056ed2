"""Per-parameter-group Adam with the exponentially decayed position learning
rate and the scheduled opacity reset.

Moment arrays stay row-aligned with the GaussianSet through every structural
event: the density controller calls append_rows/filter_rows here in lockstep
with the set edits, and both sides carry a structure version that `step`
checks before touching anything.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backward import GradientBundle
from .gaussians import GaussianSet
from .core_math import inverse_sigmoid


class AlignmentError(RuntimeError):
    """Optimizer state rows do not match the parameter rows."""


@dataclass
class LearningRates:
    position_init: float = 1.6e-4
    position_final: float = 1.6e-6
    position_max_steps: int = 30_000
    sh_dc: float = 2.5e-3
    sh_rest: float = 2.5e-3 / 20.0
    opacity: float = 5e-2
    scale: float = 5e-3
    rotation: float = 1e-3
    # Position rates are per unit of scene extent, like the training
    # environment this schedule is inherited from.
    extent: float = 1.0

    def position_lr(self, step: int) -> float:
        t = min(max(step, 0), self.position_max_steps) / self.position_max_steps
        return self.extent * self.position_init * (self.position_final / self.position_init) ** t


PARAM_GROUPS = ("positions", "rotations", "log_scales", "opacity_logits", "sh")

_GRAD_OF = {
    "positions": "d_position",
    "rotations": "d_rotation",
    "log_scales": "d_log_scale",
    "opacity_logits": "d_opacity_logit",
    "sh": "d_sh",
}


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    lrs: LearningRates = field(default_factory=LearningRates)
    structure_version: int = 0

    @classmethod
    def for_set(cls, gs: GaussianSet, lrs: LearningRates | None = None, **kw) -> "AdamState":
        st = cls(lrs=lrs or LearningRates(), **kw)
        for name in PARAM_GROUPS:
            arr = getattr(gs, name)
            st.m[name] = np.zeros_like(arr)
            st.v[name] = np.zeros_like(arr)
        st.structure_version = gs.structure_version
        return st

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.m.values()) + sum(a.nbytes for a in self.v.values())

    def append_rows(self, k: int) -> None:
        """Zero-initialized moments for k new rows; caller bumps versions."""
        for name in PARAM_GROUPS:
            pad = np.zeros((k,) + self.m[name].shape[1:], dtype=self.m[name].dtype)
            self.m[name] = np.concatenate([self.m[name], pad])
            self.v[name] = np.concatenate([self.v[name], pad])
        self.structure_version += 1

    def filter_rows(self, mask: np.ndarray) -> None:
        for name in PARAM_GROUPS:
            self.m[name] = self.m[name][mask]
            self.v[name] = self.v[name][mask]
        self.structure_version += 1

    def check_aligned(self, gs: GaussianSet) -> None:
        if self.structure_version != gs.structure_version:
            raise AlignmentError(
                f"optimizer state v{self.structure_version} vs set v{gs.structure_version}"
            )
        if len(self.m["positions"]) != len(gs):
            raise AlignmentError(
                f"{len(self.m['positions'])} moment rows vs {len(gs)} parameter rows"
            )

    def group_lr(self, name: str) -> float:
        if name == "positions":
            return self.lrs.position_lr(self.step_count)
        return {
            "rotations": self.lrs.rotation,
            "log_scales": self.lrs.scale,
            "opacity_logits": self.lrs.opacity,
        }.get(name, 0.0)

    def step(self, gs: GaussianSet, grads: GradientBundle) -> None:
        """One bias-corrected Adam update; renormalizes quaternions after."""
        self.check_aligned(gs)
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for name in PARAM_GROUPS:
            param = getattr(gs, name)
            g = getattr(grads, _GRAD_OF[name]).astype(param.dtype, copy=False)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if name == "sh":
                # DC and higher bands carry different rates.
                lr_k = np.full(param.shape[2], self.lrs.sh_rest, dtype=param.dtype)
                lr_k[0] = self.lrs.sh_dc
                param -= lr_k * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            else:
                lr = self.group_lr(name)
                param -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        gs.normalize_rotations()
        gs.step_version += 1


def reset_opacity(
    gs: GaussianSet,
    state: AdamState,
    o_reset: float = 0.01,
    reset_position_moments: bool = False,
) -> None:
    """Clamp every opacity to at most o_reset and zero the opacity moments.

    Positions are untouched; `reset_position_moments` additionally clears the
    position Adam state (the mildest reading of a combined opacity+position
    reset).
    """
    state.check_aligned(gs)
    o = gs.opacities()
    target = np.minimum(o, o_reset)
    gs.opacity_logits = inverse_sigmoid(target).astype(gs.dtype)
    state.m["opacity_logits"][:] = 0
    state.v["opacity_logits"][:] = 0
    if reset_position_moments:
        state.m["positions"][:] = 0
        state.v["positions"][:] = 0
    gs.step_version += 1
