import numpy as np
import pytest

from budgetsplat.core_math import dc_from_rgb, inverse_sigmoid, look_at_camera
from budgetsplat.gaussians import make_set


def random_set(rng, n, sh_degree=1, max_opacity=0.88, spread=0.6, scale_range=(0.08, 0.3)):
    """Random Gaussian cloud in a box around the origin.

    Opacities stay below max_opacity so alpha never reaches the clamp, which
    keeps finite differences clean.
    """
    K = (sh_degree + 1) ** 2
    sh = np.zeros((n, 3, K))
    sh[:, :, 0] = dc_from_rgb(rng.uniform(0.15, 0.85, (n, 3)))
    if K > 1:
        sh[:, :, 1:] = rng.normal(0.0, 0.1, (n, 3, K - 1))
    return make_set(
        positions=rng.uniform(-spread, spread, (n, 3)),
        rotations=rng.normal(size=(n, 4)),
        log_scales=np.log(rng.uniform(*scale_range, (n, 3))),
        opacity_logits=inverse_sigmoid(rng.uniform(0.2, max_opacity, n)),
        sh=sh,
    )


def ring_camera(width=24, height=20, eye=(0.2, 0.4, -2.4), focal=None, cam_id=0):
    if focal is None:
        focal = 0.9 * width
    return look_at_camera(eye=eye, target=(0, 0, 0), width=width, height=height,
                          focal=focal, cam_id=cam_id)


def central_difference(f, arr, grad, h=1e-5, floor=1e-8):
    """Max relative error of `grad` against central differences of f()."""
    worst = 0.0
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + h
        fp = f()
        arr[idx] = orig - h
        fm = f()
        arr[idx] = orig
        fd = (fp - fm) / (2.0 * h)
        a = grad[idx]
        worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), floor))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
