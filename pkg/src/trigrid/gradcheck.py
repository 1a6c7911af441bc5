"""Central finite-difference checks for every optimized parameter group."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraResidual, OrbitCamera
from .fitting import FitConfig, TrainView, loss_and_grads
from .scene import init_scene

GROUPS = ("trigrid", "decoder", "background", "residual")
# the loss is piecewise smooth in trigrid/decoder/camera values (ReLU, cell
# boundaries), so those get a small step; it is smooth in the background
STEPS = {"trigrid": 1e-6, "decoder": 1e-6, "background": 1e-4, "residual": 1e-6}


def relative_error(analytic, numeric):
    """``|a - n| / max(|a|, |n|)`` over a vector (0 when both vanish)."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom)


def numeric_gradient(f, x, idx, h):
    """Central differences of scalar ``f()`` w.r.t. entries ``idx`` of array ``x`` (mutated and restored)."""
    out = np.empty(len(idx))
    flat = x.reshape(-1)
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2 * h)
    return out


@dataclass
class CheckResult:
    group: str
    depth: int
    rel_error: float
    n_entries: int
    tol: float

    @property
    def passed(self):
        return self.rel_error < self.tol

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} D={self.depth} {self.group:10s} rel_err={self.rel_error:.2e} ({self.n_entries} entries)"


def random_problem(depth, size=8, seed=0, resolution=6, channels=4, hidden=(16,)):
    """Small scene, target view and non-zero residual for gradient checks."""
    rng = np.random.default_rng(seed)
    scene = init_scene(depth=depth, resolution=resolution, channels=channels, hidden=hidden,
                       image_size=(size, size), seed=seed, feature_std=0.5)
    scene.background.params[...] = rng.normal(0.0, 0.5, scene.background.shape)
    # push the density up so the mask is neither empty nor saturated
    scene.decoder.biases[-1][0] = 1.0
    cam = OrbitCamera(yaw=float(rng.uniform(-np.pi, np.pi)), pitch=0.2, radius=2.5, height=size, width=size)
    view = TrainView(rng.uniform(size=(size, size, 3)), (rng.uniform(size=(size, size)) > 0.5).astype(float), cam)
    residual = CameraResidual(0.05, -0.03, 0.1, 0.4, -0.3)
    return scene, view, residual


def check_gradients(depth, seed=0, size=8, steps=None, entries=12, tol=1e-4, n_samples=16, lambda_cam=0.5):
    """Finite-difference check of the full fitting loss for one trigrid depth.

    ``entries`` random coordinates are probed per parameter array; residuals
    are probed in full.
    """
    steps = {**STEPS, **(steps or {})}
    scene, view, residual = random_problem(depth, size, seed)
    cfg = FitConfig(iterations=0, samples_per_ray=n_samples, jitter=False, lambda_cam=lambda_cam,
                    precision="float64")
    _, grads = loss_and_grads(scene, view, cfg, residual)
    rng = np.random.default_rng(seed + 1)
    params = scene.parameters()

    def f():
        return loss_and_grads(scene, view, cfg, residual)[0]

    results = []
    collected = {g: ([], []) for g in GROUPS}
    for name, p in params.items():
        group = "trigrid" if name.startswith("planes") else name.split(".")[0]
        idx = rng.choice(p.size, size=min(entries, p.size), replace=False)
        collected[group][0].append(grads[name].reshape(-1)[idx])
        collected[group][1].append(numeric_gradient(f, p, idx, steps[group]))
    r = residual.as_array()

    def f_res():
        return loss_and_grads(scene, view, cfg, CameraResidual.from_array(r))[0]

    collected["residual"][0].append(grads["residual"])
    collected["residual"][1].append(numeric_gradient(f_res, r, range(5), steps["residual"]))
    for group in GROUPS:
        a = np.concatenate(collected[group][0])
        n = np.concatenate(collected[group][1])
        results.append(CheckResult(group, depth, relative_error(a, n), len(a), tol))
    return results


def run_gradcheck(depths=(1, 3), seed=0, **kwargs):
    results = []
    for d in depths:
        results += check_gradients(d, seed=seed, **kwargs)
    return results
