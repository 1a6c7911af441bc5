"""Multi-view scene fitting with per-view camera residuals, and camera registration.

The objective for a view is::

    mean((I_gen - rgb)^2) + lambda_mask * mean((I_m - mask)^2) + lambda_cam * |dc|^2

where means run over the selected pixels (and colour channels) and ``dc`` is
the view's camera residual with its principal offsets divided by the focal
length.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .camera import (CameraResidual, OrbitCamera, RayBundle, apply_camera_residual, generate_rays,
                     generate_rays_backward, residual_scale)
from .errors import DivergenceError, InvalidInputError, InvalidStateError
from .render import RenderPass, background_grads, render_image
from .scene import Scene, equal_budget_resolution, init_scene

log = logging.getLogger(__name__)


@dataclass
class TrainView:
    rgb: np.ndarray
    mask: np.ndarray
    camera: OrbitCamera
    view_id: str = ""
    residual: CameraResidual = field(default_factory=CameraResidual)

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        size = (self.camera.height, self.camera.width)
        if self.rgb.shape[:2] != size or self.mask.shape != size:
            raise InvalidInputError(f"view rasters must be {size}; got {self.rgb.shape}, {self.mask.shape}")
        if self.mask.min() < 0 or self.mask.max() > 1:
            raise InvalidInputError("target mask must lie in [0, 1]")

    @property
    def is_back(self):
        return is_back_yaw(self.camera.yaw)


def is_back_yaw(yaw):
    """Back-view split rule |yaw| >= 90 deg, with yaw wrapped to (-pi, pi]."""
    wrapped = (yaw + np.pi) % (2 * np.pi) - np.pi
    if np.isclose(wrapped, -np.pi):
        wrapped = np.pi
    return abs(wrapped) >= np.pi / 2 - 1e-12


GAUGE = [0, 2]  # residual components (yaw, radius) whose across-view mean is unobservable


@dataclass
class FitConfig:
    iterations: int = 1500
    lr_scene: float = 1e-2
    lr_residual: float = 2e-3  # yaw, pitch, radius
    lr_residual_px: float = 1e-1  # cx, cy (pixels)
    lambda_mask: float = 1.0
    lambda_cam: float = 0.05
    samples_per_ray: int = 32
    batch_pixels: int = 1024
    seed: int = 0
    residuals: bool = True
    optimizer: str = "adam"  # or "momentum"
    momentum: float = 0.9
    jitter: bool = True
    residual_start: int = 100  # iteration at which residuals start to move
    lr_decay: float = 0.3  # final lr as a fraction of the initial one (exponential schedule)
    workers: int = 1
    precision: str = "float32"  # arithmetic of training renders; "float64" for gradient checks
    fix_gauge: bool = True  # keep the across-view mean of the yaw and radius residuals at zero

    def __post_init__(self):
        if self.iterations < 0:
            raise InvalidInputError("iterations must be >= 0")
        if min(self.lr_scene, self.lr_residual, self.lr_residual_px, self.lambda_mask) <= 0:
            raise InvalidInputError("learning rates and lambda_mask must be positive")
        if self.lambda_cam < 0:
            raise InvalidInputError("lambda_cam must be >= 0")
        if self.optimizer not in ("adam", "momentum"):
            raise InvalidInputError(f"unknown optimizer {self.optimizer!r}")
        if self.precision not in ("float32", "float64"):
            raise InvalidInputError(f"precision must be float32 or float64; got {self.precision!r}")
        if self.samples_per_ray < 2 or self.batch_pixels < 1:
            raise InvalidInputError("need samples_per_ray >= 2 and batch_pixels >= 1")


@dataclass
class FitReport:
    losses: list = field(default_factory=list)
    psnr: dict = field(default_factory=dict)
    mask_mse: float = float("nan")
    residuals: dict = field(default_factory=dict)

    def to_json(self, path=None):
        payload = {"losses": [float(x) for x in self.losses],
                   "psnr": {k: float(v) for k, v in self.psnr.items()},
                   "mask_mse": float(self.mask_mse),
                   "residuals": {k: [float(x) for x in v] for k, v in self.residuals.items()}}
        text = json.dumps(payload, indent=2)
        if path is not None:
            with open(path, "w") as f:
                f.write(text + "\n")
        return text

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(d["losses"], d["psnr"], d["mask_mse"], d["residuals"])


def psnr(a, b):
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)


# ---------------------------------------------------------------- objective


def _batch_loss_and_grads(scene, views, residuals, view_idx, pixels, config, jitter_seed,
                          with_camera=True):
    """Loss and gradients for pixels drawn from several views.

    ``view_idx``/``pixels`` pick the rays; the loss averages over all of them.
    Returns ``(loss, scene_grads, residual_grads (V, 5))``.
    """
    H, W = scene.image_size
    order = np.argsort(view_idx, kind="stable")
    view_idx, pixels = view_idx[order], pixels[order]
    used = np.unique(view_idx)
    cams, parts, targets_rgb, targets_m = {}, [], [], []
    for v in used:
        sel = pixels[view_idx == v]
        cam = views[v].camera
        if residuals is not None:
            cam = apply_camera_residual(cam, residuals[v])
        cams[v] = cam
        rb = generate_rays(cam, sel)
        rb.pixels = v * H * W + sel  # jitter key unique per (view, pixel)
        parts.append(rb)
        targets_rgb.append(views[v].rgb.reshape(-1, 3)[sel])
        targets_m.append(views[v].mask.reshape(-1)[sel])
    rays = RayBundle(*(np.concatenate([getattr(p, f) for p in parts])
                       for f in ("origins", "directions", "t_near", "t_far", "pixels")))
    rgb_t = np.concatenate(targets_rgb)
    m_t = np.concatenate(targets_m)

    need_cam = with_camera and residuals is not None
    rp = RenderPass(scene, rays, config.samples_per_ray, config.jitter, jitter_seed,
                    point_grads=need_cam, workers=config.workers, dtype=np.dtype(config.precision))
    out = rp.output
    bg = scene.background.image.reshape(-1, 3)[pixels]
    gen = (1.0 - out.mask)[:, None] * bg + out.raw
    n = len(pixels)
    diff = gen - rgb_t
    mdiff = out.mask - m_t
    loss = np.mean(diff ** 2) + config.lambda_mask * np.mean(mdiff ** 2)
    g_gen = 2.0 * diff / diff.size
    g_mask = -np.sum(g_gen * bg, axis=1) + config.lambda_mask * 2.0 * mdiff / n
    grads, g_o, g_d = rp.backward(g_gen, g_mask)
    grads["background"] = background_grads(scene, pixels, g_gen * (1.0 - out.mask)[:, None])

    res_grads = None
    if residuals is not None:
        # penalty averaged over all views, matching the pixel-averaged photometric term;
        # principal offsets enter in focal-length units so pixels do not swamp radians
        r = np.stack([res.as_array() for res in residuals])
        s2 = np.stack([residual_scale(v.camera) for v in views]) ** 2
        loss += config.lambda_cam * float(np.sum(s2 * r * r)) / len(views)
        res_grads = 2.0 * config.lambda_cam * s2 * r / len(views)
        if need_cam:
            start = 0
            for v, part in zip(used, parts):
                sl = slice(start, start + len(part))
                start += len(part)
                res_grads[v] += generate_rays_backward(cams[v], pixels[sl], g_o[sl], g_d[sl])
    if not np.isfinite(loss):
        raise InvalidStateError("non-finite loss")
    return float(loss), grads, res_grads


def loss_and_grads(scene: Scene, view: TrainView, config: FitConfig, residual: CameraResidual | None = None,
                   pixels=None):
    """Single-view objective and its gradients.

    Returns ``(loss, grads)``; ``grads`` maps every scene parameter name to its
    gradient and, when a residual is given, ``'residual'`` to a length-5 array.
    """
    H, W = scene.image_size
    if pixels is None:
        pixels = np.arange(H * W)
    pixels = np.asarray(pixels, dtype=np.int64)
    view_idx = np.zeros(len(pixels), dtype=np.int64)
    residuals = None if residual is None else [residual]
    cfg = config
    loss, grads, res_grads = _batch_loss_and_grads(scene, [view], residuals, view_idx, pixels, cfg,
                                                   cfg.seed)
    if residual is not None:
        grads["residual"] = res_grads[0]
    return loss, grads


# ---------------------------------------------------------------- optimizer


class _Optimizer:
    """Adam or heavy-ball momentum over named arrays, updated in place."""

    def __init__(self, kind, momentum=0.9, beta2=0.999, eps=1e-8):
        self.kind = kind
        self.momentum = momentum
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def step(self, name, param, grad, lr):
        if name not in self.m:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.t[name] = 0
        self.t[name] += 1
        m = self.m[name]
        if self.kind == "momentum":
            m *= self.momentum
            m += grad
            param -= lr * m
            return
        b1, b2 = self.momentum, self.beta2
        m *= b1
        m += (1 - b1) * grad
        v = self.v[name]
        v *= b2
        v += (1 - b2) * grad * grad
        t = self.t[name]
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        param -= lr * mhat / (np.sqrt(vhat) + self.eps)


def fit_scene(views, config: FitConfig, scene: Scene | None = None, residuals=None, progress=None):
    """Fit a scene (and, optionally, per-view camera residuals) to training views.

    Returns ``(scene, residuals, report)``.  The input scene is not modified.
    Deterministic for a fixed config (including ``workers``).
    """
    if len(views) < 1:
        raise InvalidInputError("need at least one view")
    if scene is None:
        H, W = views[0].rgb.shape[:2]
        scene = init_scene(image_size=(H, W), seed=config.seed)
    scene = scene.copy()
    H, W = scene.image_size
    for v in views:
        if v.rgb.shape[:2] != (H, W):
            raise InvalidInputError("view size does not match scene background resolution")
    if residuals is None:
        residuals = [CameraResidual() for _ in views]
    res_arr = np.stack([r.as_array() for r in residuals])
    use_res = config.residuals
    opt = _Optimizer(config.optimizer, config.momentum)
    rng = np.random.default_rng(config.seed)
    params = scene.parameters()
    report = FitReport()
    n_views = len(views)
    total = n_views * H * W
    decay = config.lr_decay ** (1.0 / max(config.iterations, 1))
    lr_res = np.array([config.lr_residual] * 3 + [config.lr_residual_px] * 2)

    for it in range(config.iterations):
        flat = rng.choice(total, size=min(config.batch_pixels, total), replace=False)
        view_idx, pixels = np.divmod(flat, H * W)
        res_objs = [CameraResidual.from_array(r) for r in res_arr] if use_res else None
        train_cam = use_res and it >= config.residual_start
        jitter_seed = int(rng.integers(2 ** 62))
        try:
            loss, grads, res_grads = _batch_loss_and_grads(scene, views, res_objs, view_idx, pixels, config,
                                                           jitter_seed, with_camera=train_cam)
        except InvalidStateError as exc:
            raise DivergenceError(str(exc), last_good_iteration=it - 1,
                                  diagnostics={"iteration": it}) from exc
        report.losses.append(loss)
        lr_scale = decay ** it
        for name, p in params.items():
            opt.step(name, p, grads[name], config.lr_scene * lr_scale)
        if train_cam:
            opt.step("residual", res_arr, res_grads, lr_res * lr_scale)
            if config.fix_gauge and n_views > 1:
                # a common yaw turns the scene, a common radius rescales it: neither is observable
                res_arr[:, GAUGE] -= res_arr[:, GAUGE].mean(axis=0)
            if np.any(res_arr[:, 2] + np.array([v.camera.radius for v in views]) <= 0):
                raise DivergenceError("residual drove a camera radius non-positive", it)
        if progress is not None:
            progress(it, loss)
        if it % 200 == 0:
            log.debug("iter %d loss %.6f", it, loss)

    residuals = [CameraResidual.from_array(r) for r in res_arr]
    evaluate_views(scene, views, config, residuals if use_res else None, report)
    return scene, residuals, report


def evaluate_views(scene, views, config, residuals=None, report=None):
    """Full-frame PSNR of the composite and mask MSE, keyed by view id."""
    report = report or FitReport()
    mask_err = []
    for i, v in enumerate(views):
        cam = v.camera if residuals is None else apply_camera_residual(v.camera, residuals[i])
        out = render_image(scene, cam, config.samples_per_ray, workers=config.workers)
        key = v.view_id or str(i)
        report.psnr[key] = psnr(out.composite, v.rgb)
        mask_err.append(np.mean((out.mask - v.mask) ** 2))
        if residuals is not None:
            report.residuals[key] = list(residuals[i].as_array())
    report.mask_mse = float(np.mean(mask_err)) if mask_err else float("nan")
    return report


# ---------------------------------------------------------------- ablation


def ablate_representation(train_views, heldout_views, config: FitConfig, depth=3, resolution=16, channels=16,
                          hidden=(64,), equal_budget=True):
    """Fit tri-plane (D=1) and tri-grid (D=depth) scenes under identical budgets.

    With ``equal_budget`` the tri-plane gets a larger in-plane resolution so the
    two representations hold about the same number of feature values.  Returns
    a table ``{'D=1': {...}, 'D=3': {...}}`` with front/back held-out PSNR and
    parameter counts.
    """
    front = [v for v in heldout_views if not v.is_back]
    back = [v for v in heldout_views if v.is_back]
    if not front or not back:
        raise InvalidInputError("held-out views must include both front and back cameras")
    H, W = train_views[0].rgb.shape[:2]
    table = {}
    for d in (1, depth):
        res = resolution
        if equal_budget and d == 1:
            res = equal_budget_resolution(resolution, depth)
        init = init_scene(depth=d, resolution=res, channels=channels, hidden=hidden, image_size=(H, W),
                          seed=config.seed)
        scene, residuals, report = fit_scene(train_views, config, init)
        ev_front = evaluate_views(scene, front, config)
        ev_back = evaluate_views(scene, back, config)
        table[f"D={d}"] = {
            "front_psnr": float(np.mean(list(ev_front.psnr.values()))),
            "back_psnr": float(np.mean(list(ev_back.psnr.values()))),
            "params": int(scene.n_params()),
            "trigrid_params": int(scene.n_params("trigrid")),
            "resolution": res,
        }
        table[f"D={d}"]["_scene"] = scene
    return table


def format_table(table):
    keys = [k for k in table]
    lines = [f"{'':6s} {'front PSNR':>11s} {'back PSNR':>10s} {'params':>9s}"]
    for k in keys:
        row = table[k]
        lines.append(f"{k:6s} {row['front_psnr']:11.2f} {row['back_psnr']:10.2f} {row['params']:9d}")
    return "\n".join(lines)


# ---------------------------------------------------------------- registration


@dataclass
class Registration:
    camera: OrbitCamera
    loss: float
    losses: list
    accepted: int


def _registration_loss(scene, cam, target, n_samples, with_grad):
    rays = generate_rays(cam)
    rp = RenderPass(scene, rays, n_samples, point_grads=with_grad)
    out = rp.output
    bg = scene.background.image.reshape(-1, 3)
    gen = (1.0 - out.mask)[:, None] * bg + out.raw
    diff = gen - target.reshape(-1, 3)
    loss = float(np.mean(diff ** 2))
    if not np.isfinite(loss):
        raise InvalidStateError("non-finite registration loss")
    if not with_grad:
        return loss, None
    g_gen = 2.0 * diff / diff.size
    g_mask = -np.sum(g_gen * bg, axis=1)
    _, g_o, g_d = rp.backward(g_gen, g_mask)
    return loss, generate_rays_backward(cam, rays.pixels, g_o, g_d)


def register_camera(scene: Scene, target_rgb, initial: OrbitCamera, iterations=60, step=0.05,
                    n_samples=32, tol=1e-10) -> Registration:
    """Refine (yaw, pitch, radius, cx, cy) so the composite matches ``target_rgb``.

    Gradient descent with step acceptance: a step is kept only if the loss does
    not increase, otherwise the step size is halved.  Principal offsets are
    optimized in focal-length units so all five coordinates share one step size.
    """
    target_rgb = np.asarray(target_rgb, dtype=np.float64)
    if target_rgb.shape[:2] != (initial.height, initial.width):
        raise InvalidInputError("target size does not match camera")
    scale = np.array([1.0, 1.0, 1.0, initial.focal, initial.focal])
    cam = initial
    try:
        loss, grad = _registration_loss(scene, cam, target_rgb, n_samples, True)
    except InvalidStateError as exc:
        raise DivergenceError(str(exc), -1, {"camera": initial.to_dict()}) from exc
    losses = [loss]
    accepted = 0
    for it in range(iterations):
        g = grad * scale  # gradient in normalized coordinates
        gnorm = np.linalg.norm(g)
        if gnorm < tol:
            break
        moved = False
        while step > 1e-8:
            delta = -step * g / gnorm / scale
            try:
                trial = apply_camera_residual(cam, CameraResidual.from_array(delta))
                t_loss, t_grad = _registration_loss(scene, trial, target_rgb, n_samples, True)
            except InvalidStateError:
                step *= 0.5
                continue
            if t_loss <= loss:
                cam, loss, grad = trial, t_loss, t_grad
                losses.append(loss)
                accepted += 1
                step *= 1.5
                moved = True
                break
            step *= 0.5
        if not moved:
            break
    return Registration(cam, loss, losses, accepted)
