"""Differentiable volume rendering of a :class:`~trigrid.scene.Scene`.

Quadrature is classic alpha compositing with density held constant on each
segment::

    alpha_i = 1 - exp(-sigma_i * delta_i)
    T_i     = prod_{j<i} (1 - alpha_j)
    w_i     = T_i * alpha_i
    raw     = sum_i w_i * f_i        mask = sum_i w_i

so ``mask = 1 - T_{n+1}`` holds exactly.  The composite is
``(1 - mask) * background + raw``.

Large ray sets are processed in fixed-size chunks.  Gradients are accumulated
chunk by chunk in chunk order, so results do not depend on the worker count.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .camera import OrbitCamera, Ray, RayBundle, generate_rays, generate_rays_backward
from .errors import InvalidInputError, InvalidStateError
from .scene import Interpolator, Scene, _decode_backward_cached, _decode_forward

CHUNK_RAYS = 2048


# ---------------------------------------------------------------- sampling


def _splitmix64(x):
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def counter_uniform(seed, ray_ids, sample_ids):
    """Uniform [0, 1) draws keyed by (seed, ray id, sample id); order independent."""
    with np.errstate(over="ignore"):
        s = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
        r = _splitmix64(np.asarray(ray_ids, dtype=np.uint64)[:, None] ^ s)
        h = _splitmix64(r ^ np.asarray(sample_ids, dtype=np.uint64)[None, :])
    return (h >> np.uint64(11)).astype(np.float64) * 2.0 ** -53


def stratified_samples(rays, n, jitter=False, seed=0):
    """Sample depths and segment lengths along rays.

    ``[t_near, t_far]`` is split into ``n`` equal bins; samples sit at bin
    midpoints, or uniformly inside each bin with ``jitter``.  ``delta_i =
    t_{i+1} - t_i`` and the last segment gets the bin width.  Accepts a single
    :class:`Ray` (returns 1-D arrays) or a :class:`RayBundle` (``(R, n)``).
    """
    if n < 2:
        raise InvalidInputError(f"need at least 2 samples per ray; got {n}")
    single = isinstance(rays, Ray)
    if single:
        t_near = np.array([rays.t_near], dtype=np.float64)
        t_far = np.array([rays.t_far], dtype=np.float64)
        ids = np.zeros(1, dtype=np.int64)
    else:
        t_near, t_far, ids = rays.t_near, rays.t_far, rays.pixels
    if np.any(~(t_near < t_far)):
        raise InvalidInputError("every ray needs t_near < t_far")
    width = (t_far - t_near) / n
    if jitter:
        u = counter_uniform(seed, ids, np.arange(n))
    else:
        u = np.full((len(t_near), n), 0.5)
    t = t_near[:, None] + (np.arange(n)[None, :] + u) * width[:, None]
    delta = np.empty_like(t)
    delta[:, :-1] = np.diff(t, axis=1)
    delta[:, -1] = width
    if single:
        return t[0], delta[0]
    return t, delta


# ---------------------------------------------------------------- quadrature


def composite_weights(sigma, delta):
    """Per-sample weights and final transmittance for densities ``(R, S)``."""
    tau = sigma * delta
    cum = np.cumsum(tau, axis=1)
    trans = np.exp(-(cum - tau))
    weights = trans * -np.expm1(-tau)
    return weights, np.exp(-cum[:, -1])


@dataclass
class RenderOutput:
    """Render results.  Per-ray arrays for ray bundles, images for cameras.

    ``raw`` is the radiance image I^r, ``mask`` the opacity I^m, ``composite``
    I^gen (only when a background was composited), ``depth`` the expected depth.
    """

    raw: np.ndarray
    mask: np.ndarray
    depth: np.ndarray | None = None
    composite: np.ndarray | None = None
    transmittance: np.ndarray | None = None


class _ChunkPass:
    """Forward pass over one ray chunk, keeping what the backward pass needs."""

    def __init__(self, scene, rays, n_samples, jitter, seed, point_grads, dtype):
        t, delta = stratified_samples(rays, n_samples, jitter, seed)
        R, S = t.shape
        pts = rays.origins[:, None, :] + t[:, :, None] * rays.directions[:, None, :]
        self.interp = Interpolator(scene.trigrid, pts.reshape(-1, 3), point_grads=point_grads, dtype=dtype)
        feats = self.interp.forward()
        sigma, rad, self.dec_cache = _decode_forward(scene.decoder, feats, dtype)
        if not np.all(np.isfinite(sigma)):
            raise InvalidStateError("decoder produced non-finite density")
        sigma = sigma.reshape(R, S)
        rad = rad.reshape(R, S, -1)
        w, t_final = composite_weights(sigma, delta)
        self.t, self.delta, self.sigma, self.rad, self.w = t, delta, sigma, rad, w
        self.raw = np.einsum("rs,rsk->rk", w, rad).astype(np.float64)
        self.mask = w.sum(axis=1).astype(np.float64)
        self.depth = np.sum(w * t, axis=1).astype(np.float64)
        self.t_final = t_final.astype(np.float64)

    def backward(self, scene, g_raw, g_mask, g_depth, point_grads):
        R, S = self.t.shape
        g_raw = np.asarray(g_raw, dtype=np.float64)
        g_mask = np.zeros(R) if g_mask is None else np.asarray(g_mask, dtype=np.float64)
        c = np.einsum("rk,rsk->rs", g_raw.astype(self.rad.dtype), self.rad) + g_mask[:, None].astype(self.rad.dtype)
        if g_depth is not None:
            c = c + np.asarray(g_depth, dtype=np.float64)[:, None] * self.t
        cw = c * self.w
        # sum_{i>k} c_i w_i
        tail = np.cumsum(cw[:, ::-1], axis=1)[:, ::-1] - cw
        t_after = np.exp(-np.cumsum(self.sigma * self.delta, axis=1))
        g_tau = c * t_after - tail
        g_sigma = (g_tau * self.delta).reshape(-1)
        g_rad = (self.w[:, :, None] * g_raw[:, None, :]).reshape(R * S, -1)
        dec_grads, g_feat = _decode_backward_cached(scene.decoder, self.dec_cache, g_sigma, g_rad)
        plane_grads, g_pts = self.interp.backward(g_feat, point_grads=point_grads)
        grads = {f"planes_{k}": v.astype(np.float64) for k, v in plane_grads.items()}
        for i, (gw, gb) in enumerate(dec_grads):
            grads[f"decoder.w{i}"] = gw.astype(np.float64)
            grads[f"decoder.b{i}"] = gb.astype(np.float64)
        g_o = g_d = None
        if point_grads:
            g_pts = g_pts.astype(np.float64).reshape(R, S, 3)
            g_o = g_pts.sum(axis=1)
            g_d = np.einsum("rs,rsk->rk", self.t, g_pts)
        return grads, g_o, g_d


def _chunks(n, size=CHUNK_RAYS):
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def _map(fn, items, workers):
    if workers and workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


class RenderPass:
    """Forward render of a ray bundle with a matching reverse-mode pass.

    Use :func:`volume_render` / :func:`volume_render_backward` for one-shot
    calls; the fitter keeps the pass object to avoid recomputing the forward.
    """

    def __init__(self, scene: Scene, rays: RayBundle, n_samples=48, jitter=False, seed=0,
                 point_grads=False, workers=1, dtype=np.float64):
        self.scene = scene
        self.rays = rays
        self.point_grads = point_grads
        self.workers = workers
        self.slices = _chunks(len(rays))
        self.passes = _map(lambda sl: _ChunkPass(scene, rays[sl], n_samples, jitter, seed, point_grads, dtype),
                           self.slices, workers)
        k = scene.decoder.out_channels
        cat = (lambda name, shape: np.concatenate([getattr(p, name) for p in self.passes])
               if self.passes else np.zeros(shape))
        self.output = RenderOutput(raw=cat("raw", (0, k)), mask=cat("mask", (0,)), depth=cat("depth", (0,)),
                                   transmittance=cat("t_final", (0,)))

    def backward(self, g_raw, g_mask=None, g_depth=None):
        """Return ``(scene grads, g_origins, g_directions)``; ray grads are None without point_grads."""
        n = len(self.rays)
        k = self.scene.decoder.out_channels
        g_raw = np.asarray(g_raw, dtype=np.float64).reshape(n, k)
        if g_mask is not None:
            g_mask = np.asarray(g_mask, dtype=np.float64).reshape(n)
        if g_depth is not None:
            g_depth = np.asarray(g_depth, dtype=np.float64).reshape(n)

        def run(args):
            sl, p = args
            return p.backward(self.scene, g_raw[sl], None if g_mask is None else g_mask[sl],
                              None if g_depth is None else g_depth[sl], self.point_grads)

        results = _map(run, list(zip(self.slices, self.passes)), self.workers)
        grads = {}
        for chunk_grads, _, _ in results:  # fixed chunk order
            for name, g in chunk_grads.items():
                if name in grads:
                    grads[name] += g
                else:
                    grads[name] = g.copy()
        if not results:
            grads = {name: np.zeros_like(p) for name, p in self.scene.parameters().items()
                     if name != "background"}
        g_o = g_d = None
        if self.point_grads:
            g_o = np.concatenate([r[1] for r in results]) if results else np.zeros((0, 3))
            g_d = np.concatenate([r[2] for r in results]) if results else np.zeros((0, 3))
        return grads, g_o, g_d


def volume_render(scene: Scene, rays: RayBundle, n_samples=48, jitter=False, seed=0, workers=1) -> RenderOutput:
    """Per-ray radiance ``raw (N, k)``, opacity ``mask (N,)`` and expected depth."""
    return RenderPass(scene, rays, n_samples, jitter, seed, workers=workers).output


def volume_render_backward(scene: Scene, rays: RayBundle, g_raw, g_mask=None, n_samples=48, jitter=False,
                           seed=0, camera: OrbitCamera | None = None, workers=1):
    """Gradients of ``sum(g_raw * raw) + sum(g_mask * mask)``.

    Returns ``(scene_grads, camera_grad)``.  ``scene_grads`` covers the trigrid
    and decoder (the background is not part of the volume render).  When
    ``camera`` is given (the camera that produced ``rays``) the gradient is
    chained through ray origins, directions and sample positions to
    ``(yaw, pitch, radius, cx, cy)``; otherwise ``camera_grad`` is None.
    """
    rp = RenderPass(scene, rays, n_samples, jitter, seed, point_grads=camera is not None, workers=workers)
    grads, g_o, g_d = rp.backward(g_raw, g_mask)
    cam_grad = None
    if camera is not None:
        cam_grad = generate_rays_backward(camera, rays.pixels, g_o, g_d)
    return grads, cam_grad


# ---------------------------------------------------------------- image-space ops


def composite(raw, mask, background):
    """``(1 - mask) * background + raw`` per pixel and channel."""
    raw = np.asarray(raw, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    if raw.shape != background.shape or raw.shape[:-1] != mask.shape:
        raise InvalidInputError(
            f"composite shapes disagree: raw {raw.shape}, mask {mask.shape}, background {background.shape}")
    return (1.0 - mask)[..., None] * background + raw


def _upsample_axis(n, factor):
    x = (np.arange(n * factor) + 0.5) / factor - 0.5
    x = np.clip(x, 0.0, n - 1)
    i0 = np.minimum(np.floor(x).astype(np.int64), max(n - 2, 0))
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, x - i0


def bilinear_upsample(image, factor):
    """Bilinear upsampling by an integer factor, half-pixel (align_corners=False) convention."""
    if int(factor) != factor or factor < 1:
        raise InvalidInputError(f"upsampling factor must be an integer >= 1; got {factor}")
    factor = int(factor)
    image = np.asarray(image, dtype=np.float64)
    if factor == 1:
        return image.copy()
    H, W = image.shape[:2]
    r0, r1, fr = _upsample_axis(H, factor)
    c0, c1, fc = _upsample_axis(W, factor)
    extra = (None,) * (image.ndim - 2)
    fr = fr[(slice(None), None) + extra]
    fc = fc[(None, slice(None)) + extra]
    top = image[r0][:, c0] * (1 - fc) + image[r0][:, c1] * fc
    bottom = image[r1][:, c0] * (1 - fc) + image[r1][:, c1] * fc
    return top * (1 - fr) + bottom * fr


@dataclass
class DiscriminatorInput:
    """7-channel raster: upsampled RGB (0-2), high-resolution RGB (3-5), upsampled mask (6)."""

    raster: np.ndarray

    @property
    def rgb_up(self):
        return self.raster[..., 0:3]

    @property
    def rgb_high(self):
        return self.raster[..., 3:6]

    @property
    def mask_up(self):
        return self.raster[..., 6]


def assemble_discriminator_input(I_up, I_plus, mask_up) -> DiscriminatorInput:
    I_up = np.asarray(I_up)
    I_plus = np.asarray(I_plus)
    mask_up = np.asarray(mask_up)
    if mask_up.ndim == 3 and mask_up.shape[2] == 1:
        mask_up = mask_up[..., 0]
    if I_up.ndim != 3 or I_up.shape[2] != 3 or I_plus.ndim != 3 or I_plus.shape[2] != 3:
        raise InvalidInputError("RGB inputs must be (H, W, 3)")
    if not (I_up.shape[:2] == I_plus.shape[:2] == mask_up.shape):
        raise InvalidInputError(
            f"spatial sizes differ: {I_up.shape[:2]}, {I_plus.shape[:2]}, {mask_up.shape}")
    dtype = np.result_type(I_up, I_plus, mask_up)
    raster = np.concatenate([I_up.astype(dtype, copy=False), I_plus.astype(dtype, copy=False),
                             mask_up[..., None].astype(dtype, copy=False)], axis=2)
    return DiscriminatorInput(raster)


# ---------------------------------------------------------------- whole-image helpers


def render_image(scene: Scene, cam: OrbitCamera, n_samples=48, background=None, jitter=False, seed=0,
                 workers=1) -> RenderOutput:
    """Render a full camera image and composite it over ``background``.

    ``background`` defaults to the scene's learned raster, bilinearly upsampled
    when the camera resolution is an integer multiple of it.
    """
    rays = generate_rays(cam)
    out = volume_render(scene, rays, n_samples, jitter, seed, workers)
    H, W = cam.height, cam.width
    raw = out.raw.reshape(H, W, -1)
    mask = out.mask.reshape(H, W)
    if background is None:
        background = scene_background(scene, H, W)
    comp = composite(raw, mask, background)
    return RenderOutput(raw=raw, mask=mask, depth=out.depth.reshape(H, W), composite=comp,
                        transmittance=out.transmittance.reshape(H, W))


def scene_background(scene, height, width):
    bg = scene.background.image
    h, w = bg.shape[:2]
    if (height, width) == (h, w):
        return bg
    if height % h or width % w or height // h != width // w:
        raise InvalidInputError(f"cannot map {h}x{w} background onto {height}x{width} image")
    return bilinear_upsample(bg, height // h)


def render_discriminator_input(scene: Scene, cam: OrbitCamera, factor=2, n_samples=48, workers=1):
    """Build the 7-channel raster for a camera at raw resolution.

    The high-resolution image is a direct render at ``factor`` times the raw
    resolution, composited over the upsampled background.
    """
    low = render_image(scene, cam, n_samples, workers=workers)
    high = render_image(scene, cam.scaled(factor), n_samples, workers=workers)
    return assemble_discriminator_input(bilinear_upsample(low.composite, factor), high.composite,
                                        bilinear_upsample(low.mask, factor))


def background_grads(scene, pixels, g_bg_values):
    """Scatter gradients w.r.t. background values at flat ``pixels`` into parameter space."""
    bg = scene.background
    H, W, k = bg.shape
    flat = bg.params.reshape(-1, k)
    s = expit(flat[pixels])
    g = np.zeros((H * W, k))
    np.add.at(g, pixels, g_bg_values * s * (1.0 - s))
    return g.reshape(H, W, k)
