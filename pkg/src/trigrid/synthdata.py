"""Analytic ground truth: ray-traced ellipsoid "head proxies" with exact masks.

Nothing here calls the volume renderer.  Cameras are rebuilt from a look-at
matrix and an inverse intrinsics matrix so these images are an independent
check on the engine.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .alignment import HeadBox, LandmarkSet
from .camera import OrbitCamera
from .errors import InvalidInputError

LIGHT_DIR = np.array([0.35, 0.55, 0.75]) / np.linalg.norm([0.35, 0.55, 0.75])

# landmark anchors as (x, y) on the front surface, in units of the semi-axes
_LANDMARK_XY = {
    "left_eye": (-0.36, 0.22),
    "right_eye": (0.36, 0.22),
    "nose": (0.0, 0.0),
    "mouth_left": (-0.26, -0.36),
    "mouth_right": (0.26, -0.36),
}


@dataclass(frozen=True)
class ProxyScene:
    semi_axes: tuple = (0.5, 0.72, 0.72)  # deeper than wide, so the silhouette changes with yaw
    albedo: str = "asymmetric"  # or "symmetric"
    background: tuple = (0.2, 0.3, 0.45)
    # head box detector bias: centre shift (fraction of box height, + = down) and enlargement
    box_shift: float = 0.08
    box_scale: float = 1.15

    def __post_init__(self):
        a = np.asarray(self.semi_axes, dtype=float)
        if a.shape != (3,) or np.any(a <= 0) or np.any(a >= 1.0):
            raise InvalidInputError("semi-axes must be positive and inside the [-1, 1] cube")
        if self.albedo not in ("asymmetric", "symmetric"):
            raise InvalidInputError(f"unknown albedo {self.albedo!r}")


def _smoothstep(e0, e1, x):
    t = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return t * t * (3 - 2 * t)


def albedo(proxy: ProxyScene, p):
    """Surface colour at points ``p (N, 3)``.

    Asymmetric: a soft checker face with dark eyes and a red mouth on the front
    (z > 0), diagonal hair stripes on the back.  Symmetric: one flat colour.
    """
    p = np.atleast_2d(p)
    if proxy.albedo == "symmetric":
        return np.tile([0.75, 0.55, 0.4], (len(p), 1))
    x, y, z = p.T
    ax, ay, _ = proxy.semi_axes
    checker = np.sin(np.pi * x / 0.18) * np.sin(np.pi * y / 0.18)
    c = _smoothstep(-0.35, 0.35, checker)[:, None]
    face = (1 - c) * np.array([0.92, 0.72, 0.58]) + c * np.array([0.62, 0.42, 0.32])
    for name in ("left_eye", "right_eye"):
        ex, ey = _LANDMARK_XY[name]
        d2 = ((x - ex * ax) ** 2 + (y - ey * ay) ** 2) / 0.09 ** 2
        face = face + np.exp(-d2)[:, None] * (np.array([0.1, 0.1, 0.15]) - face)
    d2 = ((x / 0.2) ** 2 + ((y + 0.36 * ay) / 0.07) ** 2)
    face = face + np.exp(-d2)[:, None] * (np.array([0.8, 0.15, 0.15]) - face)
    stripes = np.sin(2 * np.pi * (0.8 * x + 0.6 * y) / 0.25)
    s = _smoothstep(-0.3, 0.3, stripes)[:, None]
    hair = (1 - s) * np.array([0.22, 0.13, 0.07]) + s * np.array([0.6, 0.42, 0.22])
    front = _smoothstep(-0.12, 0.12, z)[:, None]
    return front * face + (1 - front) * hair


def _camera_frame(cam: OrbitCamera):
    """Camera centre and world-from-camera rotation (columns: right, up, back)."""
    if cam.roll != 0.0:
        raise InvalidInputError("proxy renderer supports roll-free cameras only")
    centre = np.array([np.cos(cam.pitch) * np.sin(cam.yaw), np.sin(cam.pitch),
                       np.cos(cam.pitch) * np.cos(cam.yaw)]) * cam.radius
    back = centre / np.linalg.norm(centre)
    right = np.cross([0.0, 1.0, 0.0], back)
    right /= np.linalg.norm(right)
    up = np.cross(back, right)
    return centre, np.stack([right, up, back], axis=1)


def _intrinsics(cam: OrbitCamera):
    f = 0.5 * cam.height / np.tan(0.5 * cam.fov_y)
    return np.array([[f, 0.0, 0.5 * cam.width + cam.cx],
                     [0.0, f, 0.5 * cam.height + cam.cy],
                     [0.0, 0.0, 1.0]])


def pixel_rays(cam: OrbitCamera):
    """Unit world directions through every pixel centre, ``(H*W, 3)`` row-major."""
    centre, rot = _camera_frame(cam)
    rows, cols = np.mgrid[0:cam.height, 0:cam.width]
    # image rows grow downward, camera y grows upward, camera looks down -z
    pix = np.stack([cols.ravel() + 0.5, rows.ravel() + 0.5, np.ones(rows.size)])
    k_inv = np.linalg.inv(_intrinsics(cam))
    local = k_inv @ pix
    local = np.stack([local[0], -local[1], -np.ones(rows.size)])
    dirs = (rot @ local).T
    return centre, dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def project(cam: OrbitCamera, points):
    """Pixel coordinates ``(N, 2)`` (x right, y down) of world points."""
    centre, rot = _camera_frame(cam)
    local = (np.atleast_2d(points) - centre) @ rot  # camera coords (right, up, back)
    depth = -local[:, 2]
    k = _intrinsics(cam)
    u = k[0, 0] * local[:, 0] / depth + k[0, 2]
    v = -k[1, 1] * local[:, 1] / depth + k[1, 2]
    return np.stack([u, v], axis=1)


def intersect_ellipsoid(origin, dirs, semi_axes):
    """Nearest positive hit distance per ray, ``inf`` on a miss."""
    inv = 1.0 / np.asarray(semi_axes, dtype=float)
    o = origin * inv
    d = dirs * inv
    a = np.sum(d * d, axis=1)
    b = 2.0 * d @ o
    c = o @ o - 1.0
    disc = b * b - 4 * a * c
    t = np.full(len(dirs), np.inf)
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t_hit = np.where(t0 > 0, t0, t1)
    ok = hit & (t_hit > 0)
    t[ok] = t_hit[ok]
    return t


def render_proxy(proxy: ProxyScene, cam: OrbitCamera):
    """Ray-traced ``(rgb (H, W, 3), mask (H, W))``; mask is the exact binary coverage."""
    centre, dirs = pixel_rays(cam)
    t = intersect_ellipsoid(centre, dirs, proxy.semi_axes)
    hit = np.isfinite(t)
    rgb = np.tile(np.asarray(proxy.background, dtype=float), (len(dirs), 1))
    if np.any(hit):
        p = centre + t[hit, None] * dirs[hit]
        normal = p / np.square(proxy.semi_axes)
        normal /= np.linalg.norm(normal, axis=1, keepdims=True)
        shade = 0.6 + 0.4 * np.clip(normal @ LIGHT_DIR, 0.0, None)
        rgb[hit] = albedo(proxy, p) * shade[:, None]
    return rgb.reshape(cam.height, cam.width, 3), hit.reshape(cam.height, cam.width).astype(np.float64)


# ---------------------------------------------------------------- detector outputs


def landmark_points(proxy: ProxyScene):
    """3-D landmark anchors on the front of the ellipsoid."""
    ax, ay, az = proxy.semi_axes
    pts = {}
    for name, (u, v) in _LANDMARK_XY.items():
        x, y = u * ax, v * ay
        z = az * np.sqrt(max(1.0 - u * u - v * v, 0.0))
        pts[name] = np.array([x, y, z])
    return pts


def synth_landmarks(proxy: ProxyScene, cam: OrbitCamera) -> LandmarkSet:
    pts = landmark_points(proxy)
    names = list(pts)
    uv = project(cam, np.stack([pts[n] for n in names]))
    return LandmarkSet(dict(zip(names, map(tuple, uv))))


def silhouette_box(proxy: ProxyScene, cam: OrbitCamera):
    """Exact image-space bounding box ``(x0, y0, x1, y1)`` of the ellipsoid outline.

    Each extreme image line is where the plane through the camera centre and
    that line is tangent to the ellipsoid.
    """
    centre, rot = _camera_frame(cam)
    right, up, back = rot.T
    fwd = -back
    m = np.diag(np.square(proxy.semi_axes))
    k = _intrinsics(cam)

    def extent(axis):
        al, be = axis @ centre, fwd @ centre
        qa = be * be - fwd @ m @ fwd
        qb = -2 * al * be + 2 * axis @ m @ fwd
        qc = al * al - axis @ m @ axis
        disc = np.sqrt(qb * qb - 4 * qa * qc)
        return np.sort([(-qb - disc) / (2 * qa), (-qb + disc) / (2 * qa)])

    sx = extent(right)
    sy = extent(up)
    x0, x1 = k[0, 0] * sx + k[0, 2]
    y1, y0 = -k[1, 1] * sy + k[1, 2]
    return x0, y0, x1, y1


def synth_head_box(proxy: ProxyScene, cam: OrbitCamera) -> HeadBox:
    """Detector-style head box: silhouette box enlarged and shifted down by fixed ratios."""
    x0, y0, x1, y1 = silhouette_box(proxy, cam)
    w, h = (x1 - x0) * proxy.box_scale, (y1 - y0) * proxy.box_scale
    cx = 0.5 * (x0 + x1)
    cy = 0.5 * (y0 + y1) + proxy.box_shift * (y1 - y0)
    return HeadBox((cx, cy), w, h, "synthetic")


# ---------------------------------------------------------------- datasets


@dataclass
class Record:
    view_id: str
    rgb: np.ndarray
    mask: np.ndarray
    label: OrbitCamera  # camera handed to the fitter (may be noisy)
    truth: OrbitCamera  # camera that produced the pixels
    landmarks: LandmarkSet | None = None
    box: HeadBox | None = None


@dataclass
class DatasetBundle:
    records: list
    seed: int
    meta: dict = field(default_factory=dict)

    def train_views(self):
        from .fitting import TrainView

        return [TrainView(r.rgb, r.mask, r.label, r.view_id) for r in self.records]

    def true_views(self):
        from .fitting import TrainView

        return [TrainView(r.rgb, r.mask, r.truth, r.view_id) for r in self.records]


def make_record(proxy, truth, label=None, view_id="", with_detectors=True):
    rgb, mask = render_proxy(proxy, truth)
    lm = box = None
    if with_detectors:
        wrapped = (truth.yaw + np.pi) % (2 * np.pi) - np.pi
        if abs(wrapped) < np.deg2rad(60):
            lm = synth_landmarks(proxy, truth)
        box = synth_head_box(proxy, truth)
    return Record(view_id, rgb, mask, label or truth, truth, lm, box)


def make_dataset(proxy: ProxyScene, n_views=16, size=64, noise_yaw=0.0, crop_drift=0.0, seed=0,
                 radius=2.7, fov_y=np.deg2rad(40.0), pitch_range=0.3, yaws=None, prefix="view") -> DatasetBundle:
    """Multi-view dataset around the proxy.

    Yaws are stratified-uniform over [0, 2*pi) (one draw per equal sector),
    pitches uniform in ``[-pitch_range, pitch_range]``.  ``noise_yaw`` perturbs
    the *label* yaw by U(-noise_yaw, noise_yaw); ``crop_drift`` shifts the
    *rendered* principal point by U(-crop_drift, crop_drift) pixels per axis
    while the label keeps it at zero.
    """
    if n_views < 2:
        raise InvalidInputError("need at least 2 views")
    if noise_yaw < 0 or crop_drift < 0 or not np.isfinite(noise_yaw) or not np.isfinite(crop_drift):
        raise InvalidInputError("noise magnitudes must be finite and non-negative")
    rng = np.random.default_rng(seed)
    if yaws is None:
        yaws = 2 * np.pi * (np.arange(n_views) + rng.uniform(size=n_views)) / n_views
    else:
        yaws = np.asarray(yaws, dtype=float)
        n_views = len(yaws)
    pitches = rng.uniform(-pitch_range, pitch_range, size=n_views)
    yaw_noise = rng.uniform(-noise_yaw, noise_yaw, size=n_views) if noise_yaw > 0 else np.zeros(n_views)
    drift = rng.uniform(-crop_drift, crop_drift, size=(n_views, 2)) if crop_drift > 0 else np.zeros((n_views, 2))
    records = []
    for i in range(n_views):
        truth = OrbitCamera(yaw=float(yaws[i]), pitch=float(pitches[i]), radius=radius, fov_y=fov_y,
                            cx=float(drift[i, 0]), cy=float(drift[i, 1]), height=size, width=size)
        label = truth.replace(yaw=float(yaws[i] + yaw_noise[i]), cx=0.0, cy=0.0)
        records.append(make_record(proxy, truth, label, f"{prefix}{i:03d}"))
    meta = {"proxy": {"semi_axes": list(proxy.semi_axes), "albedo": proxy.albedo,
                      "background": list(proxy.background)},
            "n_views": n_views, "size": size, "noise_yaw": noise_yaw, "crop_drift": crop_drift}
    return DatasetBundle(records, seed, meta)


def heldout_views(proxy: ProxyScene, yaws, size=64, pitch=0.0, radius=2.7, fov_y=np.deg2rad(40.0),
                  prefix="heldout"):
    """Exact-label views at given yaws (for evaluation)."""
    from .fitting import TrainView

    views = []
    for i, y in enumerate(yaws):
        cam = OrbitCamera(yaw=float(y), pitch=pitch, radius=radius, fov_y=fov_y, height=size, width=size)
        rgb, mask = render_proxy(proxy, cam)
        views.append(TrainView(rgb, mask, cam, f"{prefix}{i:03d}"))
    return views


def dual_detector_samples(proxy: ProxyScene, n, size=64, seed=0, fov_range=(30.0, 45.0), drift=6.0):
    """Frontal images carrying both landmarks and a head box.

    Zoom (field of view) and principal offset vary per image so that crops
    differ in scale and position while the head pose stays frontal.
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        fov = np.deg2rad(rng.uniform(*fov_range))
        cx, cy = rng.uniform(-drift, drift, size=2)
        cam = OrbitCamera(yaw=0.0, pitch=0.0, fov_y=fov, cx=float(cx), cy=float(cy), height=size, width=size)
        out.append((synth_landmarks(proxy, cam), synth_head_box(proxy, cam), cam))
    return out
