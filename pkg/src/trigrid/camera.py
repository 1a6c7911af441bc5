"""Orbit (look-at-origin) pinhole cameras, learnable residuals, and ray generation.

World is y-up.  ``yaw = 0`` puts the camera on +z looking at the origin, so the
front of a head sits at +z.  Pixel ``(row, col)`` has its centre at
``(col + 0.5, row + 0.5)``; the principal point is the image centre shifted by
``(cx, cy)`` pixels.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, InvalidStateError

# half-diagonal of the default [-1, 1]^3 bounds, plus a little slack
_DEFAULT_REACH = 1.8

RESIDUAL_FIELDS = ("yaw", "pitch", "radius", "cx", "cy")


@dataclass(frozen=True)
class OrbitCamera:
    yaw: float
    pitch: float = 0.0
    radius: float = 2.7
    fov_y: float = np.deg2rad(40.0)
    cx: float = 0.0
    cy: float = 0.0
    height: int = 64
    width: int = 64
    near: float | None = None
    far: float | None = None
    roll: float = 0.0

    def __post_init__(self):
        if self.near is None:
            object.__setattr__(self, "near", max(self.radius - _DEFAULT_REACH, 1e-3))
        if self.far is None:
            object.__setattr__(self, "far", self.radius + _DEFAULT_REACH)
        vals = [self.yaw, self.pitch, self.radius, self.fov_y, self.cx, self.cy, self.near, self.far, self.roll]
        if not all(np.isfinite(v) for v in vals):
            raise InvalidInputError("camera fields must be finite")
        if self.radius <= 0:
            raise InvalidStateError(f"camera radius must be positive; got {self.radius}")
        if not 0 < self.fov_y < np.pi:
            raise InvalidInputError(f"fov_y must lie in (0, pi); got {self.fov_y}")
        if not self.near < self.far:
            raise InvalidInputError(f"need near < far; got {self.near}, {self.far}")
        if self.height < 1 or self.width < 1:
            raise InvalidInputError("image size must be positive")

    @property
    def focal(self):
        """Focal length in pixels (vertical field of view)."""
        return 0.5 * self.height / np.tan(0.5 * self.fov_y)

    @property
    def position(self):
        cp, sp = np.cos(self.pitch), np.sin(self.pitch)
        cy, sy = np.cos(self.yaw), np.sin(self.yaw)
        return self.radius * np.array([cp * sy, sp, cp * cy])

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def scaled(self, factor):
        """Same view at ``factor`` times the pixel resolution."""
        return self.replace(height=self.height * factor, width=self.width * factor,
                            cx=self.cx * factor, cy=self.cy * factor)

    def to_dict(self):
        return {"yaw": self.yaw, "pitch": self.pitch, "radius": self.radius, "fov": self.fov_y,
                "cx": self.cx, "cy": self.cy, "height": self.height, "width": self.width,
                "near": self.near, "far": self.far, "roll": self.roll}

    @classmethod
    def from_dict(cls, d, height=None, width=None):
        return cls(yaw=float(d["yaw"]), pitch=float(d.get("pitch", 0.0)),
                   radius=float(d.get("radius", 2.7)), fov_y=float(d.get("fov", np.deg2rad(40.0))),
                   cx=float(d.get("cx", 0.0)), cy=float(d.get("cy", 0.0)),
                   height=int(height or d.get("height", 64)), width=int(width or d.get("width", 64)),
                   near=d.get("near"), far=d.get("far"), roll=float(d.get("roll", 0.0)))


@dataclass
class CameraResidual:
    """Per-image additive correction (yaw, pitch in rad; radius in world units; cx, cy in pixels)."""

    yaw: float = 0.0
    pitch: float = 0.0
    radius: float = 0.0
    cx: float = 0.0
    cy: float = 0.0

    def as_array(self):
        return np.array([self.yaw, self.pitch, self.radius, self.cx, self.cy], dtype=np.float64)

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (5,) or not np.all(np.isfinite(a)):
            raise InvalidInputError(f"residual must be 5 finite values; got {a}")
        return cls(*map(float, a))

    def norm(self, cam: "OrbitCamera | None" = None):
        """Euclidean norm; with ``cam`` the principal offsets count in focal-length units."""
        a = self.as_array() if cam is None else self.as_array() * residual_scale(cam)
        return float(np.linalg.norm(a))


def residual_scale(cam: OrbitCamera):
    """Per-component factors making a residual unit-consistent: pixels become focal-length units."""
    return np.array([1.0, 1.0, 1.0, 1.0 / cam.focal, 1.0 / cam.focal])


def apply_camera_residual(cam: OrbitCamera, res: CameraResidual) -> OrbitCamera:
    radius = cam.radius + res.radius
    if radius <= 0:
        raise InvalidStateError(f"residual makes camera radius non-positive ({radius})")
    return cam.replace(yaw=cam.yaw + res.yaw, pitch=cam.pitch + res.pitch, radius=radius,
                       cx=cam.cx + res.cx, cy=cam.cy + res.cy)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float


@dataclass
class RayBundle:
    """Rays for a set of pixels, stored as arrays.

    ``pixels`` are flat row-major indices into the camera image; they key the
    per-sample jitter so a pixel gets the same samples whichever batch it is in.
    """

    origins: np.ndarray
    directions: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    pixels: np.ndarray

    def __len__(self):
        return len(self.origins)

    def __getitem__(self, sl):
        return RayBundle(self.origins[sl], self.directions[sl], self.t_near[sl], self.t_far[sl],
                         self.pixels[sl])

    def ray(self, i):
        return Ray(self.origins[i], self.directions[i], float(self.t_near[i]), float(self.t_far[i]))


def _basis(yaw, pitch, roll):
    """Orbit direction, right and up vectors with their yaw/pitch derivatives."""
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    e = np.array([cp * sy, sp, cp * cy])
    de_dyaw = np.array([cp * cy, 0.0, -cp * sy])
    de_dpitch = np.array([-sp * sy, cp, -sp * cy])
    right0 = np.array([cy, 0.0, -sy])
    dright0_dyaw = np.array([-sy, 0.0, -cy])
    up0 = de_dpitch
    dup0_dyaw = np.array([-cy * sp, 0.0, sy * sp])
    dup0_dpitch = np.array([-sy * cp, -sp, -cy * cp])
    cr, sr = np.cos(roll), np.sin(roll)
    right = cr * right0 + sr * up0
    up = -sr * right0 + cr * up0
    d = {
        "e": (de_dyaw, de_dpitch),
        "right": (cr * dright0_dyaw + sr * dup0_dyaw, sr * dup0_dpitch),
        "up": (-sr * dright0_dyaw + cr * dup0_dyaw, cr * dup0_dpitch),
    }
    return e, right, up, d


def _pixel_coords(cam, pixels):
    rows, cols = np.divmod(pixels, cam.width)
    xc = (cols + 0.5 - 0.5 * cam.width - cam.cx) / cam.focal
    yc = -(rows + 0.5 - 0.5 * cam.height - cam.cy) / cam.focal
    return xc, yc


def _check_pixels(cam, pixels):
    if pixels is None:
        return np.arange(cam.height * cam.width)
    pixels = np.asarray(pixels, dtype=np.int64)
    if pixels.ndim != 1 or (len(pixels) and (pixels.min() < 0 or pixels.max() >= cam.height * cam.width)):
        raise InvalidInputError("pixel indices out of range")
    return pixels


def generate_rays(cam: OrbitCamera, pixels=None) -> RayBundle:
    """Unit-direction rays through pixel centres (all pixels, row-major, by default)."""
    pixels = _check_pixels(cam, pixels)
    e, right, up, _ = _basis(cam.yaw, cam.pitch, cam.roll)
    xc, yc = _pixel_coords(cam, pixels)
    v = xc[:, None] * right + yc[:, None] * up - e
    dirs = v / np.linalg.norm(v, axis=1, keepdims=True)
    n = len(pixels)
    origins = np.broadcast_to(cam.radius * e, (n, 3)).copy()
    return RayBundle(origins, dirs, np.full(n, float(cam.near)), np.full(n, float(cam.far)), pixels)


def generate_rays_backward(cam: OrbitCamera, pixels, g_origins, g_directions):
    """Chain ray-origin/direction gradients to ``(yaw, pitch, radius, cx, cy)``.

    Because residuals are additive, the result is also the residual gradient.
    """
    pixels = _check_pixels(cam, pixels)
    e, right, up, d = _basis(cam.yaw, cam.pitch, cam.roll)
    xc, yc = _pixel_coords(cam, pixels)
    v = xc[:, None] * right + yc[:, None] * up - e
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    dirs = v / norm
    g_d = np.asarray(g_directions, dtype=np.float64)
    g_v = (g_d - dirs * np.sum(dirs * g_d, axis=1, keepdims=True)) / norm
    g_o = np.asarray(g_origins, dtype=np.float64).sum(axis=0)

    grad = np.zeros(5)
    for j in range(2):  # yaw, pitch
        dv = xc[:, None] * d["right"][j] + yc[:, None] * d["up"][j] - d["e"][j]
        grad[j] = np.sum(g_v * dv) + cam.radius * g_o @ d["e"][j]
    grad[2] = g_o @ e
    grad[3] = -np.sum(g_v @ right) / cam.focal
    grad[4] = np.sum(g_v @ up) / cam.focal
    return grad


def orbit_cameras(yaws, **kwargs):
    return [OrbitCamera(yaw=float(y), **kwargs) for y in yaws]
