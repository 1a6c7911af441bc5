"""Two-stage crop alignment from detector outputs.

Frontal images are cropped from facial landmarks; large-pose images only have
a head box, whose crop is corrected by a constant scale ratio and centre
offset calibrated on images that have both.

A crop maps input pixel coordinates to output ones by
``out = scale * in + translation`` (no rotation).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, InvalidStateError

LANDMARK_NAMES = ("left_eye", "right_eye", "nose", "mouth_left", "mouth_right")
EYE_FRACTION = 0.22  # inter-ocular distance as a fraction of output width


@dataclass
class LandmarkSet:
    points: dict  # name -> (x, y) pixels; "left" means image-left

    def __post_init__(self):
        missing = [n for n in LANDMARK_NAMES if n not in self.points]
        if missing:
            raise InvalidInputError(f"missing landmarks: {missing}")
        self.points = {n: (float(self.points[n][0]), float(self.points[n][1])) for n in LANDMARK_NAMES}
        if not np.all(np.isfinite(self.array())):
            raise InvalidInputError("landmarks must be finite")

    def array(self):
        return np.array([self.points[n] for n in LANDMARK_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (5, 2):
            raise InvalidInputError(f"landmark array must be (5, 2); got {arr.shape}")
        return cls(dict(zip(LANDMARK_NAMES, map(tuple, arr))))

    def transformed(self, scale=1.0, shift=(0.0, 0.0)):
        return LandmarkSet.from_array(self.array() * scale + np.asarray(shift))


@dataclass
class HeadBox:
    center: tuple
    width: float
    height: float
    tag: str = ""

    def __post_init__(self):
        self.center = (float(self.center[0]), float(self.center[1]))
        if not (self.width > 0 and self.height > 0):
            raise InvalidInputError("head box needs positive extent")

    @property
    def size(self):
        return max(self.width, self.height)


@dataclass
class CropTransform:
    scale: float
    translation: tuple
    output_size: tuple

    def __post_init__(self):
        if not self.scale > 0:
            raise InvalidStateError(f"crop scale must be positive; got {self.scale}")
        self.translation = (float(self.translation[0]), float(self.translation[1]))

    def apply(self, pts):
        return np.asarray(pts, dtype=np.float64) * self.scale + np.asarray(self.translation)

    def source_center(self):
        """Input-image point that lands on the output centre."""
        W, H = self.output_size
        return (np.array([W / 2, H / 2]) - np.asarray(self.translation)) / self.scale

    def then(self, other: CropTransform):
        """Crop by ``self`` and then by ``other``."""
        t = other.scale * np.asarray(self.translation) + np.asarray(other.translation)
        return CropTransform(self.scale * other.scale, tuple(t), other.output_size)


@dataclass
class OffsetCalibration:
    ratio: float
    shift: tuple  # centre delta in units of box size

    def __post_init__(self):
        if not (self.ratio > 0 and np.isfinite(self.ratio)) or not np.all(np.isfinite(self.shift)):
            raise InvalidInputError("calibration needs ratio > 0 and a finite shift")
        self.shift = (float(self.shift[0]), float(self.shift[1]))


def _size_tuple(output_size):
    if np.isscalar(output_size):
        return (int(output_size), int(output_size))
    return tuple(int(s) for s in output_size)


def canonical_landmarks(output_size=64) -> LandmarkSet:
    """Landmark layout that the frontal rule maps onto itself."""
    W, H = _size_tuple(output_size)
    cx, cy = W / 2, H / 2
    eye_dx = EYE_FRACTION * W / 2
    return LandmarkSet({
        "left_eye": (cx - eye_dx, cy - 0.12 * H),
        "right_eye": (cx + eye_dx, cy - 0.12 * H),
        "nose": (cx, cy),
        "mouth_left": (cx - 0.09 * W, cy + 0.12 * H),
        "mouth_right": (cx + 0.09 * W, cy + 0.12 * H),
    })


def head_center(lm: LandmarkSet):
    p = lm.points
    eyes = (np.asarray(p["left_eye"]) + np.asarray(p["right_eye"])) / 2
    mouth = (np.asarray(p["mouth_left"]) + np.asarray(p["mouth_right"])) / 2
    return (eyes + mouth) / 2


def _crop_about(center, scale, output_size):
    W, H = output_size
    return CropTransform(scale, tuple(np.array([W / 2, H / 2]) - scale * np.asarray(center)), output_size)


def align_frontal(lm: LandmarkSet, output_size=64) -> CropTransform:
    """Landmark crop: head centre to the output centre, eye distance to 22% of the width."""
    size = _size_tuple(output_size)
    eye_dist = np.linalg.norm(np.subtract(lm.points["right_eye"], lm.points["left_eye"]))
    if eye_dist < 1e-9:
        raise InvalidInputError("degenerate landmarks: eyes coincide")
    return _crop_about(head_center(lm), EYE_FRACTION * size[0] / eye_dist, size)


def box_crop(box: HeadBox, output_size=64) -> CropTransform:
    """Uncorrected crop: box centre to output centre, box size to output width."""
    size = _size_tuple(output_size)
    return _crop_about(box.center, size[0] / box.size, size)


def calibrate_offsets(pairs, output_size=64) -> OffsetCalibration:
    """Constant ratio and shift mapping box crops onto landmark crops.

    Scale ratios are averaged geometrically and centre deltas (in box-size
    units) arithmetically.
    """
    pairs = list(pairs)
    if not pairs:
        raise InvalidInputError("calibration needs at least one (landmarks, box) pair")
    ratios, shifts = [], []
    for lm, box in pairs:
        lc = align_frontal(lm, output_size)
        bc = box_crop(box, output_size)
        ratios.append(lc.scale / bc.scale)
        shifts.append((lc.source_center() - bc.source_center()) / box.size)
    ratio = float(np.exp(np.mean(np.log(ratios))))
    return OffsetCalibration(ratio, tuple(np.mean(shifts, axis=0)))


def align_large_pose(box: HeadBox, cal: OffsetCalibration, output_size=64) -> CropTransform:
    size = _size_tuple(output_size)
    scale = cal.ratio * size[0] / box.size
    if not scale > 0:
        raise InvalidStateError("calibrated crop scale is not positive")
    center = np.asarray(box.center) + np.asarray(cal.shift) * box.size
    return _crop_about(center, scale, size)


def apply_crop(image, t: CropTransform, fill=0.5):
    """Resample ``image`` under ``t`` with bilinear interpolation.

    Output pixel centres are mapped back to input coordinates; samples
    outside the input frame take the ``fill`` value.
    """
    image = np.asarray(image, dtype=np.float64)
    squeeze = image.ndim == 2
    if squeeze:
        image = image[..., None]
    H, W = image.shape[:2]
    out_w, out_h = t.output_size
    ys, xs = np.mgrid[0:out_h, 0:out_w]
    # pixel centres: continuous coordinate of pixel (r, c) centre is (c + 0.5, r + 0.5)
    sx = (xs + 0.5 - t.translation[0]) / t.scale - 0.5
    sy = (ys + 0.5 - t.translation[1]) / t.scale - 0.5
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    # exact-integer sample positions must not touch the neighbour outside the frame
    fx = np.where(fx < 1e-9, 0.0, fx)
    fy = np.where(fy < 1e-9, 0.0, fy)
    out = np.zeros((out_h, out_w, image.shape[2]))
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            inside = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
            vals = np.where(inside[..., None], image[np.clip(yy, 0, H - 1), np.clip(xx, 0, W - 1)], fill)
            w = wy * wx
            out += np.where(w == 0.0, 0.0, w * vals)
    return out[..., 0] if squeeze else out
