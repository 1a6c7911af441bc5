"""Bit-exact file formats: PPM/PFM rasters, JSON manifests, detector JSONL, scene checkpoints.

Scene checkpoint layout (all little-endian)::

    b"TGV1"
    uint32  D, H, W, C, k
    uint32  n_hidden, then n_hidden hidden widths
    uint32  H_img, W_img
    float32 bounds lo, hi
    float32 planes_xy, planes_yz, planes_xz     (D*H*W*C each, C order)
    float32 per decoder layer: weight (fan_in*fan_out), bias (fan_out)
    float32 background parameters (H_img*W_img*k)

Parameters are stored as float32, so a float64 scene is rounded on save;
saving a loaded checkpoint reproduces the file byte for byte.  The decoder
activation is not stored; checkpoints are for ReLU decoders.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .alignment import HeadBox, LandmarkSet
from .errors import InvalidInputError, ParseError
from .scene import Background, Decoder, Scene, TriGrid

MAGIC = b"TGV1"


# ---------------------------------------------------------------- PPM


def _read_token(data, pos):
    """Next whitespace-delimited header token, skipping ``#`` comments."""
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ParseError("unexpected end of header", start)
    return data[start:pos], pos


def parse_ppm(data: bytes):
    if data[:2] != b"P6":
        raise ParseError(f"bad magic {data[:2]!r}, expected b'P6'", 0)
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        start = pos
        tok, pos = _read_token(data, pos)
        if not tok.isdigit():
            raise ParseError(f"{name} is not a decimal integer: {tok!r}", start)
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise ParseError(f"only maxval 255 is supported; got {maxval}", pos)
    if w < 1 or h < 1:
        raise ParseError(f"image size must be positive; got {w}x{h}", pos)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ParseError("missing whitespace after maxval", pos)
    pos += 1
    expected = w * h * 3
    actual = len(data) - pos
    if actual != expected:
        raise ParseError(f"payload has {actual} bytes, expected {expected}", pos)
    return np.frombuffer(data, dtype=np.uint8, offset=pos).reshape(h, w, 3).copy()


def read_image(path):
    """8-bit RGB raster ``(H, W, 3)`` from a binary PPM (P6, maxval 255)."""
    with open(path, "rb") as f:
        return parse_ppm(f.read())


def encode_ppm(raster):
    raster = np.asarray(raster)
    if raster.dtype != np.uint8 or raster.ndim != 3 or raster.shape[2] != 3:
        raise InvalidInputError("PPM rasters must be uint8 (H, W, 3)")
    h, w = raster.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(raster).tobytes()


def write_image(path, raster):
    with open(path, "wb") as f:
        f.write(encode_ppm(raster))


def to_uint8(image):
    """Float image in [0, 1] to uint8 with rounding (values are clipped)."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(raster):
    return np.asarray(raster, dtype=np.float64) / 255.0


# ---------------------------------------------------------------- PFM


def parse_pfm(data: bytes):
    if data[:3] != b"Pf\n":
        raise ParseError(f"bad magic {data[:3]!r}, expected b'Pf\\n'", 0)
    lines = data.split(b"\n", 3)
    if len(lines) < 4:
        raise ParseError("truncated header", len(data))
    try:
        w, h = (int(x) for x in lines[1].split())
        scale = float(lines[2])
    except ValueError as exc:
        raise ParseError(f"malformed header: {exc}", 3) from None
    if scale >= 0:
        raise ParseError("only little-endian PFM (negative scale) is supported", 3 + len(lines[1]) + 1)
    offset = len(lines[0]) + len(lines[1]) + len(lines[2]) + 3
    expected = w * h * 4
    actual = len(data) - offset
    if actual != expected:
        raise ParseError(f"payload has {actual} bytes, expected {expected} for {w}x{h}", offset)
    rows = np.frombuffer(data, dtype="<f4", offset=offset).reshape(h, w)
    return rows[::-1].copy()


def encode_pfm(raster):
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise InvalidInputError("PFM rasters must be 2-D")
    h, w = raster.shape
    body = np.ascontiguousarray(raster[::-1], dtype="<f4").tobytes()
    return f"Pf\n{w} {h}\n-1.0\n".encode("ascii") + body


def read_float_raster(path):
    """Single-channel float32 raster (top row first) from a PFM file."""
    with open(path, "rb") as f:
        return parse_pfm(f.read())


def write_float_raster(path, raster):
    with open(path, "wb") as f:
        f.write(encode_pfm(raster))


# ---------------------------------------------------------------- manifest


def split_tag(yaw):
    from .fitting import is_back_yaw

    return "back" if is_back_yaw(yaw) else "front"


def validate_manifest(manifest, check_paths=False):
    records = manifest.get("records")
    if not isinstance(records, list):
        raise InvalidInputError("manifest needs a 'records' list")
    seen = set()
    for rec in records:
        for key in ("id", "rgb", "mask", "camera", "split"):
            if key not in rec:
                raise InvalidInputError(f"record missing {key!r}: {rec}")
        if rec["id"] in seen:
            raise InvalidInputError(f"duplicate record id {rec['id']!r}")
        seen.add(rec["id"])
        cam = rec["camera"]
        for key in ("yaw", "pitch", "radius", "fov", "cx", "cy"):
            if key not in cam:
                raise InvalidInputError(f"record {rec['id']!r} camera missing {key!r}")
        if rec["split"] != split_tag(cam["yaw"]):
            raise InvalidInputError(f"record {rec['id']!r} split {rec['split']!r} disagrees with yaw {cam['yaw']}")
        if check_paths:
            root = manifest.get("root", ".")
            for key in ("rgb", "mask"):
                p = os.path.join(root, rec[key])
                if not os.path.exists(p):
                    raise InvalidInputError(f"record {rec['id']!r}: {key} path {p} does not exist")
    return manifest


def make_manifest_record(view_id, rgb_path, mask_path, camera):
    cam = {k: float(camera[k]) for k in ("yaw", "pitch", "radius", "fov", "cx", "cy")}
    return {"id": view_id, "rgb": rgb_path, "mask": mask_path, "camera": cam, "split": split_tag(cam["yaw"])}


def write_manifest(path, manifest):
    validate_manifest(manifest)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def read_manifest(path, check_paths=False):
    with open(path) as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as exc:
            raise ParseError(f"manifest is not valid JSON: {exc.msg}", exc.pos) from None
    return validate_manifest(manifest, check_paths)


# ---------------------------------------------------------------- detector JSONL


def detector_record(view_id, camera, landmarks: LandmarkSet | None = None, box: HeadBox | None = None):
    rec = {"id": view_id,
           "camera": {k: float(camera[k]) for k in ("yaw", "pitch", "radius", "fov")}}
    if landmarks is not None:
        rec["landmarks"] = landmarks.array().tolist()
    if box is not None:
        rec["box"] = {"cx": box.center[0], "cy": box.center[1], "w": box.width, "h": box.height}
    return rec


def write_detections(path, records):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_detections(path):
    """Parse detector JSONL into dicts with ``LandmarkSet``/``HeadBox`` objects (or None)."""
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: {exc.msg}") from None
            if "id" not in rec or "camera" not in rec:
                raise InvalidInputError(f"line {lineno}: record needs 'id' and 'camera'")
            lm = LandmarkSet.from_array(rec["landmarks"]) if rec.get("landmarks") is not None else None
            b = rec.get("box")
            box = HeadBox((b["cx"], b["cy"]), b["w"], b["h"], "detector") if b is not None else None
            out.append({"id": rec["id"], "camera": rec["camera"], "landmarks": lm, "box": box})
    return out


# ---------------------------------------------------------------- checkpoint


def encode_checkpoint(scene: Scene) -> bytes:
    tg, dec, bg = scene.trigrid, scene.decoder, scene.background
    if dec.activation != "relu":
        raise InvalidInputError("checkpoints store ReLU decoders only")
    D, H, W, C = tg.shape
    k = dec.out_channels
    hidden = dec.hidden
    Himg, Wimg = bg.shape[:2]
    parts = [MAGIC, struct.pack("<5I", D, H, W, C, k), struct.pack(f"<I{len(hidden)}I", len(hidden), *hidden),
             struct.pack("<2I", Himg, Wimg), struct.pack("<2f", *tg.bounds)]
    blocks = [tg.planes_xy, tg.planes_yz, tg.planes_xz]
    for w, b in zip(dec.weights, dec.biases):
        blocks += [w, b]
    blocks.append(bg.params)
    parts += [np.ascontiguousarray(b, dtype="<f4").tobytes() for b in blocks]
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Scene:
    if data[:4] != MAGIC:
        raise ParseError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ParseError(f"truncated header reading {fmt}", pos)
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    D, H, W, C, k = take("<5I")
    (n_hidden,) = take("<I")
    hidden = take(f"<{n_hidden}I") if n_hidden else ()
    Himg, Wimg = take("<2I")
    lo, hi = take("<2f")

    def block(shape):
        nonlocal pos
        count = int(np.prod(shape))
        if pos + 4 * count > len(data):
            raise ParseError(f"truncated parameter block of shape {shape}", pos)
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 4 * count
        return arr

    planes = [block((D, H, W, C)) for _ in range(3)]
    widths = [C, *hidden, 1 + k]
    weights, biases = [], []
    for a, b in zip(widths[:-1], widths[1:]):
        weights.append(block((a, b)))
        biases.append(block((b,)))
    bg = block((Himg, Wimg, k))
    if pos != len(data):
        raise ParseError(f"{len(data) - pos} trailing bytes after parameter blocks", pos)
    return Scene(TriGrid(*planes, bounds=(float(lo), float(hi))), Decoder(weights, biases), Background(bg))


def save_checkpoint(path, scene):
    with open(path, "wb") as f:
        f.write(encode_checkpoint(scene))


def load_checkpoint(path):
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())
