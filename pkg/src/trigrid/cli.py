"""Command-line entry point: ``trigrid <subcommand> [flags]``.

Every subcommand writes ``config.json`` (the parsed flags) into its output
directory, so a run can be repeated from that record.  Exit codes: 0 success,
1 runtime failure, 2 usage error.  Bitwise-identical results need the same
``--seed`` and the same ``--workers``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import io
from .alignment import align_frontal, align_large_pose, apply_crop, calibrate_offsets
from .camera import OrbitCamera
from .errors import InvalidInputError, InvalidStateError, ParseError
from .fitting import FitConfig, TrainView, ablate_representation, fit_scene, format_table
from .gradcheck import run_gradcheck
from .meshing import density_grid, export_mesh, interior_open_edges, marching_cubes, mesh_edges
from .render import render_image
from .scene import init_scene
from .synthdata import ProxyScene, heldout_views, make_dataset

log = logging.getLogger("trigrid")

DEFAULT_YAWS = "0,45,90,135,180"
# unbalanced capture used by the ablation: most views face the front
ABLATION_BACK_FRACTION = 0.25


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- helpers


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _non_negative_int(text):
    v = int(text) if text.lstrip("-").isdigit() else None
    if v is None or v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text!r}")
    return v


def _non_negative_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not np.isfinite(v) or v < 0:
        raise argparse.ArgumentTypeError(f"expected a finite non-negative number, got {text!r}")
    return v


def _yaw_list(text):
    try:
        yaws = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"yaws must be comma-separated degrees, got {text!r}") from None
    if not yaws or not all(np.isfinite(yaws)):
        raise argparse.ArgumentTypeError("need at least one finite yaw")
    return yaws


def _prepare_out(args):
    os.makedirs(args.out, exist_ok=True)
    config = {k: v for k, v in vars(args).items() if k != "func"}
    with open(os.path.join(args.out, "config.json"), "w") as f:
        json.dump(config, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _camera_from_record(cam, size):
    return OrbitCamera(yaw=cam["yaw"], pitch=cam["pitch"], radius=cam["radius"], fov_y=cam["fov"],
                       cx=cam.get("cx", 0.0), cy=cam.get("cy", 0.0), height=size[0], width=size[1])


def load_views(data_dir):
    """Training views from a dataset directory written by ``synth-data``."""
    manifest = io.read_manifest(os.path.join(data_dir, "manifest.json"))
    root = os.path.join(data_dir, manifest.get("root", "."))
    views = []
    for rec in manifest["records"]:
        rgb = io.from_uint8(io.read_image(os.path.join(root, rec["rgb"])))
        mask = io.read_float_raster(os.path.join(root, rec["mask"])).astype(np.float64)
        views.append(TrainView(rgb, mask, _camera_from_record(rec["camera"], rgb.shape[:2]), rec["id"]))
    return views


# ---------------------------------------------------------------- subcommands


def cmd_synth_data(args):
    _prepare_out(args)
    ds = make_dataset(ProxyScene(), n_views=args.views, size=args.size, noise_yaw=args.noise_yaw,
                      crop_drift=args.crop_drift, seed=args.seed)
    os.makedirs(os.path.join(args.out, "images"), exist_ok=True)
    os.makedirs(os.path.join(args.out, "masks"), exist_ok=True)
    records, detections, truth = [], [], {}
    for r in ds.records:
        rgb_path = f"images/{r.view_id}.ppm"
        mask_path = f"masks/{r.view_id}.pfm"
        io.write_image(os.path.join(args.out, rgb_path), io.to_uint8(r.rgb))
        io.write_float_raster(os.path.join(args.out, mask_path), r.mask)
        records.append(io.make_manifest_record(r.view_id, rgb_path, mask_path, r.label.to_dict()))
        detections.append(io.detector_record(r.view_id, r.label.to_dict(), r.landmarks, r.box))
        truth[r.view_id] = r.truth.to_dict()
    io.write_manifest(os.path.join(args.out, "manifest.json"), {"root": ".", "records": records, "meta": ds.meta})
    io.write_detections(os.path.join(args.out, "detections.jsonl"), detections)
    _write_json(os.path.join(args.out, "truth.json"), truth)
    print(f"wrote {len(records)} views to {args.out}")
    return 0


def _fit_config(args, iterations):
    return FitConfig(iterations=iterations, lambda_mask=args.lambda_mask, lambda_cam=args.lambda_cam,
                     residuals=args.residuals == "on", seed=args.seed, workers=args.workers)


def cmd_fit(args):
    if args.data:
        views = load_views(args.data)
    else:
        views = make_dataset(ProxyScene(), n_views=args.views, size=args.size, noise_yaw=args.noise_yaw,
                             crop_drift=args.crop_drift, seed=args.seed).train_views()
    _prepare_out(args)
    config = _fit_config(args, args.iters)
    H, W = views[0].rgb.shape[:2]
    init = init_scene(depth=args.depth, resolution=args.resolution, image_size=(H, W), seed=args.seed)
    t0 = time.time()
    scene, residuals, report = fit_scene(views, config, init)
    io.save_checkpoint(os.path.join(args.out, "checkpoint.tgv"), scene)
    report.residuals = {v.view_id: r.as_array().tolist() for v, r in zip(views, residuals)}
    report.to_json(os.path.join(args.out, "report.json"))
    mean_psnr = float(np.mean(list(report.psnr.values()))) if report.psnr else float("nan")
    print(f"fit D={args.depth} iters={args.iters}: train PSNR {mean_psnr:.2f} dB, "
          f"mask MSE {report.mask_mse:.4f} ({time.time() - t0:.1f}s)")
    return 0


def cmd_render_orbit(args):
    scene = io.load_checkpoint(args.checkpoint)
    _prepare_out(args)
    H, W = scene.image_size
    frames, masks = [], []
    for yaw in args.yaws:
        cam = OrbitCamera(yaw=float(np.deg2rad(yaw)), height=H, width=W)
        out = render_image(scene, cam, workers=args.workers)
        frames.append(out.composite)
        masks.append(out.mask)
    strip = np.concatenate(frames, axis=1)
    io.write_image(os.path.join(args.out, "orbit.ppm"), io.to_uint8(strip))
    io.write_float_raster(os.path.join(args.out, "orbit_mask.pfm"), np.concatenate(masks, axis=1))
    _write_json(os.path.join(args.out, "orbit.json"), {"yaws_deg": args.yaws, "frame_size": [H, W],
                                                        "frames": len(frames)})
    print(f"rendered {len(frames)} frames into {args.out}/orbit.ppm ({strip.shape[1]}x{strip.shape[0]})")
    return 0


def cmd_extract_mesh(args):
    scene = io.load_checkpoint(args.checkpoint)
    _prepare_out(args)
    grid = density_grid(scene, args.resolution)
    mesh = marching_cubes(grid, args.iso)
    export_mesh(mesh, os.path.join(args.out, "mesh.obj"))
    _, counts = mesh_edges(mesh) if len(mesh) else (None, np.zeros(0, dtype=int))
    cracks = interior_open_edges(mesh, grid)
    summary = {"vertices": len(mesh.vertices), "faces": len(mesh), "iso": args.iso,
               "resolution": args.resolution, "open_edges": int(np.sum(counts == 1)),
               "interior_open_edges": cracks, "watertight": bool(len(mesh) > 0 and np.all(counts == 2)),
               "interior_watertight": bool(len(mesh) > 0 and cracks == 0)}
    _write_json(os.path.join(args.out, "mesh.json"), summary)
    print(f"mesh: {summary['vertices']} vertices, {summary['faces']} faces, interior watertight={summary['interior_watertight']}")
    return 0


def cmd_gradcheck(args):
    results = run_gradcheck(depths=tuple(args.depths), seed=args.seed)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    if args.out:
        _prepare_out(args)
        _write_json(os.path.join(args.out, "gradcheck.json"),
                    {"passed": ok, "results": [{"group": r.group, "depth": r.depth, "rel_error": r.rel_error,
                                                "tol": r.tol, "passed": r.passed} for r in results]})
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def ablation_yaws(n_views, back_fraction=ABLATION_BACK_FRACTION):
    """Front-heavy yaw set: front views spread over +-75 deg, the rest spread behind the head."""
    n_back = max(1, int(round(n_views * back_fraction)))
    n_front = n_views - n_back
    if n_front < 1:
        raise InvalidInputError("ablation needs at least 2 views")
    front = np.linspace(-75.0, 75.0, n_front)
    back = 180.0 + (np.linspace(-60.0, 60.0, n_back) if n_back > 1 else np.zeros(1))
    return np.deg2rad(np.concatenate([front, back])) % (2 * np.pi)


ABLATION_HELDOUT_DEG = (-40.0, 20.0, 60.0, 135.0, 160.0, 200.0, 225.0)


def cmd_ablate(args):
    _prepare_out(args)
    proxy = ProxyScene()
    ds = make_dataset(proxy, yaws=ablation_yaws(args.views), size=args.size, seed=args.seed)
    held = heldout_views(proxy, np.deg2rad(ABLATION_HELDOUT_DEG), size=args.size)
    config = _fit_config(args, args.iters)
    table = ablate_representation(ds.train_views(), held, config, depth=args.depth, resolution=args.resolution,
                                  channels=args.channels, hidden=(args.hidden,))
    clean = {k: {kk: vv for kk, vv in row.items() if not kk.startswith("_")} for k, row in table.items()}
    keys = list(clean)
    clean["back_margin_db"] = clean[keys[1]]["back_psnr"] - clean[keys[0]]["back_psnr"]
    clean["front_gap_db"] = abs(clean[keys[1]]["front_psnr"] - clean[keys[0]]["front_psnr"])
    _write_json(os.path.join(args.out, "ablation.json"), clean)
    text = format_table(table)
    with open(os.path.join(args.out, "ablation.txt"), "w") as f:
        f.write(text + "\n")
    print(text)
    print(f"back-view margin {clean['back_margin_db']:+.2f} dB, front gap {clean['front_gap_db']:.2f} dB")
    return 0


def cmd_align(args):
    detections = io.read_detections(args.detections)
    _prepare_out(args)
    size = args.size
    pairs = [(d["landmarks"], d["box"]) for d in detections if d["landmarks"] is not None and d["box"] is not None]
    if not pairs:
        raise InvalidInputError("calibration needs at least one record with both landmarks and a box")
    cal = calibrate_offsets(pairs, size)
    data_dir = args.data
    manifest_in = {}
    if data_dir:
        manifest_in = {r["id"]: r for r in io.read_manifest(os.path.join(data_dir, "manifest.json"))["records"]}
        os.makedirs(os.path.join(args.out, "images"), exist_ok=True)
        os.makedirs(os.path.join(args.out, "masks"), exist_ok=True)
    records = []
    for d in detections:
        if d["landmarks"] is not None:
            crop, method = align_frontal(d["landmarks"], size), "landmarks"
        elif d["box"] is not None:
            crop, method = align_large_pose(d["box"], cal, size), "box"
        else:
            log.warning("record %s has no detections; skipped", d["id"])
            continue
        cam = {**d["camera"], "cx": 0.0, "cy": 0.0}
        rgb_path, mask_path = f"images/{d['id']}.ppm", f"masks/{d['id']}.pfm"
        if d["id"] in manifest_in:
            src = manifest_in[d["id"]]
            rgb = io.from_uint8(io.read_image(os.path.join(data_dir, src["rgb"])))
            mask = io.read_float_raster(os.path.join(data_dir, src["mask"])).astype(np.float64)
            io.write_image(os.path.join(args.out, rgb_path), io.to_uint8(apply_crop(rgb, crop)))
            io.write_float_raster(os.path.join(args.out, mask_path), apply_crop(mask[..., None], crop, fill=0.0)[..., 0])
        rec = io.make_manifest_record(d["id"], rgb_path, mask_path, cam)
        rec["crop"] = {"scale": crop.scale, "translation": list(crop.translation), "method": method}
        records.append(rec)
    io.write_manifest(os.path.join(args.out, "manifest.json"),
                      {"root": ".", "records": records,
                       "calibration": {"ratio": cal.ratio, "shift": list(cal.shift), "pairs": len(pairs)}})
    print(f"aligned {len(records)} records (calibration ratio {cal.ratio:.4f}, "
          f"shift ({cal.shift[0]:+.4f}, {cal.shift[1]:+.4f}) box units)")
    return 0


# ---------------------------------------------------------------- parser


def build_parser():
    cores = os.cpu_count() or 1
    p = _Parser(prog="trigrid", description=__doc__.split("\n")[0],
                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help):
        sp = sub.add_parser(name, help=help, description=help, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        sp.set_defaults(func=func)
        sp.add_argument("--seed", type=_non_negative_int, default=0, help="random seed")
        return sp

    def data_flags(sp):
        sp.add_argument("--views", type=_positive_int, default=16, help="number of training views")
        sp.add_argument("--size", type=_positive_int, default=64, help="image side in pixels")
        sp.add_argument("--noise-yaw", type=_non_negative_float, default=0.0, help="label yaw noise bound (rad)")
        sp.add_argument("--crop-drift", type=_non_negative_float, default=0.0, help="crop drift bound (px)")

    def fit_flags(sp, iters):
        sp.add_argument("--depth", type=_positive_int, default=3, help="planes per stack (1 = tri-plane)")
        sp.add_argument("--resolution", type=_positive_int, default=16, help="in-plane grid resolution")
        sp.add_argument("--iters", type=_non_negative_int, default=iters, help="optimizer iterations")
        sp.add_argument("--lambda-mask", type=float, default=1.0, help="mask loss weight")
        sp.add_argument("--lambda-cam", type=_non_negative_float, default=FitConfig.lambda_cam,
                        help="camera residual penalty weight")
        sp.add_argument("--residuals", choices=("on", "off"), default="on", help="learn per-view camera residuals")
        sp.add_argument("--workers", type=_positive_int, default=cores,
                        help="render threads; fix it for bitwise-reproducible runs")

    sp = add("synth-data", cmd_synth_data, "render a synthetic multi-view head-proxy dataset")
    data_flags(sp)
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("fit", cmd_fit, "fit a scene to a dataset directory (or a freshly synthesized one)")
    data_flags(sp)
    fit_flags(sp, 1500)
    sp.add_argument("--data", help="dataset directory from synth-data (default: synthesize in memory)")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("render-orbit", cmd_render_orbit, "render a horizontal strip of views around a fitted scene")
    sp.add_argument("--checkpoint", required=True, help="scene checkpoint")
    sp.add_argument("--yaws", type=_yaw_list, default=_yaw_list(DEFAULT_YAWS), help="comma-separated yaws (deg)")
    sp.add_argument("--workers", type=_positive_int, default=cores, help="render threads")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("extract-mesh", cmd_extract_mesh, "voxelize density and extract an iso-surface mesh")
    sp.add_argument("--checkpoint", required=True, help="scene checkpoint")
    sp.add_argument("--resolution", type=_positive_int, default=64, help="voxel grid side N (>= 8)")
    sp.add_argument("--iso", type=float, default=10.0, help="density iso level")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of all parameter-group gradients")
    sp.add_argument("--depths", type=_positive_int, nargs="+", default=[1, 3], help="trigrid depths to check")
    sp.add_argument("--out", help="optional directory for a JSON report")

    sp = add("ablate", cmd_ablate, "tri-plane (D=1) versus tri-grid fit on a front-heavy capture")
    sp.add_argument("--views", type=_positive_int, default=16, help="number of training views")
    sp.add_argument("--size", type=_positive_int, default=64, help="image side in pixels")
    fit_flags(sp, 600)
    sp.add_argument("--channels", type=_positive_int, default=8, help="feature channels per plane")
    sp.add_argument("--hidden", type=_positive_int, default=32, help="decoder hidden width")
    sp.set_defaults(residuals="off")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("align", cmd_align, "crop images from detector output and write an aligned manifest")
    sp.add_argument("--detections", required=True, help="detector JSON-lines file")
    sp.add_argument("--data", help="dataset directory holding the images to crop")
    sp.add_argument("--size", type=_positive_int, default=64, help="output crop side in pixels")
    sp.add_argument("--out", required=True, help="output directory")
    return p


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (InvalidInputError, InvalidStateError, ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
