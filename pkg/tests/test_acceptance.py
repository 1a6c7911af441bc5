"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that the conftest prints in the terminal
summary.  The expensive fits are module-scoped fixtures shared between tests.
"""
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from trigrid import io
from trigrid.alignment import HeadBox, align_frontal, align_large_pose, calibrate_offsets, canonical_landmarks
from trigrid.camera import RayBundle, apply_camera_residual
from trigrid.cli import ABLATION_HELDOUT_DEG, ablation_yaws
from trigrid.fitting import FitConfig, ablate_representation, evaluate_views, fit_scene, register_camera
from trigrid.gradcheck import run_gradcheck
from trigrid.meshing import DensityGrid, density_grid, interior_open_edges, marching_cubes, voxel_centers
from trigrid.render import composite_weights, render_image, volume_render
from trigrid.scene import Background, Decoder, Scene, TriGrid, init_scene, sample_features
from trigrid.synthdata import ProxyScene, dual_detector_samples, heldout_views, make_dataset

SIZE = 64
HELDOUT_DEG = ABLATION_HELDOUT_DEG
# settings shared by the reconstruction fits (foreground, camera, mesh checks)
FIT = dict(iterations=1500)
# tri-plane vs tri-grid comparison at equal feature budgets (D=1 gets resolution 28)
ABLATION = dict(resolution=16, channels=8, hidden=(32,), iterations=600)
# back-view margin measured for this configuration is 1.11 dB; fits are bitwise reproducible
ABLATION_MARGIN_DB = 1.0


def record(name, passed, detail):
    ACCEPTANCE[name] = (bool(passed), detail)
    print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    assert passed, detail


def wrap(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


@pytest.fixture(scope="module")
def proxy():
    return ProxyScene()


@pytest.fixture(scope="module")
def heldout(proxy):
    return heldout_views(proxy, np.deg2rad(HELDOUT_DEG), size=SIZE)


@pytest.fixture(scope="module")
def clean_fit(proxy):
    data = make_dataset(proxy, n_views=16, size=SIZE, seed=0)
    config = FitConfig(**FIT)
    scene, residuals, report = fit_scene(data.train_views(), config)
    return data, config, scene, residuals, report


@pytest.fixture(scope="module")
def noisy_fits(proxy):
    data = make_dataset(proxy, n_views=16, size=SIZE, noise_yaw=0.1, crop_drift=4.0, seed=0)
    out = {}
    for mode in (True, False):
        config = FitConfig(residuals=mode, **FIT)
        out[mode] = (config, *fit_scene(data.train_views(), config))
    return data, out


def test_1_gradient_correctness():
    t0 = time.time()
    results = run_gradcheck(depths=(1, 3))
    elapsed = time.time() - t0
    worst = max(r.rel_error for r in results)
    groups = {r.group for r in results}
    ok = all(r.passed for r in results) and groups == {"trigrid", "decoder", "background", "residual"}
    record("1 gradient correctness", ok and elapsed < 120 and worst < 1e-4,
           f"max relative error {worst:.2e} over {len(results)} checks, {elapsed:.1f}s")


def _constant_scene(sigma, colour=(0.2, 0.5, 0.9), C=2):
    logit = np.log(np.array(colour) / (1 - np.array(colour)))
    dec = Decoder([np.zeros((C, 4))], [np.concatenate([[np.log(np.expm1(sigma))], logit])])
    return Scene(TriGrid(*(np.zeros((2, 2, 2, C)) for _ in range(3))), dec, Background(np.zeros((4, 4, 3))))


def test_2_analytic_transmittance():
    rays = RayBundle(np.tile([[-0.5, 0.1, 0.2]], (3, 1)), np.tile([[1.0, 0.0, 0.0]], (3, 1)),
                     np.zeros(3), np.ones(3), np.arange(3))
    want = 1 - np.exp(-2.0)
    homog = max(abs(volume_render(_constant_scene(2.0), rays, n).mask - want).max() for n in (2, 16, 48))
    # density 0.7 then 3.1 along a unit segment, against a 10^5-step midpoint sum
    n = 32
    t = (np.arange(n) + 0.5) / n
    w, _ = composite_weights(np.where(t < 0.5, 0.7, 3.1)[None], np.full((1, n), 1.0 / n))
    fine = (np.arange(100_000) + 0.5) / 100_000
    oracle = 1 - np.exp(-np.mean(np.where(fine < 0.5, 0.7, 3.1)))
    two = abs(w.sum() - oracle)
    record("2 analytic transmittance", homog < 1e-6 and two < 1e-4 and abs(want - 0.86466) < 1e-5,
           f"homogeneous error {homog:.1e} (I^m = {want:.5f}), two-segment error {two:.1e}")


def test_3_triplane_reduction():
    rng = np.random.default_rng(7)
    H, W, C = 5, 7, 4
    grid = TriGrid(*(rng.normal(size=(1, H, W, C)) for _ in range(3)))
    pts = rng.uniform(-1, 1, size=(10_000, 3))
    got = sample_features(grid, pts)
    want = np.zeros_like(got)
    # (u, v) world axes of each stack's planes
    axes = {"xy": (0, 1), "yz": (1, 2), "xz": (0, 2)}
    for name, stack in zip(("xy", "yz", "xz"), grid.stacks()):
        u, v = axes[name]
        x = np.clip((pts[:, u] + 1) / 2 * W - 0.5, 0, W - 1)
        y = np.clip((pts[:, v] + 1) / 2 * H - 0.5, 0, H - 1)
        i0, j0 = np.minimum(x.astype(int), W - 2), np.minimum(y.astype(int), H - 2)
        fx, fy = x - i0, y - j0
        for dj, wy in ((0, 1 - fy), (1, fy)):
            for di, wx in ((0, 1 - fx), (1, fx)):
                want = want + (wy * wx)[:, None] * stack[0, j0 + dj, i0 + di]
    record("3 tri-plane reduction", np.array_equal(got, want),
           f"{int(np.sum(got != want))} of {got.size} values differ from the bilinear formula")


def test_4_mirroring_ablation(proxy, heldout):
    t0 = time.time()
    train = make_dataset(proxy, yaws=ablation_yaws(16), size=SIZE, seed=0).train_views()
    cfg = FitConfig(iterations=ABLATION["iterations"], residuals=False)
    table = ablate_representation(train, heldout, cfg, depth=3, resolution=ABLATION["resolution"],
                                  channels=ABLATION["channels"], hidden=ABLATION["hidden"])
    elapsed = time.time() - t0
    one, three = table["D=1"], table["D=3"]
    margin = three["back_psnr"] - one["back_psnr"]
    gap = abs(three["front_psnr"] - one["front_psnr"])
    budget = abs(one["trigrid_params"] / three["trigrid_params"] - 1)
    n_back = sum(v.is_back for v in heldout)
    ok = margin >= ABLATION_MARGIN_DB and gap <= 1.0 and elapsed < 900 and budget < 0.05 and n_back == 4
    record("4 mirroring ablation", ok,
           f"back PSNR D=3 {three['back_psnr']:.2f} vs D=1 {one['back_psnr']:.2f} (margin {margin:+.2f} dB, "
           f"required {ABLATION_MARGIN_DB}), front gap {gap:.2f} dB, {elapsed:.0f}s")


def test_5_foreground_decomposition(clean_fit, heldout):
    _, config, scene, _, _ = clean_fit
    ev = evaluate_views(scene, heldout, config)
    worst = 0.0
    swap = np.random.default_rng(3).uniform(size=(SIZE, SIZE, 3))
    for view in heldout:
        a = render_image(scene, view.camera)
        b = render_image(scene, view.camera, background=swap)
        solid = a.mask > 0.99
        if solid.any():
            worst = max(worst, float(np.abs(a.composite - b.composite)[solid].max()))
    record("5 foreground decomposition", ev.mask_mse < 1e-2 and worst <= 0.02,
           f"held-out mask MSE {ev.mask_mse:.4f}, max change under background swap {worst:.4f}")


def test_6_camera_self_adaptation(clean_fit, noisy_fits, heldout):
    data, fits = noisy_fits
    label_err = np.mean(np.abs(wrap([r.label.yaw - r.truth.yaw for r in data.records])))
    _, _, res_on, _ = fits[True]
    fit_err = np.mean(np.abs(wrap([apply_camera_residual(r.label, d).yaw - r.truth.yaw
                                   for r, d in zip(data.records, res_on)])))
    psnr = {mode: np.mean(list(evaluate_views(f[1], heldout, f[0]).psnr.values())) for mode, f in fits.items()}
    exact_norm = np.mean([r.norm(v.label) for r, v in zip(clean_fit[3], clean_fit[0].records)])
    reduction = 1 - fit_err / label_err
    ok = reduction >= 0.5 and psnr[True] > psnr[False] and exact_norm <= 0.02
    record("6 camera self-adaptation", ok,
           f"mean |yaw error| {label_err:.4f} -> {fit_err:.4f} ({100 * reduction:.0f}% reduction), held-out PSNR "
           f"{psnr[True]:.2f} vs {psnr[False]:.2f} dB without residuals, exact-label mean |dc| {exact_norm:.4f}")


def test_7_alignment_consistency(proxy):
    cal = calibrate_offsets([(lm, box) for lm, box, _ in dual_detector_samples(proxy, 16, seed=0)])
    centre_px, scale_err = 0.0, 0.0
    for lm, box, _ in dual_detector_samples(proxy, 16, seed=1):
        want, got = align_frontal(lm), align_large_pose(box, cal)
        d = np.linalg.norm(got.source_center() - want.source_center())
        centre_px = max(centre_px, d, d * want.scale)
        scale_err = max(scale_err, abs(got.scale / want.scale - 1))
    rng = np.random.default_rng(11)
    s, t = 1.37, np.array([0.05, -0.11])
    pairs = []
    for _ in range(16):
        lm = canonical_landmarks(64).transformed(scale=rng.uniform(0.5, 2.0), shift=rng.uniform(-20, 20, 2))
        crop = align_frontal(lm, 64)
        size = s * 64 / crop.scale
        pairs.append((lm, HeadBox(tuple(crop.source_center() - t * size), size, size * rng.uniform(0.7, 1.0))))
    rec = calibrate_offsets(pairs)
    recovery = max(abs(rec.ratio - s), *np.abs(np.subtract(rec.shift, t)))
    record("7 alignment consistency", centre_px < 1.0 and scale_err < 0.02 and recovery < 1e-6,
           f"16 images: max centre offset {centre_px:.3f} px, max scale error {100 * scale_err:.2f}%; "
           f"(s, t) recovery error {recovery:.1e}")


def test_8_geometry_extraction(clean_fit):
    n = 64
    r = np.linalg.norm(voxel_centers(n), axis=1)
    sphere = DensityGrid((10.0 + 40.0 * (0.6 - r)).reshape(n, n, n))
    mesh = marching_cubes(sphere, 10.0)
    dev = np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.6).max() / sphere.spacing
    grid = density_grid(clean_fit[2], n)
    fitted = marching_cubes(grid, 10.0)
    cracks = interior_open_edges(fitted, grid)
    record("8 geometry extraction", dev <= 1.5 and len(fitted) > 0 and cracks == 0,
           f"sphere max deviation {dev:.3f} voxels; fitted mesh {len(fitted)} faces, {cracks} interior open edges")


def test_9_round_trip_determinism(tmp_path):
    rng = np.random.default_rng(5)
    rgb = rng.integers(0, 256, size=(9, 13, 3), dtype=np.uint8)
    ppm = io.encode_ppm(rgb)
    pfm = io.encode_pfm(rng.normal(size=(7, 5)).astype(np.float32))
    scene = init_scene(resolution=6, channels=4, hidden=(8,), image_size=(16, 16), seed=1)
    ckpt = io.encode_checkpoint(scene)
    exact = [np.array_equal(io.parse_ppm(ppm), rgb), io.encode_ppm(io.parse_ppm(ppm)) == ppm,
             io.encode_pfm(io.parse_pfm(pfm)) == pfm, io.encode_checkpoint(io.decode_checkpoint(ckpt)) == ckpt]
    data = make_dataset(ProxyScene(), n_views=4, size=16, noise_yaw=0.05, seed=2)
    p = tmp_path / "m.json"
    io.write_manifest(p, {"root": ".", "records": [io.make_manifest_record(r.view_id, "a.ppm", "a.pfm",
                                                                           r.label.to_dict()) for r in data.records]})
    first = p.read_bytes()
    io.write_manifest(p, io.read_manifest(p))
    exact.append(p.read_bytes() == first)
    cfg = FitConfig(iterations=30, batch_pixels=256, samples_per_ray=16, seed=9, workers=2)
    init = init_scene(resolution=6, channels=4, hidden=(8,), image_size=(16, 16), seed=9)
    a = io.encode_checkpoint(fit_scene(data.train_views(), cfg, init)[0])
    b = io.encode_checkpoint(fit_scene(data.train_views(), cfg, init)[0])
    record("9 format round trips and determinism", all(exact) and a == b,
           f"{sum(exact)}/{len(exact)} round trips bit-exact; identical-seed checkpoints "
           f"{'identical' if a == b else 'differ'} ({len(a)} bytes)")


# Supplementary experiments: not acceptance criteria, no PASS/FAIL line.

def test_clean_fit_generalizes_to_unseen_yaws(clean_fit, heldout):
    _, config, scene, _, report = clean_fit
    ev = evaluate_views(scene, heldout, config)
    assert np.mean(list(ev.psnr.values())) >= 25.0
    assert report.losses[-1] < report.losses[0]


def test_residuals_lower_training_loss_under_label_noise(noisy_fits):
    _, fits = noisy_fits
    tail = {mode: np.mean(f[3].losses[-100:]) for mode, f in fits.items()}
    assert tail[True] < tail[False]


def test_symmetric_albedo_removes_depth_advantage():
    sym = ProxyScene(albedo="symmetric")
    train = make_dataset(sym, yaws=ablation_yaws(16), size=SIZE, seed=0).train_views()
    held = heldout_views(sym, np.deg2rad(HELDOUT_DEG), size=SIZE)
    cfg = FitConfig(iterations=ABLATION["iterations"], residuals=False)
    table = ablate_representation(train, held, cfg, depth=3, resolution=ABLATION["resolution"],
                                  channels=ABLATION["channels"], hidden=ABLATION["hidden"])
    assert abs(table["D=3"]["back_psnr"] - table["D=1"]["back_psnr"]) < ABLATION_MARGIN_DB


def test_registration_recovers_held_out_yaw(proxy, clean_fit):
    scene = clean_fit[2]
    target = heldout_views(proxy, [0.6], size=SIZE)[0]
    reg = register_camera(scene, target.rgb, target.camera.replace(yaw=0.5))
    assert abs(reg.camera.yaw - 0.6) < 0.02
    assert reg.losses[-1] <= reg.losses[0]
