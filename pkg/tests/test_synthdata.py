import numpy as np
import pytest

from trigrid.camera import OrbitCamera, generate_rays
from trigrid.errors import InvalidInputError
from trigrid.synthdata import (ProxyScene, albedo, heldout_views, intersect_ellipsoid, make_dataset, pixel_rays,
                               project, render_proxy, silhouette_box, synth_landmarks)


def test_pixel_rays_agree_with_engine_rays():
    cam = OrbitCamera(yaw=2.3, pitch=-0.4, radius=3.1, fov_y=0.8, cx=2.0, cy=-1.0, height=10, width=14)
    centre, dirs = pixel_rays(cam)
    rays = generate_rays(cam)
    np.testing.assert_allclose(rays.origins[0], centre, atol=1e-12)
    np.testing.assert_allclose(rays.directions, dirs, atol=1e-12)


def test_projection_inverts_pixel_rays(rng):
    cam = OrbitCamera(yaw=-0.7, pitch=0.2, cx=1.5, height=20, width=20)
    centre, dirs = pixel_rays(cam)
    idx = rng.choice(400, 10, replace=False)
    pts = centre + 1.7 * dirs[idx]
    rows, cols = np.divmod(idx, 20)
    np.testing.assert_allclose(project(cam, pts), np.stack([cols + 0.5, rows + 0.5], axis=1), atol=1e-9)


def test_sphere_intersection_distance():
    t = intersect_ellipsoid(np.array([0.0, 0.0, 3.0]), np.array([[0.0, 0.0, -1.0], [0.0, 1.0, 0.0]]),
                            (0.5, 0.5, 0.5))
    assert t[0] == pytest.approx(2.5, abs=1e-12)
    assert np.isinf(t[1])


def test_mask_is_exact_coverage():
    proxy = ProxyScene(semi_axes=(0.5, 0.5, 0.5))
    cam = OrbitCamera(yaw=0.0, radius=2.7, height=32, width=32)
    _, mask = render_proxy(proxy, cam)
    centre, dirs = pixel_rays(cam)
    # a ray hits the sphere iff its distance to the origin is at most the radius
    perp = np.linalg.norm(np.cross(dirs, -centre), axis=1)
    np.testing.assert_array_equal(mask.reshape(-1), (perp <= 0.5).astype(float))
    assert set(np.unique(mask)) <= {0.0, 1.0}


def test_background_outside_mask():
    proxy = ProxyScene()
    rgb, mask = render_proxy(proxy, OrbitCamera(yaw=1.0, height=24, width=24))
    np.testing.assert_array_equal(rgb[mask == 0], np.tile(proxy.background, (int((mask == 0).sum()), 1)))
    assert np.all((rgb >= 0) & (rgb <= 1))


def test_front_and_back_differ_only_for_asymmetric_albedo():
    p_front = np.array([[0.1, 0.2, 0.6]])
    p_back = np.array([[0.1, 0.2, -0.6]])
    asym, sym = ProxyScene(), ProxyScene(albedo="symmetric")
    assert not np.allclose(albedo(asym, p_front), albedo(asym, p_back))
    np.testing.assert_array_equal(albedo(sym, p_front), albedo(sym, p_back))


def test_silhouette_box_is_tight():
    proxy = ProxyScene()
    cam = OrbitCamera(yaw=0.6, pitch=0.25, height=200, width=200)
    x0, y0, x1, y1 = silhouette_box(proxy, cam)
    _, mask = render_proxy(proxy, cam)
    rows, cols = np.nonzero(mask)
    # pixel centres covered by the mask sit inside the box and reach it within one pixel
    assert x0 <= cols.min() + 0.5 and cols.max() + 0.5 <= x1
    assert y0 <= rows.min() + 0.5 and rows.max() + 0.5 <= y1
    assert cols.min() + 0.5 - x0 < 1 and x1 - cols.max() - 0.5 < 1
    assert rows.min() + 0.5 - y0 < 1 and y1 - rows.max() - 0.5 < 1


def test_landmarks_follow_the_camera():
    proxy = ProxyScene()
    a = synth_landmarks(proxy, OrbitCamera(yaw=0.0, height=64, width=64))
    b = synth_landmarks(proxy, OrbitCamera(yaw=0.0, cx=3.0, cy=-2.0, height=64, width=64))
    np.testing.assert_allclose(b.array() - a.array(), np.tile([3.0, -2.0], (5, 1)), atol=1e-9)
    assert a.points["left_eye"][0] < a.points["right_eye"][0]


def test_dataset_determinism_and_noise_bounds():
    proxy = ProxyScene()
    a = make_dataset(proxy, n_views=8, size=16, noise_yaw=0.1, crop_drift=4.0, seed=3)
    b = make_dataset(proxy, n_views=8, size=16, noise_yaw=0.1, crop_drift=4.0, seed=3)
    for ra, rb in zip(a.records, b.records):
        assert np.array_equal(ra.rgb, rb.rgb) and ra.label == rb.label
        assert abs(ra.label.yaw - ra.truth.yaw) <= 0.1
        assert max(abs(ra.truth.cx), abs(ra.truth.cy)) <= 4.0
        assert ra.label.cx == 0.0 and ra.label.cy == 0.0
    yaws = np.sort([r.truth.yaw for r in a.records])
    # one view per 45 degree sector
    np.testing.assert_array_equal(np.floor(yaws / (2 * np.pi / 8)), np.arange(8))


def test_detectors_by_pose():
    ds = make_dataset(ProxyScene(), yaws=[0.0, np.pi], size=16, seed=0)
    assert ds.records[0].landmarks is not None and ds.records[0].box is not None
    assert ds.records[1].landmarks is None and ds.records[1].box is not None


def test_heldout_views_use_exact_cameras():
    views = heldout_views(ProxyScene(), [0.0, 3.0], size=16)
    assert [v.camera.yaw for v in views] == [0.0, 3.0]
    assert views[1].is_back and not views[0].is_back


def test_invalid_inputs():
    with pytest.raises(InvalidInputError):
        ProxyScene(semi_axes=(0.5, 1.2, 0.5))
    with pytest.raises(InvalidInputError):
        make_dataset(ProxyScene(), n_views=1)
    with pytest.raises(InvalidInputError):
        make_dataset(ProxyScene(), n_views=4, noise_yaw=-1.0)
