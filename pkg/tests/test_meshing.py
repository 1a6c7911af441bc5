import numpy as np
import pytest

from trigrid.errors import InvalidInputError
from trigrid.meshing import (TRI_TABLE, DensityGrid, TriMesh, density_at, density_grid, export_mesh, import_mesh,
                             interior_open_edges, marching_cubes, mesh_edges, occupied_cells, voxel_centers)
from trigrid.scene import init_scene


def sphere_grid(n=64, radius=0.6, centre=(0.0, 0.0, 0.0)):
    pts = voxel_centers(n) - np.asarray(centre)
    # density decreasing outward; iso 10 lands on the sphere
    values = 10.0 + 40.0 * (radius - np.linalg.norm(pts, axis=1))
    return DensityGrid(values.reshape(n, n, n))


def is_closed_and_oriented(mesh):
    _, counts = mesh_edges(mesh)
    directed = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]])
    return bool(np.all(counts == 2)) and len(np.unique(directed, axis=0)) == len(directed)


def test_table_shape():
    assert len(TRI_TABLE) == 256
    assert TRI_TABLE[0] == [] and TRI_TABLE[255] == []
    assert all(len(t) <= 5 for t in TRI_TABLE)


def test_sphere_vertices_on_radius():
    grid = sphere_grid()
    mesh = marching_cubes(grid, 10.0)
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.max(np.abs(r - 0.6)) < 1.5 * grid.spacing
    assert is_closed_and_oriented(mesh)


def test_sphere_normals_point_outward():
    mesh = marching_cubes(sphere_grid(32), 10.0)
    v = mesh.vertices[mesh.faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    assert np.all(np.sum(n * v.mean(axis=1), axis=1) > 0)


def test_random_field_is_crack_free(rng):
    field = rng.normal(size=(12, 12, 12))
    field[0], field[-1], field[:, 0], field[:, -1], field[:, :, 0], field[:, :, -1] = (-10.0,) * 6
    mesh = marching_cubes(DensityGrid(field), 0.0)
    assert len(mesh) > 0
    assert is_closed_and_oriented(mesh)


def test_face_count_matches_reference_implementation(rng):
    # smooth field: ambiguous cube faces (resolved differently by other tables) are rare
    skimage = pytest.importorskip("skimage.measure")
    from scipy.ndimage import gaussian_filter

    field = gaussian_filter(rng.normal(size=(24, 24, 24)), 2.0)
    iso = float(np.quantile(field, 0.6))
    mesh = marching_cubes(DensityGrid(field), iso)
    _, faces, _, _ = skimage.marching_cubes(field, iso)
    assert abs(len(mesh) - len(faces)) <= 1e-3 * len(faces)


def test_empty_and_full_fields():
    assert len(marching_cubes(DensityGrid(np.zeros((8, 8, 8))), 1.0)) == 0
    assert len(marching_cubes(DensityGrid(np.full((8, 8, 8), 5.0)), 1.0)) == 0


def test_occupied_cells_monotone_in_iso():
    grid = sphere_grid(24)
    counts = [occupied_cells(grid, iso) for iso in (0.0, 5.0, 10.0, 20.0, 30.0)]
    assert counts == sorted(counts, reverse=True)


def test_surface_leaving_the_grid_has_only_rim_openings():
    grid = sphere_grid(16, radius=0.6, centre=(0.8, 0.0, 0.0))
    mesh = marching_cubes(grid, 10.0)
    _, counts = mesh_edges(mesh)
    assert np.any(counts == 1)
    assert interior_open_edges(mesh, grid) == 0


def test_density_grid_matches_point_evaluation():
    scene = init_scene(resolution=6, channels=4, hidden=(8,), image_size=(2, 2), seed=0)
    grid = density_grid(scene, 8)
    pts = voxel_centers(8)
    idx = [0, 37, 200, 511]
    for i in idx:
        assert grid.values.reshape(-1)[i] == density_at(scene, pts[i:i + 1])[0]
    with pytest.raises(InvalidInputError):
        density_grid(scene, 4)


def test_obj_round_trip(tmp_path):
    mesh = marching_cubes(sphere_grid(16), 10.0)
    path = tmp_path / "m.obj"
    export_mesh(mesh, path)
    back = import_mesh(path)
    np.testing.assert_array_equal(back.faces, mesh.faces)
    np.testing.assert_allclose(back.vertices, mesh.vertices, rtol=1e-5)
    first = path.read_bytes()
    export_mesh(back, path)
    assert path.read_bytes() == first


def test_mesh_validation(tmp_path):
    with pytest.raises(InvalidInputError):
        TriMesh(np.zeros((2, 3)), np.array([[0, 1, 2]]))
    with pytest.raises(InvalidInputError):
        DensityGrid(np.zeros((4, 4, 5)))
    with pytest.raises(InvalidInputError):
        marching_cubes(sphere_grid(8), np.nan)
    bad = tmp_path / "bad.obj"
    bad.write_text("v 0 0 0\nq 1 2 3\n")
    with pytest.raises(InvalidInputError):
        import_mesh(bad)
