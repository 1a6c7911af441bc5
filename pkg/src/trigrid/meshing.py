"""Density voxelization and marching-cubes surface extraction.

The 256-entry triangle table is generated at import time rather than typed in.
For each corner configuration the cut edges on every cube face are paired into
segments, the segments are chained into closed loops, and each loop is fanned
into triangles.  On a face with two diagonally opposite inside corners, each
inside corner is cut off on its own.  The rule looks only at the face's four
corners, so neighbouring cubes always agree on the shared face and the mesh
has no cracks.  (Classic tables resolve some of these faces inconsistently.)

Corner ``i`` of a cube is "inside" when its value is ``>= iso``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .scene import Scene, _decode_forward, sample_features

# corner offsets (x, y, z), classic ordering
CORNERS = np.array([(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
                    (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)])
EDGES = np.array([(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4),
                  (0, 4), (1, 5), (2, 6), (3, 7)])
# faces as cyclic corner loops
FACES = [(0, 1, 2, 3), (4, 5, 6, 7), (0, 1, 5, 4), (3, 2, 6, 7), (0, 3, 7, 4), (1, 2, 6, 5)]

_EDGE_OF = {frozenset(map(int, e)): i for i, e in enumerate(EDGES)}


def _case_triangles(case):
    inside = [(case >> i) & 1 for i in range(8)]
    links = {}

    def link(a, b):
        links.setdefault(a, []).append(b)
        links.setdefault(b, []).append(a)

    for face in FACES:
        ring = [_EDGE_OF[frozenset((face[i], face[(i + 1) % 4]))] for i in range(4)]
        cut = [inside[face[i]] != inside[face[(i + 1) % 4]] for i in range(4)]
        n_cut = sum(cut)
        if n_cut == 2:
            a, b = [ring[i] for i in range(4) if cut[i]]
            link(a, b)
        elif n_cut == 4:
            # separate the inside corners: cut each one off with its two adjacent edges
            for i in range(4):
                if inside[face[i]]:
                    link(ring[(i - 1) % 4], ring[i])

    mid = CORNERS[EDGES].mean(axis=1).astype(float)
    tris = []
    seen = set()
    for start in sorted(links):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        prev, cur = None, start
        while True:
            nxt = [e for e in links[cur] if e != prev]
            nxt = nxt[0] if nxt else links[cur][0]
            if nxt == start:
                break
            loop.append(nxt)
            seen.add(nxt)
            prev, cur = cur, nxt
        # orient so the normal points from inside corners toward outside corners
        pts = mid[loop]
        normal = np.zeros(3)
        for i in range(len(pts)):
            p, q = pts[i], pts[(i + 1) % len(pts)]
            normal += np.cross(p, q)
        outward = np.zeros(3)
        for e in loop:
            a, b = EDGES[e]
            outward += (CORNERS[b] - CORNERS[a]) if inside[a] else (CORNERS[a] - CORNERS[b])
        if normal @ outward < 0:
            loop = loop[::-1]
        for i in range(1, len(loop) - 1):
            tris.append((loop[0], loop[i], loop[i + 1]))
    return tris


TRI_TABLE = [_case_triangles(c) for c in range(256)]


@dataclass
class DensityGrid:
    """Density samples at voxel centres; ``values[i, j, k]`` sits at x_i, y_j, z_k."""

    values: np.ndarray
    bounds: tuple = (-1.0, 1.0)

    def __post_init__(self):
        v = self.values
        if v.ndim != 3 or len(set(v.shape)) != 1 or v.shape[0] < 2:
            raise InvalidInputError(f"density grid must be a cube N^3; got {v.shape}")

    @property
    def resolution(self):
        return self.values.shape[0]

    @property
    def spacing(self):
        lo, hi = self.bounds
        return (hi - lo) / self.resolution

    def coords(self):
        """World coordinate of voxel centres along one axis."""
        lo, _ = self.bounds
        return lo + (np.arange(self.resolution) + 0.5) * self.spacing


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3) world
    faces: np.ndarray  # (F, 3) int, zero-based

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise InvalidInputError("face index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise InvalidInputError("mesh has non-finite vertices")

    def __len__(self):
        return len(self.faces)


def voxel_centers(n, bounds=(-1.0, 1.0)):
    lo, hi = bounds
    c = lo + (np.arange(n) + 0.5) * (hi - lo) / n
    x, y, z = np.meshgrid(c, c, c, indexing="ij")
    return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)


def density_at(scene: Scene, points):
    feats = sample_features(scene.trigrid, points)
    sigma, _, _ = _decode_forward(scene.decoder, feats)
    return sigma


def density_grid(scene: Scene, n=64, chunk=32768) -> DensityGrid:
    if n < 8:
        raise InvalidInputError(f"density grid needs N >= 8; got {n}")
    pts = voxel_centers(n, scene.trigrid.bounds)
    sigma = np.concatenate([density_at(scene, pts[i:i + chunk]) for i in range(0, len(pts), chunk)])
    return DensityGrid(sigma.reshape(n, n, n), scene.trigrid.bounds)


def occupied_cells(grid: DensityGrid, iso):
    """Number of cubes with at least one corner at or above ``iso``."""
    inside = grid.values >= iso
    any_in = np.zeros(tuple(s - 1 for s in inside.shape), dtype=bool)
    for dx, dy, dz in CORNERS:
        any_in |= inside[dx:dx + any_in.shape[0], dy:dy + any_in.shape[1], dz:dz + any_in.shape[2]]
    return int(any_in.sum())


def marching_cubes(grid: DensityGrid, iso=10.0) -> TriMesh:
    if not np.isfinite(iso):
        raise InvalidInputError("iso level must be finite")
    v = grid.values
    n = grid.resolution
    m = n - 1
    inside = (v >= iso).astype(np.int64)
    case = np.zeros((m, m, m), dtype=np.int64)
    for i, (dx, dy, dz) in enumerate(CORNERS):
        case |= inside[dx:dx + m, dy:dy + m, dz:dz + m] << i
    active = np.flatnonzero((case != 0) & (case != 255))
    if len(active) == 0:
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    cases = case.ravel()[active]
    base = np.stack(np.unravel_index(active, (m, m, m)), axis=1)

    # global edge key: (axis, lower-corner x, y, z) on the n^3 lattice
    edge_axis = np.array([np.flatnonzero(CORNERS[b] - CORNERS[a])[0] for a, b in EDGES])
    edge_lo = np.array([np.minimum(CORNERS[a], CORNERS[b]) for a, b in EDGES])

    tri_cube, tri_edges = [], []
    for c in np.unique(cases):
        tris = TRI_TABLE[c]
        if not tris:
            continue
        idx = np.flatnonzero(cases == c)
        t = np.asarray(tris)
        tri_cube.append(np.repeat(idx, len(t)))
        tri_edges.append(np.tile(t, (len(idx), 1)))
    tri_cube = np.concatenate(tri_cube)
    tri_edges = np.concatenate(tri_edges)
    order = np.lexsort((np.arange(len(tri_cube)), tri_cube))  # cube order, then table order
    tri_cube, tri_edges = tri_cube[order], tri_edges[order]

    lo = base[tri_cube][:, None, :] + edge_lo[tri_edges]
    axis = edge_axis[tri_edges]
    keys = ((axis * n + lo[..., 0]) * n + lo[..., 1]) * n + lo[..., 2]
    uniq, inverse = np.unique(keys.ravel(), return_inverse=True)

    ax = uniq // (n ** 3)
    rest = uniq % (n ** 3)
    p0 = np.stack(np.unravel_index(rest, (n, n, n)), axis=1)
    p1 = p0.copy()
    p1[np.arange(len(p1)), ax] += 1
    f0 = v[p0[:, 0], p0[:, 1], p0[:, 2]]
    f1 = v[p1[:, 0], p1[:, 1], p1[:, 2]]
    t = (iso - f0) / (f1 - f0)
    idx = p0 + t[:, None] * (p1 - p0)
    lo_w, _ = grid.bounds
    verts = lo_w + (idx + 0.5) * grid.spacing
    return TriMesh(verts, inverse.reshape(-1, 3))


def mesh_edges(mesh: TriMesh):
    """Undirected edges with the number of triangles using each."""
    e = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0, return_counts=True)


def interior_open_edges(mesh: TriMesh, grid: DensityGrid, tol=1e-9):
    """Edges used by one triangle only, ignoring those on the grid's outer shell.

    A surface that leaves the sampled volume is cut open at the outermost
    voxel-centre planes; those rims are expected.  Anything else is a crack.
    """
    if len(mesh) == 0:
        return 0
    edges, counts = mesh_edges(mesh)
    c = grid.coords()
    lo, hi = c[0], c[-1]
    v = mesh.vertices
    # an edge lies on the shell when both ends sit on the same outer plane
    same_plane = np.zeros(len(edges), dtype=bool)
    for a in range(3):
        for bound in (lo, hi):
            on = np.abs(v[:, a] - bound) < tol * (hi - lo)
            same_plane |= on[edges[:, 0]] & on[edges[:, 1]]
    open_edges = (counts == 1) & ~same_plane
    return int(np.sum(open_edges) + np.sum(counts > 2))


def export_mesh(mesh: TriMesh, path):
    """Write ``v x y z`` / ``f i j k`` (1-based) lines, 6 significant digits."""
    with open(path, "w") as f:
        for x, y, z in mesh.vertices:
            f.write(f"v {x:.6g} {y:.6g} {z:.6g}\n")
        for i, j, k in mesh.faces + 1:
            f.write(f"f {i} {j} {k}\n")


def import_mesh(path) -> TriMesh:
    verts, faces = [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v" and len(parts) == 4:
                verts.append([float(p) for p in parts[1:]])
            elif parts[0] == "f" and len(parts) == 4:
                faces.append([int(p) - 1 for p in parts[1:]])
            else:
                raise InvalidInputError(f"{path}:{lineno}: unrecognised mesh line {line.strip()!r}")
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
