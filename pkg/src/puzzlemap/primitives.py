"""Procedural test meshes: icospheres, flat grids, and blobby closed shapes."""

import numpy as np

from .mesh import TriMesh


def icosahedron():
    p = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
            [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
            [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    tris = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    return verts, tris


def icosphere(subdivisions=3, radius=1.0):
    """Unit icosahedron subdivided ``subdivisions`` times, projected to a sphere.

    Vertex/face counts follow loop subdivision: V = 10*4^s + 2, F = 20*4^s.
    """
    verts, tris = icosahedron()
    verts = list(map(tuple, verts))
    for _ in range(subdivisions):
        midpoint = {}
        new_tris = []

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in midpoint:
                p = np.array(verts[i]) + np.array(verts[j])
                p /= np.linalg.norm(p)
                midpoint[key] = len(verts)
                verts.append(tuple(p))
            return midpoint[key]

        for a, b, c in tris:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_tris += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        tris = np.array(new_tris, dtype=np.int64)
    v = np.array(verts, dtype=np.float64)
    v *= radius / np.linalg.norm(v, axis=1)[:, None]
    return TriMesh(v, tris)


def grid_mesh(nx=10, ny=10, width=1.0, height=1.0):
    """Flat rectangular patch in the z=0 plane with (nx+1)*(ny+1) vertices."""
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])

    def vid(i, j):
        return i * (ny + 1) + j

    tris = []
    for i in range(nx):
        for j in range(ny):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            tris += [[a, b, c], [a, c, d]]
    return TriMesh(verts, np.array(tris, dtype=np.int64))


def blob(subdivisions=3, seed=0, bumpiness=0.25, harmonics=4):
    """Closed genus-0 mesh: an icosphere with a smooth seeded radial warp.

    A stand-in for organic scanned shapes; bumpiness is the relative radial
    modulation amplitude.
    """
    base = icosphere(subdivisions)
    rng = np.random.default_rng(seed)
    v = base.vertices.copy()
    r = np.ones(len(v))
    for _ in range(harmonics):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        freq = rng.uniform(1.0, 3.0)
        phase = rng.uniform(0, 2 * np.pi)
        r += (bumpiness / harmonics) * np.sin(freq * np.pi * (v @ d) + phase)
    return TriMesh(v * r[:, None], base.triangles)
