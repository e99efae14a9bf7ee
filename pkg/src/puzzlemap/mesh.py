"""Triangle-mesh container, ASCII mesh I/O, and discrete surface operators.

Meshes are immutable after construction. All operators are pure functions
of the mesh (plus their scalar-field arguments) and safe to call
concurrently.
"""

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import dijkstra

from .errors import (
    DimensionMismatch,
    EmptySourceSet,
    NonManifoldError,
    ParseError,
)

# Vertices closer than this (per coordinate) are merged at load time.
MERGE_TOL = 1e-8


class TriMesh:
    """A triangle mesh: vertex positions plus triangle index triples.

    Parameters
    ----------
    vertices : (m, 3) array_like
        3D vertex positions.
    triangles : (t, 3) array_like
        Vertex-index triples, each index in ``[0, m)``.

    Derived quantities (edges, areas, normals, boundary flags) are computed
    lazily and cached; the underlying arrays are marked read-only.
    """

    def __init__(self, vertices, triangles):
        v = np.ascontiguousarray(vertices, dtype=np.float64)
        t = np.ascontiguousarray(triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError("vertices must be (m, 3)")
        if t.ndim != 2 or t.shape[1] != 3:
            raise ValueError("triangles must be (t, 3)")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        v.flags.writeable = False
        t.flags.writeable = False
        self.vertices = v
        self.triangles = t
        self._cache = {}

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def _cached(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    # -- connectivity ------------------------------------------------------

    @property
    def edges(self):
        """(e, 2) sorted unique vertex pairs appearing in some triangle."""
        return self._cached("edges", lambda: self._edge_data()[0])

    @property
    def edge_face_count(self):
        """Number of triangles incident to each edge (aligned with edges)."""
        return self._cached("edge_face_count", lambda: self._edge_data()[1])

    def _edge_data(self):
        t = self.triangles
        half = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        half = np.sort(half, axis=1)
        edges, counts = np.unique(half, axis=0, return_counts=True)
        self._cache["edges"] = edges
        self._cache["edge_face_count"] = counts
        return edges, counts

    @property
    def is_manifold(self):
        return bool(self.edge_face_count.size == 0 or self.edge_face_count.max() <= 2)

    @property
    def boundary_edges(self):
        return self._cached(
            "boundary_edges", lambda: self.edges[self.edge_face_count == 1]
        )

    # -- per-face geometry -------------------------------------------------

    @property
    def face_corners(self):
        """(t, 3, 3) vertex positions per triangle corner."""
        return self._cached("face_corners", lambda: self.vertices[self.triangles])

    @property
    def face_normals_raw(self):
        """(t, 3) cross products; magnitude is twice the face area."""

        def build():
            c = self.face_corners
            return np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])

        return self._cached("face_normals_raw", build)

    @property
    def face_areas(self):
        return self._cached(
            "face_areas",
            lambda: 0.5 * np.linalg.norm(self.face_normals_raw, axis=1),
        )

    @property
    def face_normals(self):
        def build():
            raw = self.face_normals_raw
            n = np.linalg.norm(raw, axis=1)
            return raw / np.maximum(n, 1e-300)[:, None]

        return self._cached("face_normals", build)

    @property
    def vertex_normals(self):
        """Area-weighted average of incident face normals, unit length."""

        def build():
            vn = np.zeros_like(self.vertices)
            np.add.at(vn, self.triangles.ravel(), np.repeat(self.face_normals_raw, 3, axis=0))
            n = np.linalg.norm(vn, axis=1)
            return vn / np.maximum(n, 1e-300)[:, None]

        return self._cached("vertex_normals", build)

    @property
    def hat_gradients(self):
        """(t, 3, 3) gradient of each corner's linear hat function per face.

        Corner c of face f holds the constant in-plane vector grad(lambda_c);
        the face gradient of a vertex field ``f`` is
        ``sum_c f[tri[f, c]] * hat_gradients[f, c]``.
        """

        def build():
            c = self.face_corners
            n = self.face_normals
            a2 = np.maximum(2.0 * self.face_areas, 1e-300)[:, None]
            # opposite edge of corner c, rotated 90 degrees in the face plane
            g = np.empty_like(c)
            g[:, 0] = np.cross(n, c[:, 2] - c[:, 1]) / a2
            g[:, 1] = np.cross(n, c[:, 0] - c[:, 2]) / a2
            g[:, 2] = np.cross(n, c[:, 1] - c[:, 0]) / a2
            return g

        return self._cached("hat_gradients", build)

    @property
    def area(self):
        return float(self.face_areas.sum())

    @property
    def diameter(self):
        """Largest Euclidean vertex-to-vertex distance (bounding-sphere scale).

        Computed over convex-hull vertices, so it is invariant under rigid
        motions; falls back to all-pairs for tiny or flat meshes.
        """

        def build():
            pts = self.vertices
            if len(pts) > 16:
                try:
                    from scipy.spatial import ConvexHull

                    pts = pts[ConvexHull(pts).vertices]
                except Exception:
                    pass
            d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
            return float(np.sqrt(d2.max()))

        return self._cached("diameter", build)

    @property
    def edge_graph(self):
        """Sparse symmetric matrix of Euclidean edge lengths."""

        def build():
            e = self.edges
            ln = np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)
            m = self.n_vertices
            g = sparse.csr_matrix(
                (np.r_[ln, ln], (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])),
                shape=(m, m),
            )
            return g

        return self._cached("edge_graph", build)


# -- operators ---------------------------------------------------------------


def vertex_areas(mesh):
    """Lumped (barycentric) per-vertex area elements.

    Each vertex receives one third of the area of every incident triangle,
    so the entries sum to the total surface area.
    """
    a = np.zeros(mesh.n_vertices)
    np.add.at(a, mesh.triangles.ravel(), np.repeat(mesh.face_areas / 3.0, 3))
    return a


def face_gradient(mesh, f):
    """Per-face gradient of a per-vertex scalar field (linear FEM).

    Exact for fields that are linear in space; the result lies in each
    face's plane.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.shape != (mesh.n_vertices,):
        raise DimensionMismatch(
            f"field has length {f.shape}, mesh has {mesh.n_vertices} vertices"
        )
    return np.einsum("tcd,tc->td", mesh.hat_gradients, f[mesh.triangles])


def geodesic_distances(mesh, sources):
    """Graph-geodesic distance from a source set to every vertex.

    Dijkstra over the edge graph with Euclidean edge lengths; an upper
    bound on the true polyhedral geodesic distance. Vertices in other
    connected components get ``inf``.
    """
    if isinstance(sources, (set, frozenset)):
        sources = sorted(sources)
    sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    if sources.size == 0:
        raise EmptySourceSet("geodesic_distances needs at least one source")
    if sources.min() < 0 or sources.max() >= mesh.n_vertices:
        raise EmptySourceSet("source index out of range")
    d = dijkstra(mesh.edge_graph, directed=False, indices=sources, min_only=True)
    return d


def boundary_vertices(mesh):
    """Indices of vertices incident to an edge with exactly one face."""
    be = mesh.boundary_edges
    return np.unique(be.ravel())


# -- file I/O ----------------------------------------------------------------


def _clean(vertices, triangles):
    """Merge near-duplicate vertices and drop degenerate faces.

    Vertices are snapped to a grid of spacing MERGE_TOL; the first
    occurrence survives and vertex order is otherwise preserved.
    """
    v = np.asarray(vertices, dtype=np.float64)
    t = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if len(v) == 0:
        raise ParseError("mesh has no vertices")
    keys = np.round(v / MERGE_TOL).astype(np.int64)
    _, first, inverse = np.unique(
        keys, axis=0, return_index=True, return_inverse=True
    )
    inverse = inverse.ravel()
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    v = v[np.sort(first)]
    t = rank[inverse][t]
    # drop collapsed and zero-area faces
    ok = (t[:, 0] != t[:, 1]) & (t[:, 1] != t[:, 2]) & (t[:, 0] != t[:, 2])
    t = t[ok]
    if len(t):
        c = v[t]
        areas = 0.5 * np.linalg.norm(
            np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1
        )
        scale = max(1.0, float(np.abs(v).max())) ** 2
        t = t[areas > 1e-14 * scale]
    return v, t


def _check_manifold(mesh):
    if not mesh.is_manifold:
        bad = int((mesh.edge_face_count > 2).sum())
        raise NonManifoldError(f"{bad} edges with more than two incident faces")


def load_mesh(path, format=None):
    """Load an ASCII OFF, OBJ, or PLY mesh and clean it up.

    Duplicate vertices (within MERGE_TOL) are merged and zero-area faces
    dropped. Raises ParseError on malformed input and NonManifoldError if
    any edge has more than two incident faces.
    """
    path = str(path)
    if format is None:
        format = path.rsplit(".", 1)[-1].lower()
    format = format.lower()
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    if format == "off":
        v, t = _parse_off(text)
    elif format == "obj":
        v, t = _parse_obj(text)
    elif format == "ply":
        v, t = _parse_ply(text)
    else:
        raise ParseError(f"unknown mesh format {format!r}")
    v, t = _clean(v, t)
    mesh = TriMesh(v, t)
    _check_manifold(mesh)
    return mesh


def _parse_off(text):
    tokens = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise ParseError("missing OFF header")
    try:
        nv, nf = int(tokens[1]), int(tokens[2])
        pos = 4  # skip edge count
        flat = [float(x) for x in tokens[pos : pos + 3 * nv]]
        if len(flat) != 3 * nv:
            raise ValueError("truncated vertex block")
        v = np.array(flat).reshape(nv, 3)
        pos += 3 * nv
        tris = []
        for _ in range(nf):
            cnt = int(tokens[pos])
            if cnt != 3:
                raise ValueError("only triangle faces supported")
            tris.append([int(tokens[pos + 1]), int(tokens[pos + 2]), int(tokens[pos + 3])])
            pos += 1 + cnt
        t = np.array(tris, dtype=np.int64).reshape(-1, 3)
    except (ValueError, IndexError) as exc:
        raise ParseError(f"malformed OFF file: {exc}") from exc
    return v, t


def _parse_obj(text):
    verts, tris = [], []
    try:
        for line in text.splitlines():
            line = line.strip()
            if line.startswith("v "):
                parts = line.split()
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif line.startswith("f "):
                idx = [int(p.split("/")[0]) for p in line.split()[1:]]
                if len(idx) != 3:
                    raise ValueError("only triangle faces supported")
                tris.append([i - 1 for i in idx])
    except (ValueError, IndexError) as exc:
        raise ParseError(f"malformed OBJ file: {exc}") from exc
    if not verts:
        raise ParseError("OBJ file contains no vertices")
    return np.array(verts), np.array(tris, dtype=np.int64).reshape(-1, 3)


def _parse_ply(text):
    lines = text.splitlines()
    try:
        if lines[0].strip() != "ply":
            raise ValueError("missing ply magic")
        i = 1
        nv = nf = None
        n_vprops = 0
        in_vertex = False
        if not lines[1].startswith("format ascii"):
            raise ValueError("only ASCII PLY supported")
        while lines[i].strip() != "end_header":
            parts = lines[i].split()
            if parts[:2] == ["element", "vertex"]:
                nv = int(parts[2])
                in_vertex = True
            elif parts[:2] == ["element", "face"]:
                nf = int(parts[2])
                in_vertex = False
            elif parts and parts[0] == "property" and in_vertex:
                n_vprops += 1
            i += 1
        if nv is None or nf is None or n_vprops < 3:
            raise ValueError("incomplete header")
        i += 1
        v = np.array(
            [[float(x) for x in lines[i + j].split()[:3]] for j in range(nv)]
        )
        i += nv
        tris = []
        for j in range(nf):
            parts = lines[i + j].split()
            if int(parts[0]) != 3:
                raise ValueError("only triangle faces supported")
            tris.append([int(parts[1]), int(parts[2]), int(parts[3])])
    except (ValueError, IndexError) as exc:
        raise ParseError(f"malformed PLY file: {exc}") from exc
    return v, np.array(tris, dtype=np.int64).reshape(-1, 3)


def _fmt(x):
    return repr(float(x))


def save_off(mesh, path):
    """Write an ASCII OFF file; floats keep full round-trip precision."""
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.n_vertices} {mesh.n_triangles} 0\n")
        for x, y, z in mesh.vertices:
            fh.write(f"{_fmt(x)} {_fmt(y)} {_fmt(z)}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"3 {a} {b} {c}\n")


def save_ply(mesh, path, colors=None):
    """Write an ASCII PLY file, optionally with per-vertex uchar RGB colors.

    ``colors`` is an (m, 3) array of integers in [0, 255].
    """
    if colors is not None:
        colors = np.asarray(colors)
        if colors.shape != (mesh.n_vertices, 3):
            raise DimensionMismatch("colors must be (m, 3)")
        colors = np.clip(np.rint(colors), 0, 255).astype(np.int64)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {mesh.n_vertices}\n")
        fh.write("property float64 x\nproperty float64 y\nproperty float64 z\n")
        if colors is not None:
            fh.write(
                "property uchar red\nproperty uchar green\nproperty uchar blue\n"
            )
        fh.write(f"element face {mesh.n_triangles}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        for i, (x, y, z) in enumerate(mesh.vertices):
            row = f"{_fmt(x)} {_fmt(y)} {_fmt(z)}"
            if colors is not None:
                row += f" {colors[i, 0]} {colors[i, 1]} {colors[i, 2]}"
            fh.write(row + "\n")
        for a, b, c in mesh.triangles:
            fh.write(f"3 {a} {b} {c}\n")
