"""Synthetic non-rigid puzzle generation with exact ground truth.

Builds part meshes by cutting a model along geodesic Voronoi cells,
optionally dilating them (overlap), carving out a missing region, adding
an unrelated outlier shape, and applying a smooth near-isometric
deformation to every part. Part vertices keep their identity with model
vertices, so ground-truth maps are exact injections.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptySelection, SpecInfeasible
from .mesh import TriMesh, geodesic_distances, load_mesh, save_off, vertex_areas
from .pfm import EnergyWeights, build_problem
from .spectral import basis_for_mesh


@dataclass
class PuzzleSpec:
    """Recipe for one synthetic puzzle; fully determines it given the seed."""

    model_path: str = ""
    p: int = 3
    overlap_frac: float = 0.0
    missing_frac: float = 0.0
    outlier_path: str = ""
    deform_amplitude: float = 0.0
    seed: int = 0
    alpha: float | None = None  # default: (1 - overlap_frac) * 0.8
    jitter: bool = False

    def validate(self):
        if self.p < 1:
            raise SpecInfeasible("need at least one part")
        if not 0 <= self.overlap_frac < 1 or not 0 <= self.missing_frac < 1:
            raise SpecInfeasible("overlap_frac and missing_frac must be in [0, 1)")
        if self.overlap_frac + self.missing_frac >= 1:
            raise SpecInfeasible("overlap_frac + missing_frac must stay below 1")
        if self.deform_amplitude < 0:
            raise SpecInfeasible("deform_amplitude must be nonnegative")
        if self.p == 1 and self.overlap_frac > 0:
            raise SpecInfeasible("overlap requires at least two parts")

    def to_dict(self):
        return {
            "model_path": self.model_path,
            "p": self.p,
            "overlap_frac": self.overlap_frac,
            "missing_frac": self.missing_frac,
            "outlier_path": self.outlier_path,
            "deform_amplitude": self.deform_amplitude,
            "seed": self.seed,
            "alpha": self.alpha,
            "jitter": self.jitter,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class GroundTruthPart:
    model_vertices: np.ndarray  # model vertex indices the part covers
    injection: np.ndarray  # part vertex -> model vertex (empty for outliers)
    outlier: bool = False


@dataclass
class PuzzleGroundTruth:
    labels: np.ndarray  # per model vertex: 0 = missing, 1..p = part cell
    parts: list = field(default_factory=list)


def voronoi_parts(mesh, p, seed=0):
    """Geodesic Voronoi labels (0..p-1) from farthest-point-sampled seeds."""
    if not 1 <= p <= mesh.n_vertices:
        raise SpecInfeasible(f"cannot place {p} parts on {mesh.n_vertices} vertices")
    rng = np.random.default_rng(seed)
    seeds = [int(rng.integers(mesh.n_vertices))]
    dmin = geodesic_distances(mesh, [seeds[0]])
    for _ in range(p - 1):
        seeds.append(int(np.argmax(dmin)))
        dmin = np.minimum(dmin, geodesic_distances(mesh, [seeds[-1]]))
    dists = np.vstack([geodesic_distances(mesh, [s]) for s in seeds])
    return np.argmin(dists, axis=0)


def extract_part(mesh, selection):
    """Submesh of all faces whose three corners lie in the selection.

    ``selection`` is a boolean mask or an index array over model vertices.
    Returns (submesh, vertex_map) where vertex_map[i] is the model index
    of submesh vertex i; vertices without a surviving face are dropped.
    """
    selection = np.asarray(selection)
    if selection.dtype == bool:
        mask = selection
    else:
        if selection.size == 0:
            raise EmptySelection("empty vertex selection")
        mask = np.zeros(mesh.n_vertices, dtype=bool)
        mask[selection] = True
    if not mask.any():
        raise EmptySelection("empty vertex selection")
    keep = mask[mesh.triangles].all(axis=1)
    faces = mesh.triangles[keep]
    if len(faces) == 0:
        raise EmptySelection("selection contains no complete face")
    used = np.unique(faces)
    remap = np.full(mesh.n_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    sub = TriMesh(mesh.vertices[used], remap[faces])
    return sub, used


def deform(mesh, amplitude, seed=0):
    """Smooth near-isometric warp along vertex normals.

    The displacement field is a seeded random combination of the first
    five nonconstant Laplacian eigenfunctions, scaled so the largest
    offset is ``amplitude`` times the mesh diameter.
    """
    if amplitude == 0:
        return TriMesh(mesh.vertices, mesh.triangles)
    basis = basis_for_mesh(mesh, 6)
    rng = np.random.default_rng(seed)
    coeff = rng.normal(size=5)
    s = basis.phi[:, 1:6] @ coeff
    s /= np.abs(s).max()
    disp = amplitude * mesh.diameter * s[:, None] * mesh.vertex_normals
    return TriMesh(mesh.vertices + disp, mesh.triangles)


def jitter_mesh(mesh, magnitude=0.2, seed=0):
    """Tangential vertex jitter plus one Delaunay edge-flip sweep.

    A cheap stand-in for independent remeshing; vertex identity (and thus
    ground-truth maps) is preserved. ``magnitude`` is relative to the mean
    incident edge length.
    """
    rng = np.random.default_rng(seed)
    v = mesh.vertices.copy()
    edge_len = np.linalg.norm(
        v[mesh.edges[:, 0]] - v[mesh.edges[:, 1]], axis=1
    )
    scale = np.zeros(mesh.n_vertices)
    count = np.zeros(mesh.n_vertices)
    np.add.at(scale, mesh.edges.ravel(), np.repeat(edge_len, 2))
    np.add.at(count, mesh.edges.ravel(), 1.0)
    scale /= np.maximum(count, 1.0)
    normals = mesh.vertex_normals
    raw = rng.normal(size=v.shape)
    tang = raw - normals * np.einsum("vd,vd->v", raw, normals)[:, None]
    norm = np.linalg.norm(tang, axis=1)
    tang /= np.maximum(norm, 1e-12)[:, None]
    from .mesh import boundary_vertices

    interior = np.ones(mesh.n_vertices, dtype=bool)
    interior[boundary_vertices(mesh)] = False
    v[interior] += (
        magnitude * scale[interior, None] * rng.uniform(0, 1, size=(interior.sum(), 1))
    ) * tang[interior]
    tris = _delaunay_flip_pass(v, mesh.triangles)
    return TriMesh(v, tris)


def _delaunay_flip_pass(verts, triangles):
    # one sweep: flip interior edges violating the angle criterion
    tris = [tuple(t) for t in triangles]
    edge_to_faces = {}
    for fi, (a, b, c) in enumerate(tris):
        for u, w in ((a, b), (b, c), (c, a)):
            edge_to_faces.setdefault((min(u, w), max(u, w)), []).append(fi)
    existing = set(edge_to_faces)

    def cot_opposite(p, q, o):
        e1, e2 = verts[p] - verts[o], verts[q] - verts[o]
        cr = np.linalg.norm(np.cross(e1, e2))
        return float(e1 @ e2) / max(cr, 1e-300)

    flipped = set()
    out = [list(t) for t in tris]
    for (u, w), faces in edge_to_faces.items():
        if len(faces) != 2 or faces[0] in flipped or faces[1] in flipped:
            continue
        f0, f1 = (out[faces[0]], out[faces[1]])
        o0 = next(x for x in f0 if x not in (u, w))
        o1 = next(x for x in f1 if x not in (u, w))
        if o0 == o1 or (min(o0, o1), max(o0, o1)) in existing:
            continue
        if cot_opposite(u, w, o0) + cot_opposite(u, w, o1) < 0:
            # replace (u,w,o0),(w,u,o1) with (o0,o1,w),(o1,o0,u)
            i0 = f0.index(u)
            keep_orient = f0[(i0 + 1) % 3] == w
            if keep_orient:
                out[faces[0]] = [u, o1, o0]
                out[faces[1]] = [w, o0, o1]
            else:
                out[faces[0]] = [u, o0, o1]
                out[faces[1]] = [w, o1, o0]
            flipped.update(faces)
            existing.add((min(o0, o1), max(o0, o1)))
    return np.array(out, dtype=np.int64)


def _grow_missing_region(mesh, areas, missing_frac, rng):
    seed_vertex = int(rng.integers(mesh.n_vertices))
    d = geodesic_distances(mesh, [seed_vertex])
    order = np.argsort(d)
    cum = np.cumsum(areas[order])
    target = missing_frac * areas.sum()
    n_take = int(np.searchsorted(cum, target)) + 1
    missing = np.zeros(mesh.n_vertices, dtype=bool)
    missing[order[:n_take]] = True
    return missing


def _dilate_to_overlap(mesh, areas, cells, missing, overlap_frac):
    """Grow each cell geodesically (never into the missing region) until
    the doubly-covered area reaches the target fraction of total area.

    ``cells`` holds -1 on missing vertices and 0..p-1 elsewhere."""
    p = cells.max() + 1
    dist_to_cell = np.vstack(
        [geodesic_distances(mesh, np.flatnonzero(cells == i)) for i in range(p)]
    )
    total = areas.sum()

    def covered_sets(delta):
        sets = dist_to_cell <= delta
        sets[:, missing] = False
        return sets

    def overlap_area(delta):
        return float(areas[covered_sets(delta).sum(axis=0) >= 2].sum())

    if overlap_frac <= 0:
        return covered_sets(0.0)
    target = overlap_frac * total
    lo, hi = 0.0, mesh.diameter
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if overlap_area(mid) < target:
            lo = mid
        else:
            hi = mid
    return covered_sets(hi)


def make_puzzle(spec, model_mesh=None, outlier_mesh=None, build=None):
    """Generate (PuzzleProblem, PuzzleGroundTruth) from a spec.

    ``model_mesh``/``outlier_mesh`` override the spec paths when given
    (programmatic use). ``build`` is an optional dict of keyword arguments
    forwarded to ``pfm.build_problem`` (basis sizes, descriptor choice,
    weights, cache_dir).
    """
    spec.validate()
    if model_mesh is None:
        model_mesh = load_mesh(spec.model_path)
    if outlier_mesh is None and spec.outlier_path:
        outlier_mesh = load_mesh(spec.outlier_path)
    rng = np.random.default_rng(spec.seed)
    areas = vertex_areas(model_mesh)

    missing = np.zeros(model_mesh.n_vertices, dtype=bool)
    if spec.missing_frac > 0:
        missing = _grow_missing_region(model_mesh, areas, spec.missing_frac, rng)
    candidates = np.flatnonzero(~missing)
    if len(candidates) < spec.p * 3:
        raise SpecInfeasible("not enough uncovered vertices for the requested parts")

    # farthest-point seeds restricted to the kept region
    seeds = [int(rng.choice(candidates))]
    dmin = geodesic_distances(model_mesh, [seeds[0]])
    for _ in range(spec.p - 1):
        masked = np.where(missing, -np.inf, dmin)
        seeds.append(int(np.argmax(masked)))
        dmin = np.minimum(dmin, geodesic_distances(model_mesh, [seeds[-1]]))
    dists = np.vstack([geodesic_distances(model_mesh, [s]) for s in seeds])
    cells = np.argmin(dists, axis=0)
    cells[missing] = -1
    for i in range(spec.p):
        if not (cells == i).any():
            raise SpecInfeasible(f"empty Voronoi cell for part {i + 1}")

    cov = _dilate_to_overlap(model_mesh, areas, cells, missing, spec.overlap_frac)
    labels = np.where(missing, 0, cells + 1)

    part_meshes, gt_parts = [], []
    for i in range(spec.p):
        sel = cov[i] if spec.overlap_frac > 0 else (cells == i)
        sub, vmap = extract_part(model_mesh, sel)
        part_seed = int(rng.integers(2**31))
        warped = deform(sub, spec.deform_amplitude, seed=part_seed)
        if spec.jitter:
            warped = jitter_mesh(warped, seed=part_seed + 1)
        part_meshes.append(warped)
        gt_parts.append(
            GroundTruthPart(
                model_vertices=np.flatnonzero(sel), injection=vmap, outlier=False
            )
        )
    outlier_flags = [False] * spec.p
    if outlier_mesh is not None:
        part_meshes.append(outlier_mesh)
        gt_parts.append(
            GroundTruthPart(
                model_vertices=np.array([], dtype=np.int64),
                injection=np.array([], dtype=np.int64),
                outlier=True,
            )
        )
        outlier_flags.append(True)

    alpha = spec.alpha if spec.alpha is not None else (1.0 - spec.overlap_frac) * 0.8
    build_kw = dict(build or {})
    weights = build_kw.pop("weights", EnergyWeights())
    weights = weights.replace(alpha=alpha)
    problem = build_problem(
        model_mesh,
        part_meshes,
        weights=weights,
        outlier_flags=outlier_flags,
        **build_kw,
    )
    gt = PuzzleGroundTruth(labels=labels, parts=gt_parts)
    return problem, gt


# -- puzzle directory I/O ------------------------------------------------------


def _dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def write_puzzle_dir(outdir, model_mesh, part_meshes, gt, spec):
    """Write model.off, part_%d.off, ground_truth.json, and spec.json."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    save_off(model_mesh, outdir / "model.off")
    for i, mesh in enumerate(part_meshes):
        save_off(mesh, outdir / f"part_{i}.off")
    payload = {
        "labels": gt.labels.tolist(),
        "parts": [
            {
                "model_vertices": p.model_vertices.tolist(),
                "injection": p.injection.tolist(),
                "outlier": p.outlier,
            }
            for p in gt.parts
        ],
    }
    _dump_json(payload, outdir / "ground_truth.json")
    _dump_json(spec.to_dict(), outdir / "spec.json")


def read_puzzle_dir(indir):
    """Load a puzzle directory back into meshes + ground truth + spec."""
    indir = Path(indir)
    model = load_mesh(indir / "model.off")
    spec = PuzzleSpec.from_dict(json.loads((indir / "spec.json").read_text()))
    gt_raw = json.loads((indir / "ground_truth.json").read_text())
    parts, meshes = [], []
    for i, praw in enumerate(gt_raw["parts"]):
        meshes.append(load_mesh(indir / f"part_{i}.off"))
        parts.append(
            GroundTruthPart(
                model_vertices=np.asarray(praw["model_vertices"], dtype=np.int64),
                injection=np.asarray(praw["injection"], dtype=np.int64),
                outlier=bool(praw["outlier"]),
            )
        )
    gt = PuzzleGroundTruth(
        labels=np.asarray(gt_raw["labels"], dtype=np.int64), parts=parts
    )
    return model, meshes, gt, spec
