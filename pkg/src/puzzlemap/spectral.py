"""Cotangent Laplace-Beltrami discretization and its truncated eigenbasis.

The cotan stiffness matrix together with lumped vertex areas gives the
generalized eigenproblem ``L phi = lambda A phi``; the free (Neumann)
boundary condition is encoded weakly by the assembly itself, so meshes
with boundary need no special handling.
"""

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .errors import (
    ConvergenceError,
    InsufficientBasis,
    InsufficientSize,
    NonPositiveArea,
)
from .mesh import vertex_areas

# Cotangents of near-degenerate corners are clamped to this magnitude;
# synthetic cuts routinely produce sliver triangles.
COT_CLAMP = 1e4


def cotan_laplacian(mesh):
    """Sparse symmetric PSD stiffness matrix with cotangent weights.

    Off-diagonal entries are -(cot a + cot b)/2 over the angles opposite
    the edge (a single cotangent on boundary edges); diagonals make row
    sums vanish.
    """
    t = mesh.triangles
    c = mesh.face_corners
    m = mesh.n_vertices
    rows, cols, vals = [], [], []
    for k in range(3):
        i, j, o = t[:, k], t[:, (k + 1) % 3], t[:, (k + 2) % 3]
        e1 = c[:, k] - c[:, (k + 2) % 3]
        e2 = c[:, (k + 1) % 3] - c[:, (k + 2) % 3]
        cross = np.linalg.norm(np.cross(e1, e2), axis=1)
        cot = np.einsum("td,td->t", e1, e2) / np.maximum(cross, 1e-300)
        cot = np.clip(cot, -COT_CLAMP, COT_CLAMP)
        w = 0.5 * cot
        rows += [i, j]
        cols += [j, i]
        vals += [-w, -w]
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    L = sparse.csr_matrix((vals, (rows, cols)), shape=(m, m))
    L = L - sparse.diags(np.asarray(L.sum(axis=1)).ravel())
    return L.tocsr()


@dataclass(frozen=True)
class SpectralBasis:
    """Truncated Laplacian eigenbasis of one mesh.

    phi : (m, k) eigenfunctions, orthonormal under the lumped mass
    lam : (k,) ascending eigenvalues, lam[0] ~ 0 per connected component
    a   : (m,) lumped vertex areas
    """

    phi: np.ndarray
    lam: np.ndarray
    a: np.ndarray

    @property
    def k(self):
        return self.phi.shape[1]

    @property
    def total_area(self):
        return float(self.a.sum())


def _canonical_signs(phi):
    # flip each column so its largest-magnitude entry is positive; removes
    # the solver's arbitrary sign choice
    idx = np.argmax(np.abs(phi), axis=0)
    signs = np.sign(phi[idx, np.arange(phi.shape[1])])
    signs[signs == 0] = 1.0
    return phi * signs


def eigenbasis(L, a, k, maxiter=None):
    """k smallest generalized eigenpairs of ``L phi = lambda A phi``.

    Shift-invert Lanczos on ``L + eps*A`` with a tiny negative shift keeps
    the factorization definite despite the zero eigenvalue. Eigenvectors
    are mass-orthonormal with canonical signs; eigenvalues clamped at 0.
    """
    a = np.asarray(a, dtype=np.float64)
    m = L.shape[0]
    if k >= m:
        raise InsufficientSize(f"k={k} must be smaller than m={m}")
    if np.any(a <= 0):
        raise NonPositiveArea("mass vector must be positive")
    A = sparse.diags(a).tocsc()
    eps = 1e-8 * (L.diagonal().sum() / m)
    v0 = np.full(m, 1.0 / np.sqrt(m))
    try:
        lam, phi = eigsh(
            L.tocsc(), k=k, M=A, sigma=-eps, which="LM", v0=v0, maxiter=maxiter
        )
    except ArpackNoConvergence as exc:
        raise ConvergenceError(f"eigensolver did not converge: {exc}") from exc
    order = np.argsort(lam)
    lam = np.maximum(lam[order], 0.0)
    phi = _canonical_signs(np.ascontiguousarray(phi[:, order]))
    return SpectralBasis(phi=phi, lam=lam, a=a)


def basis_for_mesh(mesh, k, cache_dir=None):
    """Assemble the Laplacian and eigenbasis for a mesh, with optional cache.

    The cache key is a content hash of the vertex/triangle arrays plus k,
    so re-running a CLI pipeline skips repeated eigensolves.
    """
    if cache_dir is not None:
        path = Path(cache_dir) / f"basis_{_mesh_hash(mesh)}_k{k}.npz"
        if path.exists():
            data = np.load(path)
            return SpectralBasis(phi=data["phi"], lam=data["lam"], a=data["a"])
    L = cotan_laplacian(mesh)
    a = vertex_areas(mesh)
    basis = eigenbasis(L, a, k)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        np.savez(path, phi=basis.phi, lam=basis.lam, a=basis.a, k=np.int64(k))
    return basis


def _mesh_hash(mesh):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mesh.vertices).tobytes())
    h.update(np.ascontiguousarray(mesh.triangles).tobytes())
    return h.hexdigest()[:16]


def weyl_slope(basis_or_lam):
    """Least-squares slope of eigenvalue vs index over the upper half spectrum.

    By Weyl's asymptotic law the slope is inversely proportional to surface
    area, which is what makes slopes of a part and its model comparable.
    """
    lam = basis_or_lam.lam if hasattr(basis_or_lam, "lam") else np.asarray(basis_or_lam)
    k = len(lam)
    if k < 20:
        raise InsufficientBasis(f"need k >= 20 eigenvalues, got {k}")
    lo = k // 2
    idx = np.arange(lo, k, dtype=np.float64) + 1.0  # 1-based eigen index
    y = lam[lo:]
    slope = np.polyfit(idx, y, 1)[0]
    return float(slope)


def slant_ratio(area_part, area_model):
    """Part-to-model area ratio, clamped to (0, 1]; the slant of the map."""
    if area_part <= 0 or area_model <= 0:
        raise NonPositiveArea("areas must be positive")
    return float(min(1.0, area_part / area_model))


def default_part_basis_size(rho, k_model, k_min=20):
    """Part basis size: the slant-determined share of the model basis."""
    return max(k_min, int(round(rho * k_model)))
