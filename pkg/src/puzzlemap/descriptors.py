"""Dense per-vertex descriptor fields used as corresponding functions.

Two families: SHOT signatures (local, rotation-invariant, resilient to cut
boundaries) and geodesic Gaussians around hand-picked landmarks.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionMismatch, IndexOutOfRange
from .mesh import geodesic_distances

logger = logging.getLogger(__name__)

N_AZIMUTH = 8
N_ELEVATION = 2
N_RADIAL = 2


@dataclass
class DescriptorField:
    """Per-vertex feature matrix plus provenance of how it was computed."""

    D: np.ndarray  # (m, q)
    kind: str
    params: dict = field(default_factory=dict)

    @property
    def q(self):
        return self.D.shape[1]


def _as_matrix(D):
    return D.D if isinstance(D, DescriptorField) else np.asarray(D, dtype=np.float64)


def _local_frame(offsets, dists, radius):
    """Weighted-covariance reference frame with sign disambiguation.

    Signs are fixed by the weighted first moment of the neighborhood along
    each axis; unlike a majority vote this has no ties at even splits.
    Returns a (3, 3) matrix whose rows are the x, y, z axes.
    """
    w = radius - dists
    cov = (offsets * w[:, None]).T @ offsets / w.sum()
    evals, evecs = np.linalg.eigh(cov)  # ascending
    x_axis = evecs[:, 2]
    z_axis = evecs[:, 0]
    moments = w @ offsets
    if moments @ x_axis < 0:
        x_axis = -x_axis
    if moments @ z_axis < 0:
        z_axis = -z_axis
    y_axis = np.cross(z_axis, x_axis)
    return np.vstack([x_axis, y_axis, z_axis])


def _bin_pairs(coord, nbins, wrap):
    """Linear interpolation of continuous bin coordinates.

    Each sample splits its unit weight between its cell and the adjacent
    cell toward which it leans; at non-wrapping borders the share folds
    back into the cell.
    """
    j = np.clip(np.floor(coord).astype(np.int64), 0, nbins - 1)
    f = coord - j - 0.5
    side = np.where(f >= 0, 1, -1)
    neighbor = j + side
    w_nb = np.abs(f)
    if wrap:
        neighbor = neighbor % nbins
    else:
        invalid = (neighbor < 0) | (neighbor >= nbins)
        neighbor = np.where(invalid, j, neighbor)
        w_nb = np.where(invalid, 0.0, w_nb)
    idx = np.stack([j, neighbor], axis=1)
    wgt = np.stack([1.0 - np.abs(f), w_nb], axis=1)
    return idx, wgt


def shot(mesh, radius_frac=0.05, spatial_bins=32, hist_bins=11):
    """SHOT signatures for every vertex of a mesh.

    The support radius is ``radius_frac`` times the Euclidean
    bounding-sphere diameter. Each vertex gets a local reference frame
    from the weighted neighborhood covariance; the support is divided
    into 8 azimuth x 2 elevation x 2 radial sectors and each sector
    holds a ``hist_bins``-bin histogram of the cosine between neighbor
    normals and the frame z axis, filled with quadrilinear
    interpolation. Descriptors are L2-normalized; vertices with an empty
    neighborhood get a zero descriptor and are counted in the returned
    field's params.
    """
    if not 0 < radius_frac < 1:
        raise ValueError("radius_frac must be in (0, 1)")
    if spatial_bins != N_AZIMUTH * N_ELEVATION * N_RADIAL:
        raise ValueError("spatial_bins must be 32 (8 azimuth x 2 elevation x 2 radial)")
    radius = radius_frac * mesh.diameter
    verts = mesh.vertices
    normals = mesh.vertex_normals
    tree = cKDTree(verts)
    neighborhoods = tree.query_ball_point(verts, radius)
    q = spatial_bins * hist_bins
    D = np.zeros((mesh.n_vertices, q))
    n_empty = 0
    n_degenerate = 0
    for v in range(mesh.n_vertices):
        idx = np.asarray(neighborhoods[v], dtype=np.int64)
        offsets = verts[idx] - verts[v]
        dists = np.linalg.norm(offsets, axis=1)
        keep = dists > 1e-12 * radius
        idx, offsets, dists = idx[keep], offsets[keep], dists[keep]
        if len(idx) == 0:
            n_empty += 1
            continue
        if len(idx) < 3:
            # too few points to disambiguate a reference frame
            n_degenerate += 1
            continue
        frame = _local_frame(offsets, dists, radius)
        local = offsets @ frame.T
        azimuth = np.arctan2(local[:, 1], local[:, 0])
        ca = (azimuth + np.pi) / (2 * np.pi) * N_AZIMUTH
        ce = (local[:, 2] / dists + 1.0) / 2.0 * N_ELEVATION
        cr = dists / radius * N_RADIAL
        cosine = np.clip(normals[idx] @ frame[2], -1.0, 1.0)
        cb = (cosine + 1.0) / 2.0 * hist_bins
        ia, wa = _bin_pairs(ca, N_AZIMUTH, wrap=True)
        ie, we = _bin_pairs(ce, N_ELEVATION, wrap=False)
        ir, wr = _bin_pairs(cr, N_RADIAL, wrap=False)
        ib, wb = _bin_pairs(cb, hist_bins, wrap=False)
        # outer product over the four interpolation dimensions
        flat = (
            (
                (ia[:, :, None, None, None] * N_ELEVATION + ie[:, None, :, None, None])
                * N_RADIAL
                + ir[:, None, None, :, None]
            )
            * hist_bins
            + ib[:, None, None, None, :]
        )
        wgt = (
            wa[:, :, None, None, None]
            * we[:, None, :, None, None]
            * wr[:, None, None, :, None]
            * wb[:, None, None, None, :]
        )
        hist = np.zeros(q)
        np.add.at(hist, flat.ravel(), wgt.ravel())
        norm = np.linalg.norm(hist)
        if norm > 0:
            D[v] = hist / norm
    if n_empty or n_degenerate:
        logger.warning(
            "shot: %d vertices with empty and %d with degenerate neighborhoods",
            n_empty,
            n_degenerate,
        )
    return DescriptorField(
        D=D,
        kind="shot",
        params={
            "radius_frac": radius_frac,
            "radius": radius,
            "spatial_bins": spatial_bins,
            "hist_bins": hist_bins,
            "n_empty": n_empty,
            "n_degenerate": n_degenerate,
        },
    )


def landmark_gaussians(mesh, landmarks, sigma_frac=0.05):
    """Geodesic Gaussian bumps centered at landmark vertices, one per column."""
    landmarks = list(landmarks)
    if len(landmarks) == 0:
        raise IndexOutOfRange("landmark list is empty")
    for lm in landmarks:
        if not 0 <= lm < mesh.n_vertices:
            raise IndexOutOfRange(f"landmark {lm} outside [0, {mesh.n_vertices})")
    if sigma_frac <= 0:
        raise ValueError("sigma_frac must be positive")
    sigma = sigma_frac * mesh.diameter
    cols = []
    for lm in landmarks:
        d = geodesic_distances(mesh, [lm])
        cols.append(np.exp(-(d**2) / (2.0 * sigma**2)))
    D = np.column_stack(cols)
    return DescriptorField(
        D=D,
        kind="landmark_gaussians",
        params={"landmarks": landmarks, "sigma_frac": sigma_frac, "sigma": sigma},
    )


def project_descriptors(basis, membership, D):
    """Spectral coefficients of a descriptor field restricted to a soft part.

    Computes ``phi^T diag(a * membership) D``: the area weighting makes the
    projection a true L2 inner product, consistent with the basis being
    mass-orthonormal.
    """
    Dm = _as_matrix(D)
    membership = np.asarray(membership, dtype=np.float64)
    m = basis.phi.shape[0]
    if membership.shape != (m,):
        raise DimensionMismatch(f"membership must have length {m}")
    if Dm.shape[0] != m:
        raise DimensionMismatch(f"descriptor rows {Dm.shape[0]} != vertices {m}")
    w = basis.a * membership
    return basis.phi.T @ (w[:, None] * Dm)
