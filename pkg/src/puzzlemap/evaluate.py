"""Point-map recovery from functional maps and scoring against ground truth."""

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import InvalidMap, LengthMismatch
from .mesh import geodesic_distances
from .pfm import eta

UNMATCHED = -1

ERROR_THRESHOLDS = np.round(np.arange(0.01, 0.2501, 0.01), 4)


def nearest_rows(queries, points, chunk=1024):
    """Index of the nearest row of ``points`` for every row of ``queries``.

    Brute-force with BLAS; high-dimensional spectral embeddings defeat
    space-partitioning trees anyway. Returns (indices, distances).
    """
    q2 = (queries * queries).sum(axis=1)
    p2 = (points * points).sum(axis=1)
    idx = np.empty(len(queries), dtype=np.int64)
    dist = np.empty(len(queries))
    for lo in range(0, len(queries), chunk):
        hi = min(lo + chunk, len(queries))
        d2 = q2[lo:hi, None] + p2[None, :] - 2.0 * (queries[lo:hi] @ points.T)
        sub = np.argmin(d2, axis=1)
        idx[lo:hi] = sub
        dist[lo:hi] = np.sqrt(np.maximum(d2[np.arange(hi - lo), sub], 0.0))
    return idx, dist


def recover_p2p(C, basis_model, basis_part, u, v):
    """Per part-vertex model correspondents via spectral nearest neighbors.

    Part vertices with ``eta(v) <= 1/2`` stay unmatched; candidates on the
    model are restricted to ``eta(u) > 1/2``. Returns an index array with
    -1 for unmatched vertices.
    """
    pmap = np.full(basis_part.phi.shape[0], UNMATCHED, dtype=np.int64)
    active_part = np.flatnonzero(eta(v) > 0.5)
    active_model = np.flatnonzero(eta(u) > 0.5)
    if len(active_part) == 0 or len(active_model) == 0:
        return pmap
    emb_model = basis_model.phi[active_model] @ C.T
    emb_part = basis_part.phi[active_part]
    idx, _ = nearest_rows(emb_part, emb_model)
    pmap[active_part] = active_model[idx]
    return pmap


def ground_truth_C(basis_model, basis_part, gt_map, a_part=None):
    """Functional map of a known part-to-model vertex correspondence.

    ``gt_map[j]`` is the model vertex under part vertex j; the map pulls
    model eigenfunctions back to the part and projects them onto the part
    basis. Used for structure tests and as the ICP oracle.
    """
    gt_map = np.asarray(gt_map, dtype=np.int64)
    n, m = basis_part.phi.shape[0], basis_model.phi.shape[0]
    if gt_map.shape != (n,) or gt_map.min() < 0 or gt_map.max() >= m:
        raise InvalidMap("ground-truth map does not cover the part or is out of range")
    a = basis_part.a if a_part is None else a_part
    return basis_part.phi.T @ (a[:, None] * basis_model.phi[gt_map])


def funnel_band_mass(C, rho, bandwidth_frac=0.15):
    """Fraction of squared Frobenius mass within the slant band of a map."""
    k_n, k_m = C.shape
    jj = np.arange(1, k_n + 1, dtype=np.float64)[:, None]
    ii = np.arange(1, k_m + 1, dtype=np.float64)[None, :]
    dist = np.abs(rho * (ii - 1.0) - (jj - 1.0)) / np.sqrt(1.0 + rho * rho)
    band = dist < bandwidth_frac * max(k_n, k_m)
    total = float((C * C).sum())
    if total == 0:
        return 0.0
    return float((C[band] ** 2).sum()) / total


def geodesic_diameter(mesh, n_samples=20, seed=0):
    """Approximate geodesic diameter from farthest-point samples."""
    rng = np.random.default_rng(seed)
    start = int(rng.integers(mesh.n_vertices))
    d = geodesic_distances(mesh, [start])
    diam = float(d.max())
    current = int(np.argmax(d))
    for _ in range(n_samples - 1):
        d = geodesic_distances(mesh, [current])
        if float(d.max()) > diam:
            diam = float(d.max())
        current = int(np.argmax(d))
    return diam


def geodesic_error(pmap, gt_map, model_mesh, thresholds=ERROR_THRESHOLDS):
    """Normalized geodesic error of a recovered point map.

    For every matched part vertex, the model-surface distance between the
    predicted and true images, divided by the model's geodesic diameter.
    Returns (mean, cumulative curve at the given thresholds).
    """
    pmap = np.asarray(pmap, dtype=np.int64)
    gt_map = np.asarray(gt_map, dtype=np.int64)
    matched = np.flatnonzero(pmap != UNMATCHED)
    diam = geodesic_diameter(model_mesh)
    if len(matched) == 0:
        return float("nan"), np.zeros(len(thresholds))
    errs = np.empty(len(matched))
    # group by true target so each distinct target costs one Dijkstra run
    targets = gt_map[matched]
    for t in np.unique(targets):
        sel = targets == t
        d = geodesic_distances(model_mesh, [int(t)])
        errs[sel] = d[pmap[matched[sel]]]
    errs /= diam
    curve = np.array([(errs <= thr).mean() for thr in thresholds])
    return float(errs.mean()), curve


def segmentation_scores(labels_pred, labels_gt, a):
    """Area-weighted IoU per class plus overall accuracy.

    Part labels (1..p) are matched by Hungarian assignment before scoring,
    because interchangeable parts make the labeling ambiguous; the missing
    class 0 has fixed identity. Returns a dict with per-class IoU, mean
    IoU, accuracy, and the label mapping applied to the prediction.
    """
    labels_pred = np.asarray(labels_pred, dtype=np.int64)
    labels_gt = np.asarray(labels_gt, dtype=np.int64)
    a = np.asarray(a, dtype=np.float64)
    if labels_pred.shape != labels_gt.shape or labels_pred.shape != a.shape:
        raise LengthMismatch("labels and areas must have equal length")
    n_classes = int(max(labels_pred.max(initial=0), labels_gt.max(initial=0))) + 1
    inter = np.zeros((n_classes, n_classes))
    for c_pred in range(n_classes):
        sel = labels_pred == c_pred
        for c_gt in range(n_classes):
            inter[c_pred, c_gt] = float(a[sel & (labels_gt == c_gt)].sum())
    if n_classes > 1:
        rows, cols = linear_sum_assignment(inter[1:, 1:], maximize=True)
        mapping = np.arange(n_classes)
        mapping[1 + rows] = 1 + cols
    else:
        mapping = np.zeros(1, dtype=np.int64)
    remapped = mapping[labels_pred]
    area_pred = np.array([a[remapped == c].sum() for c in range(n_classes)])
    area_gt = np.array([a[labels_gt == c].sum() for c in range(n_classes)])
    iou = {}
    for c in range(n_classes):
        inter_c = float(a[(remapped == c) & (labels_gt == c)].sum())
        union_c = area_pred[c] + area_gt[c] - inter_c
        iou[c] = inter_c / union_c if union_c > 0 else float("nan")
    accuracy = float(a[remapped == labels_gt].sum() / a.sum())
    present = [c for c in range(n_classes) if area_gt[c] > 0]
    mean_iou = float(np.nanmean([iou[c] for c in present]))
    return {
        "iou": iou,
        "mean_iou": mean_iou,
        "accuracy": accuracy,
        "mapping": mapping.tolist(),
    }
