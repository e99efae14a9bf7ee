"""Energy terms of the relaxed joint segmentation/correspondence problem.

Every term returns its value together with analytic gradients; the
optimizer never uses finite differences. Memberships are unconstrained
reals; the squashing into [0, 1] happens inside ``eta``.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .descriptors import DescriptorField, shot, landmark_gaussians
from .errors import DegenerateWeights, DimensionMismatch
from .spectral import basis_for_mesh, default_part_basis_size, slant_ratio

# Smoothing constants. The l21 epsilon keeps the data term differentiable;
# the gradient epsilon keeps the boundary-length term differentiable at
# flat fields; the xi width makes the boundary indicator act over a
# transition band a few vertices wide at desk-scale resolution.
EPS_L21 = 1e-6
EPS_GRAD = 1e-8
XI_WIDTH = 0.1


# -- pointwise nonlinearities ------------------------------------------------


def eta(t):
    """Soft clamp of indicator values into (0, 1), centered at 1/2."""
    return 0.5 * np.tanh(6.0 * (np.asarray(t, dtype=np.float64) - 0.5)) + 0.5


def eta_prime(t):
    c = np.cosh(6.0 * (np.asarray(t, dtype=np.float64) - 0.5))
    return 3.0 / (c * c)


def xi(t, s=XI_WIDTH):
    """Smoothed delta at 1/2: picks out the transition band of a membership."""
    d = np.asarray(t, dtype=np.float64) - 0.5
    return np.exp(-(d * d) / (2.0 * s * s)) / (s * np.sqrt(2.0 * np.pi))


def xi_prime(t, s=XI_WIDTH):
    d = np.asarray(t, dtype=np.float64) - 0.5
    return xi(t, s) * (-d / (s * s))


# -- slanted-diagonal machinery ----------------------------------------------


@dataclass(frozen=True)
class FunnelWeights:
    """Nonnegative weights vanishing on the slant line of a partial map.

    Rows index part eigenfunctions, columns model eigenfunctions; the zero
    set is the line through (1, 1) with slope ``rho`` rows per column.
    """

    W: np.ndarray
    rho: float
    sigma: float


def funnel_weights(k_part, k_model, rho, sigma=0.03):
    """Distance-from-slant-line weights with radial decay.

    Entry (m, n) (1-based) is ``exp(-sigma*sqrt(m^2+n^2))`` times the
    distance of (m, n) from the line through p = (1, 1) with direction
    (rho, 1) in (row, col) coordinates.
    """
    if k_part < 1 or k_model < 1:
        raise ValueError("basis sizes must be >= 1")
    if not 0 < rho <= 1:
        raise ValueError("rho must be in (0, 1]")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    m = np.arange(1, k_part + 1, dtype=np.float64)[:, None]
    n = np.arange(1, k_model + 1, dtype=np.float64)[None, :]
    dist = np.abs(rho * (n - 1.0) - (m - 1.0)) / np.sqrt(1.0 + rho * rho)
    decay = np.exp(-sigma * np.sqrt(m * m + n * n))
    return FunnelWeights(W=decay * dist, rho=float(rho), sigma=float(sigma))


def estimate_rank(lam_part, lam_model):
    """Expected rank of a partial map from the two spectra.

    Counts the part eigenvalues lying strictly below the largest model
    eigenvalue; monotone in the model spectrum.
    """
    lam_part = np.asarray(lam_part, dtype=np.float64)
    lam_model = np.asarray(lam_model, dtype=np.float64)
    if lam_part.size == 0 or lam_model.size == 0:
        raise ValueError("spectra must be nonempty")
    return int(np.count_nonzero(lam_part < lam_model.max()))


def init_C(weights):
    """Initial functional map ``1 1^T - W / max(W)``: 1 on the slant, 0 far off."""
    W = weights.W if isinstance(weights, FunnelWeights) else np.asarray(weights)
    wmax = W.max()
    if wmax <= 0:
        raise DegenerateWeights("funnel weights are identically zero")
    return 1.0 - W / wmax


# -- energy terms --------------------------------------------------------------


def data_term(C, A, B):
    """Column-robust descriptor mismatch ``||C A - B||_{2,1}`` (smoothed).

    Each column contributes ``sqrt(||col||^2 + eps^2) - eps``, so an exact
    fit scores 0. Returns (value, dC, dA, dB).
    """
    C, A, B = (np.asarray(x, dtype=np.float64) for x in (C, A, B))
    if C.shape[1] != A.shape[0] or C.shape[0] != B.shape[0] or A.shape[1] != B.shape[1]:
        raise DimensionMismatch(
            f"incompatible shapes C{C.shape} A{A.shape} B{B.shape}"
        )
    R = C @ A - B
    col = np.sqrt((R * R).sum(axis=0) + EPS_L21 * EPS_L21)
    value = float((col - EPS_L21).sum())
    S = R / col  # d value / d R, column-wise
    return value, S @ A.T, C.T @ S, -S


def part_regularizer(mesh, a, u):
    """Boundary length of the soft part ``eta(u)`` (Mumford-Shah style).

    Per face the smoothed gradient magnitude of ``eta(u)`` is weighted by
    the transition indicator ``xi`` at its corners and integrated over the
    surface. Returns (value, gradient wrt u).
    """
    u = np.asarray(u, dtype=np.float64)
    m = mesh.n_vertices
    if u.shape != (m,):
        raise DimensionMismatch(f"membership has shape {u.shape}, expected ({m},)")
    tri = mesh.triangles
    hats = mesh.hat_gradients
    area_f = mesh.face_areas
    e = eta(u)
    ge = np.einsum("tcd,tc->td", hats, e[tri])
    nf = np.sqrt((ge * ge).sum(axis=1) + EPS_GRAD * EPS_GRAD)
    xe = xi(e)
    sum_xi = xe[tri].sum(axis=1)
    value = float((area_f * nf * sum_xi).sum() / 3.0)

    grad_e = np.zeros(m)
    # explicit xi dependence at each corner
    xpe = xi_prime(e)
    np.add.at(
        grad_e,
        tri.ravel(),
        np.repeat(area_f * nf / 3.0, 3) * xpe[tri].ravel(),
    )
    # gradient-magnitude dependence through each corner value
    coeff = area_f * sum_xi / (3.0 * nf)
    contrib = np.einsum("td,tcd->tc", ge, hats) * coeff[:, None]
    np.add.at(grad_e, tri.ravel(), contrib.ravel())
    return value, grad_e * eta_prime(u)


def corr_regularizer(C, W, r, lam1, lam2):
    """Slant, orthogonality, and rank prior on a functional map.

    ``||C . W||_F^2`` plus penalties pushing ``C^T C`` toward a diagonal of
    r ones. Returns (value, dC).
    """
    C = np.asarray(C, dtype=np.float64)
    Wm = W.W if isinstance(W, FunnelWeights) else np.asarray(W)
    if Wm.shape != C.shape:
        raise DimensionMismatch(f"W{Wm.shape} does not match C{C.shape}")
    k_model = C.shape[1]
    if r > k_model:
        raise ValueError(f"rank estimate {r} exceeds model basis size {k_model}")
    CW = C * Wm
    value = float((CW * CW).sum())
    grad = 2.0 * CW * Wm
    S = C.T @ C
    d = np.zeros(k_model)
    d[:r] = 1.0
    off = S - np.diag(np.diag(S))
    diag = np.diag(S) - d
    value += lam1 * float((off * off).sum()) + lam2 * float((diag * diag).sum())
    Fs = 2.0 * lam1 * off + np.diag(2.0 * lam2 * diag)
    grad += 2.0 * C @ Fs
    return value, grad


# -- problem/state containers --------------------------------------------------


@dataclass
class EnergyWeights:
    """Multipliers of the energy terms plus constraint-penalty strengths."""

    lambda_m: float = 0.1
    lambda_n: float = 0.1
    lambda_corr: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    alpha: float = 0.0
    mu_cover: float = 0.0
    mu_area: float = 0.0

    def replace(self, **kw):
        return replace(self, **kw)


@dataclass
class PuzzlePart:
    """One query shape with its spectral and descriptor data."""

    mesh: object
    basis: object
    descr: object  # DescriptorField or (n, q) array
    funnel: FunnelWeights
    rank: int
    rho: float
    outlier: bool = False

    @property
    def G(self):
        return self.descr.D if isinstance(self.descr, DescriptorField) else self.descr


@dataclass
class PuzzleProblem:
    """A model shape, its query parts, and the energy configuration."""

    model_mesh: object
    model_basis: object
    model_descr: object
    parts: list
    weights: EnergyWeights = field(default_factory=EnergyWeights)

    @property
    def p(self):
        return len(self.parts)

    @property
    def F(self):
        d = self.model_descr
        return d.D if isinstance(d, DescriptorField) else d


@dataclass
class PuzzleState:
    """Optimization variables: maps C_i, model memberships u_i, part memberships v_i.

    ``u[0]`` is the membership of the missing part; ``u[i]``/``v[i-1]``
    belong to part i.
    """

    C: list
    u: list
    v: list

    def copy(self):
        return PuzzleState(
            C=[c.copy() for c in self.C],
            u=[x.copy() for x in self.u],
            v=[x.copy() for x in self.v],
        )


@dataclass
class StateGrads:
    dC: list
    du: list
    dv: list


def initial_state(problem):
    """All-ones memberships and funnel-shaped maps, as the solver starts."""
    C = [init_C(part.funnel) for part in problem.parts]
    u = [np.ones(problem.model_mesh.n_vertices) for _ in range(problem.p + 1)]
    v = [np.ones(part.mesh.n_vertices) for part in problem.parts]
    return PuzzleState(C=C, u=u, v=v)


# -- penalties and the assembled energy ---------------------------------------


def constraint_penalties(state, a_model, part_masses, weights):
    """Quadratic penalties replacing the covering and area constraints.

    Covering: the etas of all model memberships (missing part included)
    must sum to 1 at every vertex. Area: each part's matched area on the
    model equals its matched area on itself, and the latter stays above
    the fraction ``alpha`` of the part. Returns (value, du, dv).
    """
    p = len(part_masses)
    if len(state.u) != p + 1 or len(state.v) != p:
        raise DimensionMismatch("state does not match the number of parts")
    eu = [eta(ui) for ui in state.u]
    epu = [eta_prime(ui) for ui in state.u]
    value = 0.0
    du = [np.zeros_like(ui) for ui in state.u]
    dv = [np.zeros_like(vi) for vi in state.v]
    cover = sum(eu) - 1.0
    value += weights.mu_cover * float((a_model * cover * cover).sum())
    for i in range(p + 1):
        du[i] += weights.mu_cover * 2.0 * a_model * cover * epu[i]
    for i, a_part in enumerate(part_masses):
        ev = eta(state.v[i])
        epv = eta_prime(state.v[i])
        area_u = float((a_model * eu[i + 1]).sum())
        area_v = float((a_part * ev).sum())
        diff = area_u - area_v
        value += weights.mu_area * diff * diff
        du[i + 1] += weights.mu_area * 2.0 * diff * a_model * epu[i + 1]
        dv[i] += weights.mu_area * (-2.0) * diff * a_part * epv
        shortfall = weights.alpha * float(a_part.sum()) - area_v
        if shortfall > 0:
            value += weights.mu_area * shortfall * shortfall
            dv[i] += weights.mu_area * (-2.0) * shortfall * a_part * epv
    return value, du, dv


def _chain_to_membership(phi, a, D, G_coeff, membership):
    # d/d membership of <G_coeff, phi^T diag(a*eta(mem)) D>
    return a * eta_prime(membership) * ((phi @ G_coeff) * D).sum(axis=1)


def total_energy(problem, state, weights=None, want_grads=True):
    """Full objective value and, optionally, gradients for every variable.

    Sum of per-part data terms, boundary-length regularizers on model and
    part memberships, slant/orthogonality priors on the maps, and the
    covering/area constraint penalties.
    """
    w = weights if weights is not None else problem.weights
    model_basis = problem.model_basis
    phi, a_m = model_basis.phi, model_basis.a
    F = problem.F
    p = problem.p
    value = 0.0
    grads = (
        StateGrads(
            dC=[np.zeros_like(c) for c in state.C],
            du=[np.zeros_like(u) for u in state.u],
            dv=[np.zeros_like(v) for v in state.v],
        )
        if want_grads
        else None
    )
    for i, part in enumerate(problem.parts):
        psi, a_n = part.basis.phi, part.basis.a
        G = part.G
        eu = eta(state.u[i + 1])
        ev = eta(state.v[i])
        A = phi.T @ ((a_m * eu)[:, None] * F)
        B = psi.T @ ((a_n * ev)[:, None] * G)
        val, gC, gA, gB = data_term(state.C[i], A, B)
        value += val
        if want_grads:
            grads.dC[i] += gC
            grads.du[i + 1] += _chain_to_membership(phi, a_m, F, gA, state.u[i + 1])
            grads.dv[i] += _chain_to_membership(psi, a_n, G, gB, state.v[i])
        if w.lambda_corr != 0:
            val, gC = corr_regularizer(
                state.C[i], part.funnel, part.rank, w.lambda1, w.lambda2
            )
            value += w.lambda_corr * val
            if want_grads:
                grads.dC[i] += w.lambda_corr * gC
        if w.lambda_n != 0:
            val, gv = part_regularizer(part.mesh, a_n, state.v[i])
            value += w.lambda_n * val
            if want_grads:
                grads.dv[i] += w.lambda_n * gv
    if w.lambda_m != 0:
        for i in range(p + 1):
            val, gu = part_regularizer(problem.model_mesh, a_m, state.u[i])
            value += w.lambda_m * val
            if want_grads:
                grads.du[i] += w.lambda_m * gu
    part_masses = [part.basis.a for part in problem.parts]
    val, du, dv = constraint_penalties(state, a_m, part_masses, w)
    value += val
    if want_grads:
        for i in range(p + 1):
            grads.du[i] += du[i]
        for i in range(p):
            grads.dv[i] += dv[i]
    return value, grads


# -- problem assembly ----------------------------------------------------------


def _make_descriptor(mesh, kind, params):
    if kind == "shot":
        return shot(mesh, **params)
    if kind == "landmark_gaussians":
        return landmark_gaussians(mesh, **params)
    raise ValueError(f"unknown descriptor kind {kind!r}")


def build_problem(
    model_mesh,
    part_meshes,
    k_model=80,
    k_part_min=20,
    descriptor="shot",
    descriptor_params=None,
    part_descriptor_params=None,
    weights=None,
    funnel_sigma=0.03,
    cache_dir=None,
    outlier_flags=None,
):
    """Compute bases, descriptors, funnels, and ranks for a puzzle instance.

    ``descriptor_params`` apply to the model; ``part_descriptor_params`` is
    an optional per-part list (needed for landmark descriptors, where each
    mesh has its own landmark indices).
    """
    params = dict(descriptor_params or {})
    model_basis = basis_for_mesh(model_mesh, k_model, cache_dir)
    model_descr = _make_descriptor(model_mesh, descriptor, params)
    area_m = model_mesh.area
    parts = []
    for j, mesh in enumerate(part_meshes):
        rho = slant_ratio(mesh.area, area_m)
        k_part = min(default_part_basis_size(rho, k_model, k_part_min), mesh.n_vertices - 2)
        basis = basis_for_mesh(mesh, k_part, cache_dir)
        pp = params if part_descriptor_params is None else dict(part_descriptor_params[j])
        descr = _make_descriptor(mesh, descriptor, pp)
        funnel = funnel_weights(k_part, k_model, rho, funnel_sigma)
        rank = estimate_rank(basis.lam, model_basis.lam)
        parts.append(
            PuzzlePart(
                mesh=mesh,
                basis=basis,
                descr=descr,
                funnel=funnel,
                rank=rank,
                rho=rho,
                outlier=bool(outlier_flags[j]) if outlier_flags else False,
            )
        )
    return PuzzleProblem(
        model_mesh=model_mesh,
        model_basis=model_basis,
        model_descr=model_descr,
        parts=parts,
        weights=weights if weights is not None else EnergyWeights(),
    )
