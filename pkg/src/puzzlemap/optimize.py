"""Threefold alternating minimization with spectral ICP refinement.

The outer loop cycles C -> (ICP) -> v -> u, each block solved by a
monotone nonlinear conjugate gradient under quadratic constraint
penalties. Each block's objective equals the full energy up to terms that
are constant within the block, so recorded energies form one comparable,
non-increasing trace.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteEnergy
from .evaluate import nearest_rows, recover_p2p
from .pfm import (
    EPS_L21,
    corr_regularizer,
    data_term,
    eta,
    eta_prime,
    part_regularizer,
    initial_state,
    total_energy,
)

logger = logging.getLogger(__name__)


@dataclass
class SolveConfig:
    max_outer: int = 20
    cg_iters_per_block: int = 150
    rel_tol: float = 1e-4
    icp_enabled: bool = True
    icp_iters: int = 10
    rng_seed: int = 0
    # penalty schedule: initial strength relative to data term, doubled
    # while constraint residuals stay above violation_tol
    penalty_scale: float = 1e3
    violation_tol: float = 0.01


@dataclass
class TraceRow:
    outer: int
    block: str  # C, icp, v, u
    energy: float
    covering_residual: float
    max_area_residual: float


@dataclass
class Solution:
    state: object
    trace: list
    labels: np.ndarray
    point_maps: list
    weights: object
    converged: bool = False

    def trace_csv(self):
        lines = ["outer_iter,block,energy,covering_residual,max_area_residual"]
        for row in self.trace:
            lines.append(
                f"{row.outer},{row.block},{row.energy!r},"
                f"{row.covering_residual!r},{row.max_area_residual!r}"
            )
        return "\n".join(lines) + "\n"


# -- generic monotone nonlinear CG --------------------------------------------


def ncg_minimize(
    fun,
    x0,
    max_iters,
    armijo_c=1e-4,
    backtrack=0.5,
    max_backtracks=30,
):
    """Polak-Ribiere+ conjugate gradient with Armijo backtracking.

    ``fun(x, want_grad)`` returns (value, grad-or-None). Only strictly
    non-increasing steps are accepted; if even the steepest-descent
    fallback cannot decrease, the current point is returned.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    f, g = fun(x, True)
    if not np.isfinite(f):
        raise NonFiniteEnergy("objective not finite at block start")
    d = -g
    alpha = None
    since_restart = 0
    n = x.size
    for _ in range(max_iters):
        gnorm2 = float(g @ g)
        if gnorm2 <= (1e-12 * max(1.0, abs(f))) ** 2:
            break
        dg = float(d @ g)
        if dg >= 0:  # restart on non-descent direction
            d, dg = -g, -gnorm2
            since_restart = 0
        step = 2.0 * alpha if alpha is not None else 1.0 / np.sqrt(gnorm2)
        xn = fn = None
        accepted = False
        for attempt in range(2):
            trial = step
            for _bt in range(max_backtracks):
                cand = x + trial * d
                fc, _ = fun(cand, False)
                if np.isfinite(fc) and fc <= f + armijo_c * trial * dg:
                    xn, fn, accepted = cand, fc, True
                    break
                trial *= backtrack
            if accepted or attempt == 1:
                break
            # line search failed along the CG direction: steepest descent
            logger.warning("line search failed; falling back to steepest descent")
            d, dg = -g, -gnorm2
            since_restart = 0
            step = 1.0 / np.sqrt(gnorm2)
        if not accepted:
            break
        alpha = trial
        fn2, gn = fun(xn, True)
        y = gn - g
        beta = max(0.0, float(gn @ y) / gnorm2)
        since_restart += 1
        if since_restart >= n:
            beta = 0.0
            since_restart = 0
        d = -gn + beta * d
        decrease = f - fn
        x, f, g = xn, fn, gn
        if decrease <= 1e-14 * max(1.0, abs(f)):
            break
    return x, f


def _flatten(arrays):
    return np.concatenate([a.ravel() for a in arrays])


def _unflatten(x, shapes):
    out, pos = [], 0
    for s in shapes:
        size = int(np.prod(s))
        out.append(x[pos : pos + size].reshape(s))
        pos += size
    return out


# -- block objectives ----------------------------------------------------------
# The C and v blocks decompose over parts, so each part is minimized on its
# own: a part whose residual has already collapsed to the l21 smoothing
# scale would otherwise wreck the conditioning for the others.


def _coeff(basis, membership_eta, D):
    return basis.phi.T @ ((basis.a * membership_eta)[:, None] * D)


def _c_part_fun(problem, state, weights, i):
    part = problem.parts[i]
    A = _coeff(problem.model_basis, eta(state.u[i + 1]), problem.F)
    B = _coeff(part.basis, eta(state.v[i]), part.G)
    shape = state.C[i].shape

    def fun(x, want_grad):
        C = x.reshape(shape)
        value, dC, _, _ = data_term(C, A, B)
        if weights.lambda_corr != 0:
            vc, gc = corr_regularizer(
                C, part.funnel, part.rank, weights.lambda1, weights.lambda2
            )
            value += weights.lambda_corr * vc
            if want_grad:
                dC = dC + weights.lambda_corr * gc
        return value, (dC.ravel() if want_grad else None)

    return fun, state.C[i].ravel()


def _v_part_fun(problem, state, weights, i):
    part = problem.parts[i]
    A = _coeff(problem.model_basis, eta(state.u[i + 1]), problem.F)
    CA = state.C[i] @ A
    area_u = float(problem.model_basis.a @ eta(state.u[i + 1]))
    a_n = part.basis.a
    part_total = float(a_n.sum())

    def fun(x, want_grad):
        ev = eta(x)
        B = _coeff(part.basis, ev, part.G)
        R = CA - B
        col = np.sqrt((R * R).sum(axis=0) + EPS_L21 * EPS_L21)
        value = float((col - EPS_L21).sum())
        gv = None
        if want_grad:
            dB = -(R / col)
            gv = a_n * eta_prime(x) * ((part.basis.phi @ dB) * part.G).sum(axis=1)
        if weights.lambda_n != 0:
            vr, gr = part_regularizer(part.mesh, a_n, x)
            value += weights.lambda_n * vr
            if want_grad:
                gv = gv + weights.lambda_n * gr
        av = float(a_n @ ev)
        diff = area_u - av
        value += weights.mu_area * diff * diff
        shortfall = weights.alpha * part_total - av
        if shortfall > 0:
            value += weights.mu_area * shortfall * shortfall
        if want_grad:
            gv = gv + weights.mu_area * (-2.0 * diff) * a_n * eta_prime(x)
            if shortfall > 0:
                gv = gv + weights.mu_area * (-2.0 * shortfall) * a_n * eta_prime(x)
        return value, gv

    return fun, state.v[i].copy()


def _u_block_fun(problem, state, weights):
    Bs, area_v, const = [], [], 0.0
    for i, part in enumerate(problem.parts):
        B = _coeff(part.basis, eta(state.v[i]), part.G)
        Bs.append(B)
        area_v.append(float(part.basis.a @ eta(state.v[i])))
        if weights.lambda_corr != 0:
            const += (
                weights.lambda_corr
                * corr_regularizer(
                    state.C[i], part.funnel, part.rank, weights.lambda1, weights.lambda2
                )[0]
            )
        if weights.lambda_n != 0:
            const += weights.lambda_n * part_regularizer(
                part.mesh, part.basis.a, state.v[i]
            )[0]
        shortfall = weights.alpha * float(part.basis.a.sum()) - area_v[i]
        if shortfall > 0:
            const += weights.mu_area * shortfall * shortfall
    a_m = problem.model_basis.a
    phi = problem.model_basis.phi
    F = problem.F
    shapes = [u.shape for u in state.u]

    def fun(x, want_grad):
        us = _unflatten(x, shapes)
        value = const
        grads = [np.zeros_like(u) for u in us] if want_grad else None
        eus = [eta(u) for u in us]
        epus = [eta_prime(u) for u in us] if want_grad else None
        for i, part in enumerate(problem.parts):
            A = phi.T @ ((a_m * eus[i + 1])[:, None] * F)
            val, _, dA, _ = data_term(state.C[i], A, Bs[i])
            value += val
            if want_grad:
                grads[i + 1] += a_m * epus[i + 1] * ((phi @ dA) * F).sum(axis=1)
            au = float(a_m @ eus[i + 1])
            diff = au - area_v[i]
            value += weights.mu_area * diff * diff
            if want_grad:
                grads[i + 1] += weights.mu_area * 2.0 * diff * a_m * epus[i + 1]
        if weights.lambda_m != 0:
            for i, u in enumerate(us):
                vr, gr = part_regularizer(problem.model_mesh, a_m, u)
                value += weights.lambda_m * vr
                if want_grad:
                    grads[i] += weights.lambda_m * gr
        cover = sum(eus) - 1.0
        value += weights.mu_cover * float(a_m @ (cover * cover))
        if want_grad:
            for i in range(len(us)):
                grads[i] += weights.mu_cover * 2.0 * a_m * cover * epus[i]
        return value, (_flatten(grads) if want_grad else None)

    return fun, _flatten(state.u), shapes


def minimize_C_block(state, problem, weights, cg_iters):
    fun, x0, shapes = _c_block_fun(problem, state, weights)
    x, f = ncg_minimize(fun, x0, cg_iters)
    return _unflatten(x, shapes), f


def minimize_v_block(state, problem, weights, cg_iters):
    fun, x0, shapes = _v_block_fun(problem, state, weights)
    x, f = ncg_minimize(fun, x0, cg_iters)
    return _unflatten(x, shapes), f


def minimize_u_block(state, problem, weights, cg_iters):
    fun, x0, shapes = _u_block_fun(problem, state, weights)
    x, f = ncg_minimize(fun, x0, cg_iters)
    return _unflatten(x, shapes), f


# -- spectral ICP ----------------------------------------------------------------


def spectral_icp(C, phi, psi, u, v, r, iters):
    """Refine a map by alternating nearest neighbors and rank projection.

    Matches active part vertices (eta(v) > 1/2) to active model vertices
    (eta(u) > 1/2) in spectral embedding coordinates, re-estimates C by
    least squares on the matches, and projects its singular values to r
    ones. Returns the iterate with the lowest matching RMS.
    """
    active_m = np.flatnonzero(eta(u) > 0.5)
    active_n = np.flatnonzero(eta(v) > 0.5)
    if len(active_m) == 0 or len(active_n) == 0:
        logger.warning("spectral_icp: no active vertices, returning C unchanged")
        return C
    phi_act = phi[active_m]
    psi_act = psi[active_n]

    def match(Cc):
        idx, dist = nearest_rows(psi_act, phi_act @ Cc.T)
        return idx, float(np.sqrt((dist * dist).mean()))

    best_C, best_rms = C, np.inf
    current = C
    for _ in range(int(iters)):
        idx, rms = match(current)
        if rms < best_rms:
            best_C, best_rms = current, rms
        Ct, *_ = np.linalg.lstsq(phi_act[idx], psi_act, rcond=None)
        U, _s, Vt = np.linalg.svd(Ct.T, full_matrices=False)
        d = np.zeros(len(_s))
        d[:r] = 1.0
        current = (U * d) @ Vt
    _, rms = match(current)
    if rms < best_rms:
        best_C = current
    return best_C


# -- outer loop -------------------------------------------------------------------


def _residuals(problem, state):
    eu = [eta(u) for u in state.u]
    cover = np.abs(sum(eu) - 1.0)
    area_res = 0.0
    for i, part in enumerate(problem.parts):
        au = float(problem.model_basis.a @ eu[i + 1])
        av = float(part.basis.a @ eta(state.v[i]))
        area_res = max(area_res, abs(au - av) / max(float(part.basis.a.sum()), 1e-30))
    return float(cover.max()), area_res


def _record(trace, problem, state, weights, outer, block):
    energy, _ = total_energy(problem, state, weights, want_grads=False)
    if not np.isfinite(energy):
        raise NonFiniteEnergy(f"energy not finite after {block} block", state=state)
    cov, area = _residuals(problem, state)
    trace.append(TraceRow(outer, block, float(energy), cov, area))
    return float(energy)


def hard_labels(state):
    """Argmax membership per model vertex; 0 is the missing part.

    Ties resolve to the smaller index (argmax over the stacked etas).
    """
    stacked = np.vstack([eta(u) for u in state.u])
    return np.argmax(stacked, axis=0)


def solve(problem, config=None):
    """Run the full alternating minimization on a puzzle problem.

    Initializes maps from the funnel masks and memberships at one, then
    cycles the C / v / u block solves (with an ICP refinement of the maps
    after each C step) until the relative energy decrease over a full
    cycle drops below ``rel_tol``. Raises NonFiniteEnergy with the
    diagnostic state if the energy degenerates.
    """
    config = config or SolveConfig()
    state = initial_state(problem)
    data0, _ = total_energy(
        problem,
        state,
        problem.weights.replace(
            lambda_m=0, lambda_n=0, lambda_corr=0, mu_cover=0, mu_area=0
        ),
        want_grads=False,
    )
    area_m = float(problem.model_basis.a.sum())
    mu0 = config.penalty_scale * (data0 / area_m) if data0 > 0 else config.penalty_scale
    weights = problem.weights.replace(mu_cover=mu0, mu_area=mu0)
    trace = []
    energy, _ = total_energy(problem, state, weights, want_grads=False)
    if not np.isfinite(energy):
        raise NonFiniteEnergy("energy not finite at initialization", state=state)
    converged = False
    for outer in range(1, config.max_outer + 1):
        cycle_start = energy
        state.C, _ = minimize_C_block(state, problem, weights, config.cg_iters_per_block)
        energy = _record(trace, problem, state, weights, outer, "C")
        if config.icp_enabled:
            candidate = [
                spectral_icp(
                    state.C[i],
                    problem.model_basis.phi,
                    part.basis.phi,
                    state.u[i + 1],
                    state.v[i],
                    part.rank,
                    config.icp_iters,
                )
                for i, part in enumerate(problem.parts)
            ]
            saved = state.C
            state.C = candidate
            icp_energy, _ = total_energy(problem, state, weights, want_grads=False)
            if icp_energy > energy * 1.01 + 1e-12:
                state.C = saved  # reject: would break the monotone trace
            energy = _record(trace, problem, state, weights, outer, "icp")
        state.v, _ = minimize_v_block(state, problem, weights, config.cg_iters_per_block)
        energy = _record(trace, problem, state, weights, outer, "v")
        state.u, _ = minimize_u_block(state, problem, weights, config.cg_iters_per_block)
        energy = _record(trace, problem, state, weights, outer, "u")
        cov_res, area_res = _residuals(problem, state)
        if max(cov_res, area_res) > config.violation_tol:
            weights = weights.replace(
                mu_cover=2.0 * weights.mu_cover, mu_area=2.0 * weights.mu_area
            )
            energy, _ = total_energy(problem, state, weights, want_grads=False)
        rel_drop = (cycle_start - energy) / max(abs(cycle_start), 1e-30)
        if 0 <= rel_drop < config.rel_tol:
            converged = True
            break
    labels = hard_labels(state)
    point_maps = [
        recover_p2p(
            state.C[i],
            problem.model_basis,
            part.basis,
            state.u[i + 1],
            state.v[i],
        )
        for i, part in enumerate(problem.parts)
    ]
    return Solution(
        state=state,
        trace=trace,
        labels=labels,
        point_maps=point_maps,
        weights=weights,
        converged=converged,
    )
