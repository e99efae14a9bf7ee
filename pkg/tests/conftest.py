import numpy as np
import pytest

from puzzlemap.pfm import (
    EnergyWeights,
    PuzzlePart,
    PuzzleProblem,
    PuzzleState,
    estimate_rank,
    funnel_weights,
)
from puzzlemap.primitives import blob, grid_mesh, icosphere
from puzzlemap.spectral import basis_for_mesh, slant_ratio
from puzzlemap.synth import extract_part


def small_problem(seed=0, n_grid=9, k=15, q=10):
    """Random desk-size instance on a flat grid with two overlapping parts."""
    mesh = grid_mesh(n_grid, n_grid)
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(mesh.n_vertices, q))
    basis = basis_for_mesh(mesh, k)
    xs = mesh.vertices[:, 0]
    cut = mesh.vertices[:, 0].max()
    parts = []
    for sel in (xs <= 0.62 * cut, xs >= 0.38 * cut):
        sub, _ = extract_part(mesh, sel)
        b = basis_for_mesh(sub, k)
        G = rng.normal(size=(sub.n_vertices, q))
        rho = slant_ratio(sub.area, mesh.area)
        funnel = funnel_weights(k, k, rho)
        rank = estimate_rank(b.lam, basis.lam)
        parts.append(
            PuzzlePart(mesh=sub, basis=b, descr=G, funnel=funnel, rank=rank, rho=rho)
        )
    weights = EnergyWeights(
        lambda_m=0.3,
        lambda_n=0.2,
        lambda_corr=0.7,
        lambda1=0.9,
        lambda2=1.1,
        alpha=0.4,
        mu_cover=2.0,
        mu_area=1.5,
    )
    return PuzzleProblem(
        model_mesh=mesh, model_basis=basis, model_descr=F, parts=parts, weights=weights
    )


def random_state(problem, seed=0, scale=0.3):
    rng = np.random.default_rng(seed)
    return PuzzleState(
        C=[scale * rng.normal(size=part.funnel.W.shape) for part in problem.parts],
        u=[
            rng.uniform(-0.5, 1.5, size=problem.model_mesh.n_vertices)
            for _ in range(problem.p + 1)
        ],
        v=[rng.uniform(-0.5, 1.5, size=part.mesh.n_vertices) for part in problem.parts],
    )


@pytest.fixture(scope="session")
def sphere3():
    # 642 vertices, 1280 triangles
    return icosphere(3)


@pytest.fixture(scope="session")
def sphere4():
    # 2562 vertices
    return icosphere(4)


@pytest.fixture(scope="session")
def unit_square_50():
    return grid_mesh(50, 50)


@pytest.fixture(scope="session")
def bumpy_blob():
    return blob(3, seed=7, bumpiness=0.2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
