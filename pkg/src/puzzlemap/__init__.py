"""Non-rigid puzzle solving: joint mesh segmentation and partial
functional correspondence between a model shape and deformed part shapes."""

from .mesh import (
    TriMesh,
    boundary_vertices,
    face_gradient,
    geodesic_distances,
    load_mesh,
    save_off,
    save_ply,
    vertex_areas,
)
from .spectral import (
    SpectralBasis,
    basis_for_mesh,
    cotan_laplacian,
    eigenbasis,
    slant_ratio,
    weyl_slope,
)
from .descriptors import DescriptorField, landmark_gaussians, project_descriptors, shot
from .pfm import (
    EnergyWeights,
    FunnelWeights,
    PuzzlePart,
    PuzzleProblem,
    PuzzleState,
    build_problem,
    corr_regularizer,
    data_term,
    estimate_rank,
    eta,
    funnel_weights,
    init_C,
    part_regularizer,
    total_energy,
    xi,
)

__version__ = "0.1.0"
