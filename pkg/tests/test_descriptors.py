import numpy as np
import pytest

from puzzlemap.descriptors import landmark_gaussians, project_descriptors, shot
from puzzlemap.errors import DimensionMismatch, IndexOutOfRange
from puzzlemap.mesh import TriMesh, geodesic_distances, vertex_areas
from puzzlemap.primitives import blob
from puzzlemap.spectral import basis_for_mesh


def random_rigid_motion(rng):
    q = rng.normal(size=(3, 3))
    Q, _ = np.linalg.qr(q)
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    t = rng.normal(size=3) * 2.0
    return Q, t


class TestShot:
    def test_dimension(self, sphere3):
        field = shot(sphere3, radius_frac=0.1)
        assert field.D.shape == (sphere3.n_vertices, 352)
        assert field.params["n_empty"] == 0
        assert field.params["n_degenerate"] == 0

    def test_empty_neighborhood_zero(self):
        m = TriMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        field = shot(m, radius_frac=0.01)
        np.testing.assert_array_equal(field.D, 0)
        assert field.params["n_empty"] == 3

    def test_norms_zero_or_one(self, bumpy_blob):
        field = shot(bumpy_blob, radius_frac=0.08)
        norms = np.linalg.norm(field.D, axis=1)
        ok = (norms == 0) | (np.abs(norms - 1) < 1e-6)
        assert ok.all()

    def test_rotation_invariance(self, bumpy_blob, rng):
        # jitter the vertices so local covariance eigenvalues are distinct;
        # on perfectly regular meshes the frame's tangent axes are ambiguous
        verts = bumpy_blob.vertices + rng.normal(
            scale=0.01, size=bumpy_blob.vertices.shape
        )
        irregular = TriMesh(verts, bumpy_blob.triangles)
        Q, t = random_rigid_motion(rng)
        moved = TriMesh(irregular.vertices @ Q.T + t, irregular.triangles)
        d0 = shot(irregular, radius_frac=0.08).D
        d1 = shot(moved, radius_frac=0.08).D
        err = np.linalg.norm(d0 - d1, axis=1)
        assert err.max() < 1e-3

    def test_locality(self, bumpy_blob):
        radius_frac = 0.1
        base = shot(bumpy_blob, radius_frac=radius_frac)
        radius = base.params["radius"]
        centroid = bumpy_blob.vertices.mean(axis=0)
        edit = int(np.argmin(np.linalg.norm(bumpy_blob.vertices - centroid, axis=1)))
        v2 = bumpy_blob.vertices.copy()
        v2[edit] += 0.01 * bumpy_blob.diameter * np.array([0.0, 0.0, 1.0])
        edited = TriMesh(v2, bumpy_blob.triangles)
        assert abs(edited.diameter - bumpy_blob.diameter) < 1e-12
        after = shot(edited, radius_frac=radius_frac)
        far = (
            np.linalg.norm(bumpy_blob.vertices - bumpy_blob.vertices[edit], axis=1)
            > 2 * radius
        )
        diff = np.linalg.norm(base.D[far] - after.D[far], axis=1)
        assert diff.max() < 1e-9


class TestLandmarkGaussians:
    def test_peak_at_landmark(self, sphere3):
        field = landmark_gaussians(sphere3, [5], sigma_frac=0.1)
        assert field.D[5, 0] == pytest.approx(1.0)

    def test_value_at_one_sigma(self):
        # straight strip: geodesic distance along the strip is Euclidean
        n = 41
        verts = []
        for i in range(n):
            verts += [[i * 0.1, 0, 0], [i * 0.1, 0.1, 0]]
        tris = []
        for i in range(n - 1):
            a, b, c, d = 2 * i, 2 * i + 1, 2 * i + 2, 2 * i + 3
            tris += [[a, b, c], [b, d, c]]
        strip = TriMesh(verts, tris)
        sigma_frac = 0.25
        field = landmark_gaussians(strip, [0], sigma_frac=sigma_frac)
        sigma = field.params["sigma"]
        d = geodesic_distances(strip, [0])
        target = int(np.argmin(np.abs(d - sigma)))
        np.testing.assert_allclose(
            field.D[target, 0], np.exp(-d[target] ** 2 / (2 * sigma**2)), rtol=1e-12
        )
        assert abs(field.D[target, 0] - np.exp(-0.5)) < 0.05

    def test_columns_match_geodesic_fields(self, sphere3):
        lms = [3, 100, 400]
        field = landmark_gaussians(sphere3, lms, sigma_frac=0.2)
        assert field.q == 3
        sigma = field.params["sigma"]
        for j, lm in enumerate(lms):
            d = geodesic_distances(sphere3, [lm])
            np.testing.assert_allclose(
                field.D[:, j], np.exp(-(d**2) / (2 * sigma**2)), rtol=1e-12
            )

    def test_index_out_of_range(self, sphere3):
        with pytest.raises(IndexOutOfRange):
            landmark_gaussians(sphere3, [sphere3.n_vertices], sigma_frac=0.1)
        with pytest.raises(IndexOutOfRange):
            landmark_gaussians(sphere3, [], sigma_frac=0.1)


class TestProjection:
    @pytest.fixture(scope="class")
    def basis(self, sphere3):
        return basis_for_mesh(sphere3, 12)

    def test_zero_membership(self, sphere3, basis, rng):
        D = rng.normal(size=(sphere3.n_vertices, 5))
        out = project_descriptors(basis, np.zeros(sphere3.n_vertices), D)
        np.testing.assert_array_equal(out, 0)

    def test_identity_on_basis(self, sphere3, basis):
        out = project_descriptors(
            basis, np.ones(sphere3.n_vertices), basis.phi[:, :6]
        )
        np.testing.assert_allclose(out, np.eye(12, 6), atol=1e-6)

    def test_brute_force_oracle(self, sphere3, basis, rng):
        mem = rng.uniform(size=sphere3.n_vertices)
        D = rng.normal(size=(sphere3.n_vertices, 4))
        out = project_descriptors(basis, mem, D)
        expected = np.zeros((12, 4))
        for i in range(12):
            for j in range(4):
                for v in range(sphere3.n_vertices):
                    expected[i, j] += (
                        basis.phi[v, i] * basis.a[v] * mem[v] * D[v, j]
                    )
        np.testing.assert_allclose(out, expected, atol=1e-10)

    def test_bilinearity(self, sphere3, basis, rng):
        mem1 = rng.uniform(size=sphere3.n_vertices)
        mem2 = rng.uniform(size=sphere3.n_vertices)
        D = rng.normal(size=(sphere3.n_vertices, 3))
        lhs = project_descriptors(basis, 2.0 * mem1 + 0.5 * mem2, D)
        rhs = 2.0 * project_descriptors(basis, mem1, D) + 0.5 * project_descriptors(
            basis, mem2, D
        )
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-14)

    def test_dimension_mismatch(self, sphere3, basis):
        with pytest.raises(DimensionMismatch):
            project_descriptors(basis, np.ones(3), np.zeros((3, 2)))
