import numpy as np
import pytest
from scipy import sparse

from saelab.geodata import AdjacencyGraph, build_county_grid, county_adjacency
from saelab.gmrf import (
    FactorizationError,
    SparseFactor,
    SparsePrecision,
    SpdeOperator,
    build_regular_mesh,
    icar_scaled,
    matern_params,
    sample_gmrf,
    spde_precision,
)


def path_graph(m):
    return AdjacencyGraph(m, tuple((i, i + 1) for i in range(m - 1)), True)


class TestIcarScaled:
    def test_two_county_structure(self):
        icar = icar_scaled(path_graph(2))
        assert np.array_equal(icar.structure.toarray(), [[1.0, -1.0], [-1.0, 1.0]])

    def test_geometric_mean_marginal_variance_is_one(self):
        for graph in [path_graph(5), county_adjacency(build_county_grid(3, 3, 9, 9, 1.0))]:
            icar = icar_scaled(graph)
            pinv = np.linalg.pinv(icar.scaled_structure().toarray(), hermitian=True)
            gm = np.exp(np.mean(np.log(np.diag(pinv))))
            assert gm == pytest.approx(1.0, abs=1e-6)

    def test_scale_matches_dense_pseudoinverse_oracle(self):
        graph = path_graph(5)
        icar = icar_scaled(graph)
        # oracle: dense eigendecomposition of the raw structure matrix
        r = icar.structure.toarray()
        w, v = np.linalg.eigh(r)
        nonzero = w > 1e-10
        pinv = (v[:, nonzero] / w[nonzero]) @ v[:, nonzero].T
        expected_scale = np.exp(np.mean(np.log(np.diag(pinv))))
        assert icar.scale == pytest.approx(expected_scale, rel=1e-12)
        got = np.sort(icar.gamma)
        expect = np.sort(np.concatenate([[0.0], 1.0 / w[nonzero]]) / expected_scale)
        assert np.allclose(got, expect, atol=1e-9)

    def test_relabeling_invariance_up_to_permutation(self):
        graph = county_adjacency(build_county_grid(2, 3, 4, 6, 1.0))
        icar = icar_scaled(graph)
        perm = np.array([3, 1, 4, 0, 5, 2])
        edges = tuple(sorted(tuple(sorted((perm[i], perm[j]))) for i, j in graph.edges))
        icar_p = icar_scaled(AdjacencyGraph(graph.m, edges, True))
        assert icar_p.scale == pytest.approx(icar.scale, rel=1e-12)
        assert np.allclose(np.sort(icar_p.gamma), np.sort(icar.gamma), atol=1e-10)

    def test_disconnected_rejected(self):
        graph = AdjacencyGraph(3, ((0, 1),), False)
        with pytest.raises(ValueError):
            icar_scaled(graph)


class TestMaternParams:
    def test_unit_kappa(self):
        kappa, _ = matern_params(np.sqrt(8.0), 1.0)
        assert kappa == pytest.approx(1.0)

    def test_paper_values(self):
        kappa, tau = matern_params(150.0, 0.15)
        assert kappa == pytest.approx(0.0188562, rel=1e-5)
        assert tau == pytest.approx(9947.2, rel=1e-4)

    def test_scaling_law(self):
        k1, t1 = matern_params(75.0, 0.2)
        k2, t2 = matern_params(150.0, 0.2)
        assert k2 == pytest.approx(k1 / 2)
        assert t2 == pytest.approx(4 * t1)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            matern_params(-1.0, 0.1)
        with pytest.raises(ValueError):
            matern_params(1.0, 0.0)


def single_node_operator(c=2.0):
    return SpdeOperator(np.zeros((1, 2)), np.zeros((0, 3), dtype=int),
                        np.array([c]), sparse.csc_matrix((1, 1)),
                        np.array([True]), None)


class TestSpdePrecision:
    def test_zero_stiffness_reduces_to_mass(self):
        op = single_node_operator(c=2.0)
        q = spde_precision(op, kappa=1.5, tau=3.0)
        assert q.matrix.toarray()[0, 0] == pytest.approx(3.0 * 1.5**4 * 2.0, rel=1e-14)

    def test_exact_symmetry(self):
        op = build_regular_mesh((0.0, 4.0, 0.0, 3.0), spacing=0.5, buffer=1.0)
        q = spde_precision(op, kappa=2.0, tau=5.0)
        assert abs(q.matrix - q.matrix.T).max() == 0.0

    def test_tau_homogeneity_exact(self):
        op = build_regular_mesh((0.0, 2.0, 0.0, 2.0), spacing=0.5)
        q1 = spde_precision(op, kappa=1.0, tau=1.0)
        q2 = spde_precision(op, kappa=1.0, tau=2.0)
        assert abs(q2.matrix - q1.matrix * 2.0).max() == 0.0

    def test_sqrt_consistency(self):
        op = build_regular_mesh((0.0, 2.0, 0.0, 2.0), spacing=1.0)
        q = spde_precision(op, kappa=1.3, tau=2.7)
        rebuilt = (q.sqrt @ q.sqrt.T).toarray()
        assert np.allclose(rebuilt, q.matrix.toarray(), rtol=1e-12, atol=1e-12)

    def test_projector_rows(self):
        op = build_regular_mesh((0.0, 2.0, 0.0, 2.0), spacing=1.0)
        # at a mesh node the projector row is a unit basis vector
        a = op.projector(np.array([1.0]), np.array([1.0]))
        row = a.toarray()[0]
        assert row.sum() == pytest.approx(1.0)
        assert np.count_nonzero(row) == 1
        # generic points: at most 3 nonzeros summing to 1
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 2, size=(50, 2))
        a = op.projector(pts[:, 0], pts[:, 1])
        assert np.allclose(np.asarray(a.sum(axis=1)).ravel(), 1.0)
        assert max(np.diff(a.indptr)) <= 3

    def test_projector_outside_hull(self):
        op = build_regular_mesh((0.0, 2.0, 0.0, 2.0), spacing=1.0)
        with pytest.raises(ValueError, match="outside"):
            op.projector(np.array([50.0]), np.array([0.5]))


class TestSparseFactor:
    def test_solve_identity_columns(self):
        op = build_regular_mesh((0.0, 3.0, 0.0, 3.0), spacing=0.5)
        q = spde_precision(op, kappa=1.0, tau=1.0)
        factor = SparseFactor(q.matrix)
        n = q.n
        eye = np.eye(n)
        sol = factor.solve(eye)
        recon = q.matrix @ sol
        assert np.max(np.abs(recon - eye)) < 1e-8

    def test_logabsdet_matches_dense(self):
        op = build_regular_mesh((0.0, 2.0, 0.0, 2.0), spacing=0.5)
        q = spde_precision(op, kappa=1.0, tau=2.0)
        factor = SparseFactor(q.matrix)
        dense = np.linalg.slogdet(q.matrix.toarray())[1]
        assert factor.logabsdet() == pytest.approx(dense, rel=1e-10)

    def test_singular_matrix_raises(self):
        singular = sparse.csc_matrix(np.zeros((3, 3)))
        with pytest.raises(FactorizationError):
            SparseFactor(singular).logabsdet()


class TestSampleGmrf:
    def test_mean_zero(self):
        op = build_regular_mesh((0.0, 2.0, 0.0, 2.0), spacing=1.0)
        q = spde_precision(op, kappa=1.0, tau=1.0)
        draws = sample_gmrf(q, 10_000, seed=5)
        cov = np.linalg.inv(q.matrix.toarray())
        se = np.sqrt(np.diag(cov) / draws.shape[0])
        assert np.all(np.abs(draws.mean(axis=0)) < 4 * se)

    def test_covariance_matches_dense_inverse(self):
        # 10-node mesh oracle
        op = build_regular_mesh((0.0, 4.0, 0.0, 1.0), spacing=1.0)
        assert op.n_nodes == 10
        q = spde_precision(op, kappa=1.2, tau=0.8)
        n_draws = 40_000
        draws = sample_gmrf(q, n_draws, seed=11)
        emp = np.cov(draws.T)
        cov = np.linalg.inv(q.matrix.toarray())
        scale = np.sqrt(np.outer(np.diag(cov), np.diag(cov)))
        # correlation-scale error shrinks like 1/sqrt(n)
        assert np.max(np.abs(emp - cov) / scale) < 6.0 / np.sqrt(n_draws)

    def test_sum_to_zero_constraint(self):
        icar = icar_scaled(path_graph(6))
        draws = sample_gmrf(icar.sparse_precision(), 500, seed=2)
        assert np.max(np.abs(draws.sum(axis=1))) < 1e-10

    def test_constrained_covariance_oracle(self):
        icar = icar_scaled(path_graph(5))
        prec = icar.sparse_precision()
        draws = sample_gmrf(prec, 60_000, seed=9)
        emp = np.cov(draws.T)
        expected = np.linalg.pinv(prec.matrix.toarray(), hermitian=True)
        assert np.max(np.abs(emp - expected)) < 6.0 / np.sqrt(60_000) * expected.max() * 5

    def test_deterministic_replay(self):
        op = build_regular_mesh((0.0, 2.0, 0.0, 2.0), spacing=1.0)
        q = spde_precision(op, kappa=1.0, tau=1.0)
        a = sample_gmrf(q, 50, seed=7)
        b = sample_gmrf(q, 50, seed=7)
        assert np.array_equal(a, b)

    def test_dense_sqrt_fallback(self):
        mat = sparse.csc_matrix(np.array([[2.0, 0.5], [0.5, 1.0]]))
        prec = SparsePrecision(mat)
        draws = sample_gmrf(prec, 50_000, seed=3)
        emp = np.cov(draws.T)
        expected = np.linalg.inv(mat.toarray())
        assert np.allclose(emp, expected, atol=0.05)


@pytest.mark.slow
class TestSpdeFieldStatistics:
    def test_range_and_sd_recovery(self):
        # unit-domain analog of (rho, sigma) = (150 km, 0.15)
        rho, sigma = 2.0, 0.15
        kappa, tau = matern_params(rho, sigma)
        op = build_regular_mesh((0.0, 10.0, 0.0, 10.0), spacing=rho / 5.0, buffer=1.5 * rho)
        q = spde_precision(op, kappa, tau)
        draws = sample_gmrf(q, 2500, seed=21)

        interior = np.flatnonzero(op.interior)
        sd = draws[:, interior].std()
        assert abs(sd - sigma) / sigma < 0.15

        # empirical correlation at lag rho, over node pairs at that distance
        nodes = op.nodes[interior]
        rng = np.random.default_rng(0)
        sub = rng.choice(interior.size, size=400, replace=False)
        pick = interior[sub]
        d = np.hypot(nodes[sub, 0][:, None] - nodes[sub, 0][None, :],
                     nodes[sub, 1][:, None] - nodes[sub, 1][None, :])
        ii, jj = np.nonzero(np.abs(d - rho) < rho / 10)
        vals_i = draws[:, pick[ii]]
        vals_j = draws[:, pick[jj]]
        corr = np.mean(vals_i * vals_j) / (draws[:, pick].std() ** 2)
        assert 0.05 <= corr <= 0.15
