import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from sourcerec.accuracy import (
    ErrorCurve,
    convergence_sweep,
    fit_loglog_slope,
    interior_weights,
    l2_error_approx,
    l2_error_empirical,
    local_convergence_slope,
    sample_locations,
)
from sourcerec.cases import CS1, cs1_sweep_case
from sourcerec.errors import ShapeMismatch
from sourcerec.fem import PdeCoefficients, assemble
from sourcerec.forward import steady_solution_prior
from sourcerec.gmrf import MaternHyper, matern_precision
from sourcerec.mesh import build_interval_mesh, build_rect_mesh
from sourcerec.sparse import cholesky


class TestInteriorWeights:
    def test_hand_fractions_1d(self):
        # nodes at -5, -3, ..., 15 with region [0, 10]: boundary cuts cells in half
        w = interior_weights(build_interval_mesh(0, 10, 11, 5))
        x = np.arange(-5, 16, 2.0)
        expect = np.where((x > 0) & (x < 10), 1.0, 0.0)
        expect[x == -1] = expect[x == 11] = 1 / 8
        expect[x == 1] = expect[x == 9] = 7 / 8
        np.testing.assert_allclose(w.fractions, expect, atol=1e-14)
        assert w.volume == 10.0

    def test_mass_integrates_linear_fields_1d(self):
        m = build_interval_mesh(0, 10, 11, 5)
        w = interior_weights(m)
        one = np.ones(m.n_nodes)
        assert abs(one @ w.mass @ one - 10) < 1e-12
        assert abs(m.x @ w.mass @ m.x - 1000 / 3) < 1e-10

    def test_clipped_2d(self):
        m = build_rect_mesh((0, 2), (0, 1), 5, 4, 0.3)
        w = interior_weights(m)
        one = np.ones(m.n_nodes)
        x, y = m.coords[:, 0], m.coords[:, 1]
        assert abs(one @ w.mass @ one - 2.0) < 1e-12
        assert abs(x @ w.mass @ one - 2.0) < 1e-12            # int x over [0,2]x[0,1]
        assert abs(x @ w.mass @ y - 1.0) < 1e-12              # int x y
        # fractions weight each hat's total integral to give the region measure
        lumped = assemble(m, PdeCoefficients(D=1.0)).lumped
        assert abs(w.fractions @ lumped - 2.0) < 1e-12
        assert np.all((w.fractions >= 0) & (w.fractions <= 1))

    def test_no_buffer_all_ones(self):
        w = interior_weights(build_interval_mesh(0, 3, 7))
        np.testing.assert_array_equal(w.fractions, 1.0)
        assert w.M == 7


class TestEmpiricalError:
    def setup_method(self):
        self.mesh = build_interval_mesh(0, 4, 21, 1)
        self.w = interior_weights(self.mesh)

    def test_zero_when_exact(self):
        t = np.sin(self.mesh.x)
        assert l2_error_empirical(t, t.copy(), self.w) == 0.0

    def test_constant_offset(self):
        t = np.cos(self.mesh.x)
        assert abs(l2_error_empirical(t, t + 0.3, self.w) - 0.3 * 2.0) < 1e-12

    def test_fine_grid_quadrature(self):
        e = np.sin(3 * self.mesh.x) + 0.2 * self.mesh.x
        s = np.linspace(0, 4, 200_001)
        mid = 0.5 * (s[1:] + s[:-1])
        ref = math.sqrt(np.sum(np.interp(mid, self.mesh.x, e) ** 2) * (s[1] - s[0]))
        assert abs(l2_error_empirical(e, np.zeros_like(e), self.w) / ref - 1) < 0.01

    def test_shape_checked(self):
        with pytest.raises(ShapeMismatch):
            l2_error_empirical(np.zeros(3), np.zeros(3), self.w)


class TestApproxError:
    def test_identity_covariance(self):
        m = build_interval_mesh(0, 5, 11)
        w = interior_weights(m)
        F = cholesky(sp.identity(11, format="csc"))
        assert abs(l2_error_approx(F, w) - math.sqrt(5.0)) < 1e-12

    def test_diagonal_covariance_with_buffer(self):
        m = build_interval_mesh(0, 10, 11, 5)
        w = interior_weights(m)
        d = np.linspace(0.5, 2.0, 11)
        F = cholesky(sp.diags(1 / d, format="csc"))
        expect = math.sqrt(w.volume / w.M * np.sum(w.fractions**2 * d))
        assert abs(l2_error_approx(F, w) - expect) < 1e-12 * expect

    def test_pushforward_view(self):
        m = build_interval_mesh(0, 5, 11)
        w = interior_weights(m)
        F = cholesky(sp.identity(11, format="csc"))
        B = sp.diags(np.full(11, 2.0), format="csr")
        assert abs(l2_error_approx(F, w, B) - 2 * math.sqrt(5.0)) < 1e-12


def matern_setup(n=41, buffer=0.0):
    s = assemble(build_interval_mesh(0, 10, n, buffer), PdeCoefficients(0.5, 0.2, 0.4))
    prior = steady_solution_prior(s, matern_precision(s, MaternHyper(2.0, 1.0)))
    return s, prior


def approx_at(Q, AtA, w, zeta, m, sigma2):
    c = math.exp(zeta) / (m * sigma2)
    return l2_error_approx(cholesky((Q + c * AtA).tocsc()), w)


class TestLocalSlope:
    def test_asymptote_square_invertible(self):
        # steady-stream parameters, no buffer, every node observed once
        s = assemble(build_interval_mesh(0, 50, 101), PdeCoefficients(CS1.D, CS1.r, 1.0))
        prior = steady_solution_prior(s, matern_precision(s, MaternHyper(CS1.rho, CS1.sigma2_f)))
        w = interior_weights(s.mesh)
        n = s.n
        I = sp.identity(n, format="csc")
        for c in (1e4, 1e6):
            slope = local_convergence_slope(prior.Q, I, w, math.log(c * n), n, 1.0)
            assert abs(slope + 0.5) < 0.02

    def test_asymptote_relative_to_prior_scale(self):
        # the limit is reached once the data precision dominates the largest prior eigenvalue
        s, prior = matern_setup()
        w = interior_weights(s.mesh)
        n = s.n
        lam = np.linalg.eigvalsh(prior.Q.toarray()).max()
        slope = local_convergence_slope(prior.Q, sp.identity(n, format="csc"), w, math.log(1e4 * lam * n), n, 1.0)
        assert abs(slope + 0.5) < 0.02

    @pytest.mark.parametrize("zeta", [-2.0, 0.0, 2.0, 4.0])
    def test_finite_difference(self, zeta):
        s, prior = matern_setup(buffer=2.0)
        w = interior_weights(s.mesh)
        rng = np.random.default_rng(1)
        A = sp.csr_matrix(rng.uniform(size=(10, s.n)) * (rng.uniform(size=(10, s.n)) < 0.2))
        AtA = (A.T @ A).tocsc()
        h = 1e-4
        fd = (math.log(approx_at(prior.Q, AtA, w, zeta + h, 10, 0.5))
              - math.log(approx_at(prior.Q, AtA, w, zeta - h, 10, 0.5))) / (2 * h)
        assert abs(local_convergence_slope(prior.Q, AtA, w, zeta, 10, 0.5) - fd) < 1e-4

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-10, 15), st.floats(0.1, 10))
    def test_bounded(self, zeta, sigma2):
        s, prior = matern_setup(21, 1.0)
        w = interior_weights(s.mesh)
        slope = local_convergence_slope(prior.Q, sp.identity(s.n, format="csc"), w, zeta, s.n, sigma2)
        assert -0.5 - 1e-12 <= slope <= 0.0

    def test_no_data_limit(self):
        s, prior = matern_setup(21)
        slope = local_convergence_slope(prior.Q, sp.identity(s.n, format="csc"), interior_weights(s.mesh), -50, s.n, 1.0)
        assert abs(slope) < 1e-15

    def test_noise_free_identity_observations(self):
        # with every node observed and vanishing noise the posterior error vanishes
        s, prior = matern_setup(21)
        w = interior_weights(s.mesh)
        I = sp.identity(s.n, format="csc")
        errs = [approx_at(prior.Q, I, w, 0.0, 1, s2) for s2 in (1e-2, 1e-4, 1e-6)]
        assert errs[0] > errs[1] > errs[2]
        assert errs[2] < 1e-2 * math.sqrt(w.volume)


class TestSweep:
    def test_fit_power_law(self):
        N = np.logspace(1, 5, 17)
        assert abs(fit_loglog_slope(N, 3 * N**-0.4) + 0.4) < 1e-12
        with pytest.raises(ValueError):
            fit_loglog_slope([1, 2], [1, 1])

    def test_sample_locations_are_midpoints(self):
        np.testing.assert_allclose(sample_locations((0, 10), 4), [1.25, 3.75, 6.25, 8.75])

    def test_small_sweep(self, tmp_path):
        case = cs1_sweep_case(h=0.5)
        sizes = [10, 40, 160]
        curve = convergence_sweep(case, sizes, replicates=6, seed=2)
        assert np.all(np.diff(curve.approx_u) < 0) and np.all(np.diff(curve.approx_f) < 0)
        assert np.all(np.diff(curve.empirical_u) < 0)
        assert np.all((curve.slope_u < 0) & (curve.slope_u >= -0.5))
        again = convergence_sweep(case, sizes, replicates=6, seed=2)
        np.testing.assert_array_equal(curve.empirical_u, again.empirical_u)
        curve.to_csv(tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0].startswith("N,empirical_u") and len(lines) == 4

    def test_bad_sizes(self):
        case = cs1_sweep_case(h=1.0)
        with pytest.raises(ValueError):
            convergence_sweep(case, [10, 5])

    def test_curve_shapes(self):
        with pytest.raises(ShapeMismatch):
            ErrorCurve(np.arange(3), *([np.zeros(3)] * 5), np.zeros(2))
