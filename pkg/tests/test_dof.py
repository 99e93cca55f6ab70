"""Divergence formulas, SURE/TIC, and the closed-form projection families."""

import math
import warnings

import numpy as np
import pytest
from scipy.special import gammainc, gammaincc

from sparseode.dof import (
    L2Ball,
    L2Sphere,
    NonUniqueProjectionError,
    PreconditionError,
    TwoAxes,
    analytic_df,
    analytic_project,
    div_l1_constrained,
    div_unconstrained,
    sure_risk,
    tic,
)
from sparseode.models import IsochronalOdeModel, LinearModel


class TestDivUnconstrained:
    def test_linear_model_gives_p(self, rng):
        X = rng.standard_normal((9, 4))
        G = X.T @ X
        assert div_unconstrained(G, G) == pytest.approx(4.0, abs=1e-10)

    def test_zero_residual_fit(self, rng):
        model = IsochronalOdeModel(0.7, rng.standard_normal((3, 4)))
        beta = rng.standard_normal(9) * 0.4
        y = model.eval(beta)
        G = model.g_matrix(beta)
        J = model.j_matrix(beta, y)
        assert div_unconstrained(G, J) == pytest.approx(9.0, abs=1e-8)

    def test_singular_j_rejected(self):
        J = np.zeros((3, 3))
        with pytest.raises(PreconditionError):
            div_unconstrained(np.eye(3), J)


class TestDivL1Constrained:
    def test_locally_linear_gives_active_minus_one(self, rng):
        # J = G (zero second derivatives): the correction term is exactly 1
        for _ in range(10):
            X = rng.standard_normal((12, 6))
            G = X.T @ X
            beta = rng.standard_normal(6)
            beta[rng.choice(6, size=2, replace=False)] = 0.0
            active = np.flatnonzero(beta)
            gamma = np.sign(beta)
            got = div_l1_constrained(G, G, gamma, active)
            assert got == pytest.approx(active.size - 1, abs=1e-8)

    def test_single_active_coordinate_gives_zero(self, rng):
        G = np.array([[2.5]])
        J = np.array([[3.0]])
        got = div_l1_constrained(G, J, np.array([1.0]), np.array([0]))
        assert got == pytest.approx(0.0, abs=1e-14)

    def test_empty_active_set_warns_and_returns_zero(self):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            got = div_l1_constrained(np.eye(2), np.eye(2), np.ones(2), np.array([], dtype=int))
        assert got == 0.0
        assert caught

    def test_degenerate_gamma_rejected(self):
        with pytest.raises(PreconditionError):
            div_l1_constrained(np.eye(2), np.eye(2), np.zeros(2), np.array([0, 1]))

    def test_upper_bound_when_pd(self, rng):
        # correction term is nonnegative for positive definite J
        for _ in range(20):
            p = int(rng.integers(2, 6))
            Q = rng.standard_normal((p, p))
            J = Q @ Q.T + 0.5 * np.eye(p)
            Q2 = rng.standard_normal((p, p))
            G = Q2 @ Q2.T
            gamma = rng.standard_normal(p)
            active = np.arange(p)
            got = div_l1_constrained(G, J, gamma, active)
            assert got <= np.trace(np.linalg.solve(J, G)) + 1e-10

    def test_accepts_full_or_restricted_blocks(self, rng):
        p = 5
        Q = rng.standard_normal((p, p))
        J = Q @ Q.T + np.eye(p)
        G = J + 0.1 * np.eye(p)
        gamma = rng.standard_normal(p)
        active = np.array([0, 2, 4])
        full = div_l1_constrained(G, J, gamma, active)
        restricted = div_l1_constrained(
            G[np.ix_(active, active)], J[np.ix_(active, active)], gamma[active], np.arange(3)
        )
        assert full == pytest.approx(restricted, abs=1e-12)


class TestRiskEstimates:
    def test_sure_zero_case(self):
        est = sure_risk(rss=12.0, n=12, sigma2=1.0, divergence=0.0)
        assert est.risk_hat == pytest.approx(0.0)

    def test_sure_identity(self, rng):
        for _ in range(10):
            rss = float(rng.uniform(1, 50))
            n = int(rng.integers(3, 30))
            s2 = float(rng.uniform(0.1, 2))
            dv = float(rng.uniform(0, 10))
            est = sure_risk(rss, n, s2, dv)
            assert est.risk_hat == pytest.approx(rss - n * s2 + 2 * s2 * dv)

    def test_active_count_variant(self):
        est = sure_risk(10.0, 8, 0.5, 3.0, variant="active_count_minus_one")
        assert est.variant == "active_count_minus_one"

    def test_sigma2_positive(self):
        with pytest.raises(ValueError):
            sure_risk(1.0, 2, 0.0, 1.0)

    def test_tic_linear_model(self, rng):
        X = rng.standard_normal((10, 3))
        G = X.T @ X
        assert tic(5.0, 0.5, G, G) == pytest.approx(5.0 + 2 * 0.5 * 3)

    def test_tic_consistency_with_divergence(self, rng):
        Q = rng.standard_normal((4, 4))
        J = Q @ Q.T + np.eye(4)
        G = J + 0.2 * np.eye(4)
        rss, s2 = 7.0, 0.3
        assert tic(rss, s2, G, J) - rss == pytest.approx(2 * s2 * div_unconstrained(G, J))


class TestTwoAxes:
    kind = TwoAxes()

    def test_projection_example(self):
        pr, div = analytic_project(self.kind, np.array([3.0, 2.0]))
        assert np.allclose(pr, [3.0, 0.0])
        assert div == 1.0

    def test_other_axis(self):
        pr, _ = self.kind.project(np.array([1.0, -4.0]))
        assert np.allclose(pr, [0.0, -4.0])

    def test_non_unique_locus(self):
        with pytest.raises(NonUniqueProjectionError):
            self.kind.project(np.array([2.0, -2.0]))

    def test_vectorized_matches_scalar(self, rng):
        Y = rng.standard_normal((200, 2))
        pr, div, bad = self.kind.project_many(Y)
        assert not bad.any()
        assert np.all(div == 1.0)
        for j in range(0, 200, 17):
            pr_j, _ = self.kind.project(Y[j])
            assert np.allclose(pr, pr, atol=0) and np.allclose(pr[j], pr_j)

    def test_df_values(self):
        df, df_s = analytic_df(self.kind)
        assert df == pytest.approx(1 + 2 / math.pi)
        assert round(df, 4) == 1.6366
        assert df_s == 1.0


class TestBall:
    def test_projection_outside(self):
        ball = L2Ball(1.0, 3)
        y = np.array([2.0, 0.0, 0.0])
        pr, div = ball.project(y)
        assert np.allclose(pr, y / 2.0)
        assert div == pytest.approx(1.0)  # s (n-1) / ||y|| = 2/2

    def test_projection_inside(self):
        ball = L2Ball(2.0, 3)
        y = np.array([0.3, -0.2, 0.1])
        pr, div = ball.project(y)
        assert np.allclose(pr, y)
        assert div == 3.0

    def test_df_quadrature_matches_incomplete_gamma(self):
        # closed form: s(n-1) E[1/||Y||; ||Y|| > s] + n P(||Y|| <= s) with
        # chi-squared radial law, written with regularized incomplete gammas
        for n in (2, 3, 5):
            for s in (0.5, 1.0, 2.0):
                for sigma2 in (0.25, 1.0, 1.7):
                    ball = L2Ball(s, n)
                    a = s**2 / sigma2
                    inv_term = (
                        gammaincc((n - 1) / 2.0, a / 2.0)
                        * math.gamma((n - 1) / 2.0)
                        / (math.sqrt(2.0 * sigma2) * math.gamma(n / 2.0))
                    )
                    want = s * (n - 1) * inv_term + n * gammainc(n / 2.0, a / 2.0)
                    assert ball.df(sigma2) == pytest.approx(want, abs=1e-9)

    def test_df_zero_radius(self):
        assert L2Ball(0.0, 3).df(1.0) == 0.0

    def test_analytic_df_equal_pair(self):
        df, df_s = analytic_df(L2Ball(1.0, 3), sigma2=0.25)
        assert df == df_s


class TestSphere:
    def test_projection_example(self):
        pr, div = L2Sphere(2).project(np.array([0.0, 0.5]))
        assert np.allclose(pr, [0.0, 1.0])
        assert div == pytest.approx(2.0)  # (n-1)/||y||

    def test_scale_equivariance(self, rng):
        sphere = L2Sphere(3)
        y = rng.standard_normal(3)
        pr1, _ = sphere.project(y)
        pr2, _ = sphere.project(3.7 * y)
        assert np.allclose(pr1, pr2)

    def test_origin_non_unique(self):
        with pytest.raises(NonUniqueProjectionError):
            L2Sphere(2).project(np.zeros(2))

    def test_df_n1(self):
        df, df_s = analytic_df(L2Sphere(1))
        assert df == pytest.approx(math.sqrt(2 / math.pi))
        assert df_s == 0.0

    def test_df_gamma_ratio(self):
        df, df_s = analytic_df(L2Sphere(3))
        want = math.sqrt(2.0) * math.gamma(2.0) / math.gamma(1.5)
        assert df == pytest.approx(want)
        assert df_s == df

    def test_unsupported_combination(self):
        with pytest.raises(ValueError):
            analytic_df(L2Sphere(3), sigma2=0.5)
        with pytest.raises(ValueError):
            analytic_df(TwoAxes(), xi=np.array([1.0, 0.0]))


class TestConstrainedVsUnconstrainedGap:
    def test_linear_model_documents_the_gap(self, rng):
        # interior fit: Theorem-3 divergence is p, while the constrained
        # formula at a full active set gives |A| - 1: the estimators differ
        X = rng.standard_normal((10, 4))
        G = X.T @ X
        gamma = np.sign(rng.standard_normal(4))
        active = np.arange(4)
        assert div_unconstrained(G, G) == pytest.approx(4.0, abs=1e-10)
        assert div_l1_constrained(G, G, gamma, active) == pytest.approx(3.0, abs=1e-8)
