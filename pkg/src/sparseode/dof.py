"""Divergence formulas, SURE risk estimates, TIC, and analytic projections.

Two divergence formulas for the fitted-value map of a least squares
estimator, both obtained by implicit differentiation:

* unconstrained interior fit:  div = tr(J^{-1} G)
* l1-constrained fit with active set A and KKT subgradient gamma:
  div = tr(J_AA^{-1} G_AA)
        - gamma_A^T J_AA^{-1} G_AA J_AA^{-1} gamma_A / (gamma_A^T J_AA^{-1} gamma_A)

Plugging a divergence into rss - n sigma^2 + 2 sigma^2 div gives the
unbiased risk estimate whenever the estimator map is regular enough; for
non-convex model sets the estimate is negatively biased in general, which
the Monte Carlo oracles quantify.

Three closed-form projection families with known degrees of freedom are
included as ground truth for those oracles: the union of the two
coordinate axes in R^2, the l2-ball, and the unit l2-sphere.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

__all__ = [
    "RiskEstimate",
    "div_unconstrained",
    "div_l1_constrained",
    "sure_risk",
    "tic",
    "TwoAxes",
    "L2Ball",
    "L2Sphere",
    "analytic_project",
    "analytic_df",
    "NonUniqueProjectionError",
    "PreconditionError",
]

COND_LIMIT = 1e12


class PreconditionError(RuntimeError):
    """A hypothesis of the divergence formula fails numerically."""


class NonUniqueProjectionError(ValueError):
    """The requested point lies on the non-uniqueness locus of the projection."""


@dataclass(frozen=True)
class RiskEstimate:
    rss: float
    n: int
    sigma2: float
    divergence: float
    risk_hat: float
    variant: str = "exact_divergence"


def _solve_guarded(J: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    cond = np.linalg.cond(J)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise PreconditionError(f"{what} is numerically singular (cond={cond:.3e})")
    return np.linalg.solve(J, rhs)


def div_unconstrained(G: np.ndarray, J: np.ndarray) -> float:
    """tr(J^{-1} G) for an interior (unconstrained) least squares fit."""
    G = np.asarray(G, dtype=float)
    J = np.asarray(J, dtype=float)
    if G.shape != J.shape or G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ValueError("G and J must be square matrices of equal size")
    return float(np.trace(_solve_guarded(J, G, "J")))


def div_l1_constrained(
    G: np.ndarray, J: np.ndarray, gamma: np.ndarray, active: np.ndarray
) -> float:
    """Divergence of the l1-constrained fit from the active-set KKT system.

    ``G`` and ``J`` may be the full p x p matrices (they are restricted to
    ``active`` here) or already-restricted |A| x |A| blocks, in which case
    ``gamma`` must be restricted the same way.
    """
    active = np.asarray(active, dtype=int)
    if active.size == 0:
        warnings.warn("empty active set: divergence is 0 (constant estimator)")
        return 0.0
    G = np.asarray(G, dtype=float)
    J = np.asarray(J, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if G.shape[0] > active.size:
        G = G[np.ix_(active, active)]
        J = J[np.ix_(active, active)]
    if gamma.size > active.size:
        gamma = gamma[active]
    Jinv_G = _solve_guarded(J, G, "J_AA")
    Jinv_gamma = _solve_guarded(J, gamma, "J_AA")
    denom = float(gamma @ Jinv_gamma)
    if abs(denom) <= 1e-12:
        raise PreconditionError(f"gamma_A^T J_AA^{{-1}} gamma_A = {denom:.3e} is degenerate")
    correction = float(Jinv_gamma @ G @ Jinv_gamma) / denom
    return float(np.trace(Jinv_G)) - correction


def sure_risk(rss: float, n: int, sigma2: float, divergence: float, variant: str = "exact_divergence") -> RiskEstimate:
    """Unbiased-style risk estimate rss - n sigma^2 + 2 sigma^2 divergence."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    risk_hat = rss - n * sigma2 + 2.0 * sigma2 * divergence
    return RiskEstimate(rss=float(rss), n=int(n), sigma2=float(sigma2), divergence=float(divergence), risk_hat=float(risk_hat), variant=variant)


def tic(rss: float, sigma2: float, G: np.ndarray, J: np.ndarray) -> float:
    """Takeuchi's information criterion rss + 2 sigma^2 tr(J^{-1} G)."""
    return float(rss + 2.0 * sigma2 * div_unconstrained(G, J))


# ---------------------------------------------------------------------------
# Analytic projection families
# ---------------------------------------------------------------------------
UNIQUENESS_TOL = 1e-12


class TwoAxes:
    """Union of the two coordinate axes in R^2 (best subset with 2 orthogonal predictors).

    The projection keeps the larger coordinate; its divergence is 1
    everywhere off the non-uniqueness locus |y1| = |y2|, yet df = 1 + 2/pi:
    the gap is carried by a singular measure on that locus.
    """

    n = 2

    def distance(self, y: np.ndarray) -> float:
        y = np.asarray(y, dtype=float)
        return float(min(abs(y[0]), abs(y[1])))

    def project(self, y: np.ndarray) -> tuple[np.ndarray, float]:
        y = np.asarray(y, dtype=float)
        if y.shape != (2,):
            raise ValueError("two_axes projection is defined on R^2")
        if abs(abs(y[0]) - abs(y[1])) <= UNIQUENESS_TOL:
            raise NonUniqueProjectionError(f"|y1| = |y2| at y={y}: projection not unique")
        if abs(y[0]) > abs(y[1]):
            return np.array([y[0], 0.0]), 1.0
        return np.array([0.0, y[1]]), 1.0

    def project_many(self, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized projection; returns (projections, divergences, non_unique_mask)."""
        Y = np.asarray(Y, dtype=float)
        a0, a1 = np.abs(Y[:, 0]), np.abs(Y[:, 1])
        bad = np.abs(a0 - a1) <= UNIQUENESS_TOL
        pr = np.zeros_like(Y)
        first = a0 > a1
        pr[first, 0] = Y[first, 0]
        pr[~first, 1] = Y[~first, 1]
        return pr, np.ones(len(Y)), bad


class L2Ball:
    """Closed l2-ball of radius s centered at the origin (convex shrinkage)."""

    def __init__(self, radius: float, n: int):
        if radius < 0:
            raise ValueError("radius must be nonnegative")
        self.radius = float(radius)
        self.n = int(n)

    def distance(self, y: np.ndarray) -> float:
        return float(max(0.0, np.linalg.norm(y) - self.radius))

    def project(self, y: np.ndarray) -> tuple[np.ndarray, float]:
        y = np.asarray(y, dtype=float)
        norm = float(np.linalg.norm(y))
        if norm > self.radius:
            return self.radius * y / norm, self.radius * (len(y) - 1) / norm
        return y.copy(), float(len(y))

    def project_many(self, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        Y = np.asarray(Y, dtype=float)
        norms = np.linalg.norm(Y, axis=1)
        outside = norms > self.radius
        pr = Y.copy()
        pr[outside] *= (self.radius / norms[outside])[:, None]
        div = np.full(len(Y), float(Y.shape[1]))
        div[outside] = self.radius * (Y.shape[1] - 1) / norms[outside]
        return pr, div, np.zeros(len(Y), dtype=bool)

    def df(self, sigma2: float = 1.0) -> float:
        """Exact df at xi = 0: s(n-1) E[||Y||^{-1} 1(||Y|| > s)] + n P(||Y|| <= s).

        Evaluated by adaptive quadrature over the chi-squared radial law.
        """
        n, s = self.n, self.radius
        if s == 0.0:
            return 0.0
        sigma = math.sqrt(sigma2)
        a = (s / sigma) ** 2

        def chi2_pdf(q: float) -> float:
            return q ** (n / 2.0 - 1.0) * math.exp(-q / 2.0) / (2 ** (n / 2.0) * math.gamma(n / 2.0))

        inv_norm, _ = quad(lambda q: chi2_pdf(q) / (sigma * math.sqrt(q)), a, np.inf, epsabs=1e-10, epsrel=1e-12)
        p_inside, _ = quad(chi2_pdf, 0.0, a, epsabs=1e-10, epsrel=1e-12) if a > 0 else (0.0, 0.0)
        return s * (n - 1) * inv_norm + n * p_inside


class L2Sphere:
    """Unit l2-sphere: pr(y) = y/||y||, divergence (n-1)/||y||.

    Non-convex, exoskeleton {0}; yet the singular measure vanishes for
    n >= 2, while for n = 1 it has mass 2 at the origin (df_S = 0 but
    df = sqrt(2/pi)).
    """

    def __init__(self, n: int):
        self.n = int(n)

    def distance(self, y: np.ndarray) -> float:
        return float(abs(np.linalg.norm(y) - 1.0))

    def project(self, y: np.ndarray) -> tuple[np.ndarray, float]:
        y = np.asarray(y, dtype=float)
        norm = float(np.linalg.norm(y))
        if norm <= UNIQUENESS_TOL:
            raise NonUniqueProjectionError("projection onto the sphere is not unique at 0")
        return y / norm, (len(y) - 1) / norm

    def project_many(self, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        Y = np.asarray(Y, dtype=float)
        norms = np.linalg.norm(Y, axis=1)
        bad = norms <= UNIQUENESS_TOL
        safe = np.where(bad, 1.0, norms)
        pr = Y / safe[:, None]
        div = (Y.shape[1] - 1) / safe
        return pr, div, bad


def analytic_project(kind, y: np.ndarray) -> tuple[np.ndarray, float]:
    """Metric projection and pointwise divergence for a closed-form family."""
    return kind.project(y)


def analytic_df(kind, sigma2: float = 1.0, xi: np.ndarray | None = None) -> tuple[float, float]:
    """Exact (df, df_stein) where a closed form is known.

    Supported: TwoAxes at xi=0, sigma2=1; L2Sphere at xi=0, sigma2=1;
    L2Ball at xi=0 for any sigma2 (quadrature).  Anything else raises.
    """
    if xi is not None and np.any(np.asarray(xi) != 0):
        raise ValueError("closed-form df values are only available at xi = 0")
    if isinstance(kind, TwoAxes):
        if sigma2 != 1.0:
            raise ValueError("two-axes df is tabulated for sigma2 = 1 only")
        return 1.0 + 2.0 / math.pi, 1.0
    if isinstance(kind, L2Sphere):
        if sigma2 != 1.0:
            raise ValueError("sphere df is tabulated for sigma2 = 1 only")
        if kind.n == 1:
            return math.sqrt(2.0 / math.pi), 0.0
        df = math.sqrt(2.0) * math.gamma((kind.n + 1) / 2.0) / math.gamma(kind.n / 2.0)
        return df, df
    if isinstance(kind, L2Ball):
        df = kind.df(sigma2)
        return df, df
    raise ValueError(f"no closed-form df for {kind!r}")
