"""Independent verification engines.

Everything here checks the analytic machinery from the outside: Monte Carlo
estimates of degrees of freedom straight from the covariance definition,
Monte Carlo averages of pointwise divergences (the Stein variant), central
finite differences of fitted-value maps, multistart numeric metric
projection, and the support function rho whose gradient recovers the
projection.

None of these reuse the divergence formulas they are meant to audit.  The
finite-difference oracle for path estimators re-solves the restricted KKT
system at fixed constraint value, warm-started from the base fit, so the
perturbed solves stay on the same solution branch; a branch switch (sign
change or KKT violation) raises instead of silently returning a
meaningless derivative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dof import NonUniqueProjectionError
from .models import Parametrization
from .solver import FitResult
from .util import substream

__all__ = [
    "McConfig",
    "McEstimate",
    "mc_df_covariance",
    "mc_df_stein",
    "mc_df_pair",
    "mc_true_risk",
    "fd_divergence",
    "numeric_projection",
    "gauss_newton",
    "fixed_branch_map",
    "rho_eval",
    "OracleError",
    "BranchSwitchError",
]

_MAX_STORED = 50_000_000  # draws x dimension cap for in-memory MC
_MAX_REDRAW_ROUNDS = 100


class OracleError(RuntimeError):
    pass


class BranchSwitchError(OracleError):
    """A perturbed re-solve left the active set / sign pattern of the base fit."""


@dataclass(frozen=True)
class McConfig:
    replications: int
    seed: int
    sigma2: float = 1.0
    xi: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def __post_init__(self):
        if self.replications < 2:
            raise ValueError("need at least 2 replications")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float).ravel())

    @property
    def n(self) -> int:
        return self.xi.size


@dataclass(frozen=True)
class McEstimate:
    estimate: float
    se: float
    redraws: int = 0


def _draw(config: McConfig, tag: str) -> np.ndarray:
    if config.replications * config.n > _MAX_STORED:
        raise ValueError("replications x dimension too large to hold in memory")
    rng = substream(config.seed, tag)
    return config.xi + np.sqrt(config.sigma2) * rng.standard_normal(
        (config.replications, config.n)
    )


def _project_all(projector, Y: np.ndarray, config: McConfig, tag: str) -> tuple[np.ndarray, np.ndarray | None, int]:
    """Apply a projector to all rows; redraw rows that hit the non-uniqueness locus.

    Returns (projections, divergences-or-None, redraw count).  Vectorized
    projectors expose ``project_many`` returning (pr, div, bad_mask); plain
    callables are applied row by row and may raise NonUniqueProjectionError.
    """
    redraw_rng = substream(config.seed, tag + "-redraw")
    redraws = 0
    if hasattr(projector, "project_many"):
        pr, div, bad = projector.project_many(Y)
        for _ in range(_MAX_REDRAW_ROUNDS):
            if not np.any(bad):
                break
            idx = np.flatnonzero(bad)
            redraws += idx.size
            Y[idx] = config.xi + np.sqrt(config.sigma2) * redraw_rng.standard_normal(
                (idx.size, config.n)
            )
            pr_new, div_new, bad_new = projector.project_many(Y[idx])
            pr[idx], div[idx] = pr_new, div_new
            bad = np.zeros(len(Y), dtype=bool)
            bad[idx[bad_new]] = True
        else:
            raise OracleError("too many redraws: non-uniqueness is not measure zero here")
        return pr, div, redraws
    pr = np.empty_like(Y)
    for j in range(len(Y)):
        for _ in range(_MAX_REDRAW_ROUNDS):
            try:
                pr[j] = projector(Y[j])
                break
            except NonUniqueProjectionError:
                redraws += 1
                Y[j] = config.xi + np.sqrt(config.sigma2) * redraw_rng.standard_normal(config.n)
        else:
            raise OracleError("too many redraws for a single draw")
    return pr, None, redraws


def mc_df_covariance(projector, config: McConfig) -> McEstimate:
    """Degrees of freedom from the covariance definition.

    Estimates (1/sigma^2) sum_i cov(Y_i, pr_i(Y)) by the sample covariance;
    the standard error comes from the per-draw influence statistic
    sum_i (Y_i - Ybar_i)(pr_i - prbar_i)/sigma^2.
    """
    Y = _draw(config, "mc-df")
    pr, _, redraws = _project_all(projector, Y, config, "mc-df")
    stat = ((Y - Y.mean(axis=0)) * (pr - pr.mean(axis=0))).sum(axis=1) / config.sigma2
    R = config.replications
    df = float(stat.sum() / (R - 1))
    se = float(stat.std(ddof=1) / np.sqrt(R))
    return McEstimate(df, se, redraws)


def mc_df_stein(divergence_fn, config: McConfig) -> McEstimate:
    """Stein degrees of freedom: Monte Carlo average of the divergence.

    ``divergence_fn`` is either a projection family with ``project_many``
    (its pointwise divergence is used) or a callable y -> real.
    """
    Y = _draw(config, "mc-df")
    if hasattr(divergence_fn, "project_many"):
        _, div, redraws = _project_all(divergence_fn, Y, config, "mc-df")
    else:
        redraws = 0
        div = np.array([float(divergence_fn(y)) for y in Y])
    df = float(div.mean())
    se = float(div.std(ddof=1) / np.sqrt(config.replications))
    return McEstimate(df, se, redraws)


def mc_df_pair(projector, config: McConfig) -> tuple[McEstimate, McEstimate, McEstimate]:
    """(df, df_stein, df - df_stein) on shared draws, with a paired-gap SE.

    Requires a vectorized projection family (divergence available per draw).
    """
    Y = _draw(config, "mc-df")
    pr, div, redraws = _project_all(projector, Y, config, "mc-df")
    if div is None:
        raise ValueError("mc_df_pair needs a projector with pointwise divergences")
    stat = ((Y - Y.mean(axis=0)) * (pr - pr.mean(axis=0))).sum(axis=1) / config.sigma2
    R = config.replications
    df = McEstimate(float(stat.sum() / (R - 1)), float(stat.std(ddof=1) / np.sqrt(R)), redraws)
    dfs = McEstimate(float(div.mean()), float(div.std(ddof=1) / np.sqrt(R)), redraws)
    gap = stat * (R / (R - 1)) - div
    gap_est = McEstimate(float(gap.mean()), float(gap.std(ddof=1) / np.sqrt(R)), redraws)
    return df, dfs, gap_est


def mc_true_risk(estimator, config: McConfig) -> McEstimate:
    """Monte Carlo estimate of Risk = E ||xi - estimator(Y)||^2."""
    Y = _draw(config, "mc-risk")
    pr, _, redraws = _project_all(estimator, Y, config, "mc-risk")
    losses = ((config.xi - pr) ** 2).sum(axis=1)
    return McEstimate(
        float(losses.mean()),
        float(losses.std(ddof=1) / np.sqrt(config.replications)),
        redraws,
    )


def fd_divergence(
    fitted_map: Callable[[np.ndarray], np.ndarray],
    y: np.ndarray,
    h: float | np.ndarray | None = None,
) -> float:
    """Central-difference divergence sum_i (f_i(y + h e_i) - f_i(y - h e_i)) / 2h.

    Default step 1e-4 * (1 + |y_i|) per coordinate balances truncation
    against re-solve noise when ``fitted_map`` is itself iterative.
    """
    y = np.asarray(y, dtype=float).ravel()
    if h is None:
        steps = 1e-4 * (1.0 + np.abs(y))
    else:
        steps = np.broadcast_to(np.asarray(h, dtype=float), y.shape)
    total = 0.0
    for i in range(y.size):
        yp = y.copy()
        yp[i] += steps[i]
        ym = y.copy()
        ym[i] -= steps[i]
        total += (fitted_map(yp)[i] - fitted_map(ym)[i]) / (2.0 * steps[i])
    return float(total)


def gauss_newton(
    model: Parametrization,
    y: np.ndarray,
    beta0: np.ndarray,
    max_iter: int = 200,
    gtol: float = 1e-11,
    max_backtracks: int = 40,
) -> tuple[np.ndarray, bool]:
    """Damped Gauss-Newton for min ||y - zeta(beta)||^2, with a ridge fallback.

    Returns (beta, converged); convergence means the gradient inf-norm
    dropped below gtol * max(1, rss).
    """
    bound = model.bind(y)
    beta = np.array(beta0, dtype=float).ravel().copy()
    rss = bound.rss(beta)
    ridge = 0.0
    eps = np.finfo(float).eps
    for _ in range(max_iter):
        jac = model.jacobian(beta)
        r = np.asarray(y, dtype=float).ravel(order="F") - model.eval(beta)
        grad = jac.T @ r
        JTJ = jac.T @ jac
        grad_max = float(np.abs(grad).max())
        # below stall_tol, rss improvements are lost to double rounding
        stall_tol = np.sqrt(eps * max(rss, eps) * max(JTJ.diagonal().max(), eps))
        if grad_max <= gtol * max(1.0, rss):
            return beta, True
        scale = np.trace(JTJ) / max(1, JTJ.shape[0])
        while True:
            try:
                step = np.linalg.solve(JTJ + ridge * scale * np.eye(len(beta)), grad)
            except np.linalg.LinAlgError:
                ridge = max(ridge * 10.0, 1e-12)
                continue
            if np.all(np.isfinite(step)):
                break
            ridge = max(ridge * 10.0, 1e-12)
        alpha = 1.0
        improved = False
        for _ in range(max_backtracks):
            candidate = beta + alpha * step
            rss_new = bound.rss(candidate)
            if rss_new < rss:
                beta, rss, improved = candidate, rss_new, True
                break
            alpha *= 0.5
        if not improved:
            if ridge < 1e-4:
                ridge = max(ridge * 10.0, 1e-12)
                continue
            return beta, grad_max <= stall_tol
        ridge *= 0.1
    return beta, False


def numeric_projection(
    models: Parametrization | Sequence[Parametrization],
    y: np.ndarray,
    multistart: int = 16,
    seed: int = 0,
    spread: float = 1.0,
) -> np.ndarray:
    """Multistart local minimization of ||y - zeta(beta)||^2; best point found.

    ``models`` may be a sequence of charts; the minimum is taken across
    charts.  Intended for small problems (p <= 8) to audit solver output.
    """
    charts = [models] if isinstance(models, Parametrization) else list(models)
    y = np.asarray(y, dtype=float).ravel()
    rng = substream(seed, "numeric-projection")
    best_rss = np.inf
    best_pr: np.ndarray | None = None
    for chart in charts:
        starts = [np.zeros(chart.p)] + [
            spread * rng.standard_normal(chart.p) for _ in range(multistart - 1)
        ]
        for start in starts:
            beta, ok = gauss_newton(chart, y, start)
            if not ok:
                continue
            pr = chart.eval(beta)
            rss = float(((y - pr) ** 2).sum())
            if rss < best_rss:
                best_rss, best_pr = rss, pr
    if best_pr is None:
        raise OracleError("no multistart converged on any chart")
    return best_pr


def fixed_branch_map(
    model: Parametrization,
    base_fit: FitResult,
    newton_tol: float = 1e-12,
    max_iter: int = 60,
    kkt_slack: float = 1e-7,
) -> Callable[[np.ndarray], np.ndarray]:
    """Fitted-value map y -> zeta(beta_hat(y)) at fixed constraint s = base s.

    Solves the active-set KKT system

        (D zeta^T (y - zeta))_A = lambda * gamma_A,
        gamma_A^T beta_A        = s_base

    by Newton, warm-started from the base fit, with inactive coordinates
    frozen at zero and the sign pattern held.  Raises BranchSwitchError if
    a sign flips, the multiplier leaves (0, inf), or an inactive KKT bound
    breaks: across such events the divergence is undefined.
    """
    active = base_fit.active_set
    if active.size == 0:
        raise ValueError("fixed-branch map needs a nonempty active set")
    gamma_a = base_fit.gamma[active].copy()
    signs = np.sign(base_fit.beta[active])
    s0 = base_fit.s
    omega = base_fit.weights

    def fitted(y: np.ndarray) -> np.ndarray:
        bound = model.bind(y)
        beta = base_fit.beta.copy()
        lam = base_fit.lam
        k = active.size
        for _ in range(max_iter):
            g = bound.gradient(beta)
            r1 = g[active] - lam * gamma_a
            r2 = float(gamma_a @ beta[active] - s0)
            resid = max(np.abs(r1).max(), abs(r2))
            if resid <= newton_tol * max(1.0, abs(lam)):
                break
            J_aa = model.j_matrix(beta, y, coords=active)
            kkt = np.zeros((k + 1, k + 1))
            kkt[:k, :k] = -J_aa
            kkt[:k, k] = -gamma_a
            kkt[k, :k] = gamma_a
            step = np.linalg.solve(kkt, -np.concatenate([r1, [r2]]))
            beta[active] += step[:k]
            lam += step[k]
        else:
            raise OracleError("fixed-branch Newton did not converge")
        if np.any(np.sign(beta[active]) != signs):
            raise BranchSwitchError("active coordinate changed sign under perturbation")
        if lam <= 0:
            raise BranchSwitchError("Lagrange multiplier left (0, inf)")
        g = bound.gradient(beta)
        inactive = np.setdiff1d(np.arange(model.p), active)
        if inactive.size and np.any(np.abs(g[inactive]) > lam * omega[inactive] + kkt_slack):
            raise BranchSwitchError("an inactive coordinate violates its KKT bound")
        return model.eval(beta)

    return fitted


def rho_eval(kind, y: np.ndarray) -> float:
    """rho(y) = ||y||^2/2 - dist(y, K)^2/2; its gradient is the metric projection."""
    y = np.asarray(y, dtype=float)
    dist = kind.distance(y)
    return float(0.5 * (y @ y) - 0.5 * dist**2)
