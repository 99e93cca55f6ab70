"""Coordinate descent for l1-penalized nonlinear least squares.

The internal objective is

    F(beta) = (1/2) ||y - zeta(beta)||^2 + lambda * sum_k omega_k |beta_k|

so the stationarity system D zeta(beta)^T (y - zeta(beta)) = lambda * gamma
holds with Lagrange multiplier exactly lambda.  Each coordinate solves the
penalized Gauss-Newton quadratic in closed form by soft-thresholding, and
every step must pass an Armijo sufficient-decrease test against the true
objective before it is accepted (the loss is not convex, so the quadratic
model can overshoot).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .models import Parametrization
from .util import FLATTEN_ORDER

__all__ = [
    "SolverConfig",
    "FitResult",
    "LambdaPath",
    "KktReport",
    "coordinate_descent",
    "armijo_backtrack",
    "lambda_max",
    "default_lambda_grid",
    "lambda_path",
    "kkt_check",
]


class DivergenceError(RuntimeError):
    """The objective became non-finite during optimization."""


@dataclass(frozen=True)
class SolverConfig:
    max_sweeps: int = 500
    tol_rel: float = 1e-8
    kkt_tol: float = 1e-6
    armijo_c: float = 1e-4
    armijo_shrink: float = 0.5
    max_backtracks: int = 30
    flat_tol: float = 1e-14  # ||d_k zeta||^2 below this: coordinate skipped
    audit_objective: bool = False

    def __post_init__(self):
        if self.max_sweeps < 1 or self.max_backtracks < 0:
            raise ValueError("iteration limits must be positive")
        if self.tol_rel <= 0 or self.kkt_tol <= 0 or self.flat_tol <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.armijo_c < 1 or not 0 < self.armijo_shrink < 1:
            raise ValueError("Armijo parameters must lie in (0, 1)")


@dataclass
class FitResult:
    beta: np.ndarray
    lam: float
    weights: np.ndarray
    active_set: np.ndarray  # indices with beta_k != 0
    s: float  # sum_k omega_k |beta_k|
    gamma: np.ndarray  # KKT subgradient coordinates
    lagrange: float
    rss: float
    converged: bool
    sweeps_used: int
    kkt_residual: float
    skipped_coords: tuple[int, ...] = ()
    objective_trace: list[float] | None = None


@dataclass
class LambdaPath:
    fits: list[FitResult]

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([f.lam for f in self.fits])

    @property
    def s_values(self) -> np.ndarray:
        return np.array([f.s for f in self.fits])

    def __len__(self) -> int:
        return len(self.fits)

    def __iter__(self):
        return iter(self.fits)

    def __getitem__(self, i) -> FitResult:
        return self.fits[i]


class ArmijoStep(NamedTuple):
    delta: float
    objective: float  # objective value at the accepted step (at 0 if rejected)


class KktReport(NamedTuple):
    residual: float
    gamma: np.ndarray
    second_order_ok: bool
    lagrange: float


def _soft(z: float, a: float) -> float:
    return np.sign(z) * max(abs(z) - a, 0.0)


def _check_weights(weights: np.ndarray, p: int) -> np.ndarray:
    w = np.asarray(weights, dtype=float).ravel()
    if w.size != p:
        raise ValueError(f"weights have {w.size} entries, expected {p}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be nonnegative and finite")
    return w


def armijo_backtrack(
    objective_at: Callable[[np.ndarray], float],
    beta: np.ndarray,
    k: int,
    delta_proposed: float,
    surrogate_decrease: Callable[[float], float],
    config: SolverConfig,
    f_current: float | None = None,
    objective_decrease: Callable[[float], float] | None = None,
) -> ArmijoStep:
    """Backtrack delta_proposed until the true objective drops sufficiently.

    Accepts the first delta = shrink^j * delta_proposed, j <= max_backtracks,
    with objective decrease >= armijo_c times the surrogate-model decrease
    for that scaled step (which must itself be positive).  Returns a zero
    step if no j succeeds.

    ``objective_decrease``, when given, evaluates F(beta) - F(beta + d e_k)
    directly; models that can form this difference without cancellation keep
    the test meaningful for arbitrarily small steps.
    """
    if not np.isfinite(delta_proposed):
        raise ValueError("proposed step must be finite")
    if f_current is None:
        f_current = objective_at(beta)
    if delta_proposed == 0.0:
        return ArmijoStep(0.0, f_current)
    if objective_decrease is None:
        candidate = np.array(beta, dtype=float, copy=True)

        def objective_decrease(d: float) -> float:
            candidate[k] = beta[k] + d
            return f_current - objective_at(candidate)

    delta = float(delta_proposed)
    for _ in range(config.max_backtracks + 1):
        predicted = surrogate_decrease(delta)
        if predicted > 0.0:
            decrease = objective_decrease(delta)
            if decrease >= config.armijo_c * predicted:
                return ArmijoStep(delta, f_current - decrease)
        delta *= config.armijo_shrink
    return ArmijoStep(0.0, f_current)


def coordinate_descent(
    model: Parametrization,
    y: np.ndarray,
    lam: float,
    weights: np.ndarray,
    beta_init: np.ndarray | None = None,
    config: SolverConfig | None = None,
    update_coords: np.ndarray | None = None,
) -> FitResult:
    """Cyclic penalized coordinate descent; returns a KKT-certified fit.

    ``update_coords`` restricts the sweep to a subset of coordinates (the
    others stay frozen at their initial values); used by the stepwise
    search to fit a fixed sparsity pattern.
    """
    config = config or SolverConfig()
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    omega = _check_weights(weights, model.p)
    bound = model.bind(y)
    beta = np.zeros(model.p) if beta_init is None else np.array(beta_init, dtype=float).ravel(order=FLATTEN_ORDER).copy()
    if beta.size != model.p or not np.all(np.isfinite(beta)):
        raise ValueError("beta_init must be a finite p-vector")
    coords = np.arange(model.p) if update_coords is None else np.asarray(update_coords, dtype=int)

    def objective(b: np.ndarray) -> float:
        return 0.5 * bound.rss(b) + lam * float(omega @ np.abs(b))

    f_val = objective(beta)
    if not np.isfinite(f_val):
        raise DivergenceError("objective non-finite at the initial point")
    trace = [f_val] if config.audit_objective else None
    skipped: set[int] = set()
    converged = False
    sweeps = 0

    for sweeps in range(1, config.max_sweeps + 1):
        f_prev = f_val
        for k in coords:
            gk, ak = bound.surrogate_k(beta, k)
            if ak < config.flat_tol:
                skipped.add(int(k))
                continue
            z = _soft(gk + ak * beta[k], lam * omega[k]) / ak
            delta = z - beta[k]
            if delta == 0.0:
                continue
            # a skipped move leaves at most this much coordinate KKT residual,
            # well inside the certificate tolerance
            if beta[k] != 0.0 and z != 0.0 and ak * abs(delta) <= 1e-3 * config.kkt_tol:
                continue

            def surrogate_decrease(d: float, gk=gk, ak=ak, bk=beta[k], wk=omega[k]) -> float:
                return gk * d - 0.5 * ak * d * d + lam * wk * (abs(bk) - abs(bk + d))

            def objective_decrease(d: float, k=k, bk=beta[k], wk=omega[k]) -> float:
                loss_change = bound.loss_delta(beta, k, d)
                return -(loss_change + lam * wk * (abs(bk + d) - abs(bk)))

            step = armijo_backtrack(
                objective, beta, k, delta, surrogate_decrease, config,
                f_current=f_val, objective_decrease=objective_decrease,
            )
            if step.delta != 0.0:
                beta[k] += step.delta
                f_val = step.objective
                if not np.isfinite(f_val):
                    raise DivergenceError("objective became non-finite")
                if trace is not None:
                    trace.append(f_val)
        rel_change = abs(f_prev - f_val) / max(1.0, abs(f_prev))
        if rel_change < config.tol_rel:
            if _kkt_residual(bound.gradient(beta), beta, lam, omega, coords) <= config.kkt_tol:
                converged = True
                break

    g = bound.gradient(beta)
    residual = _kkt_residual(g, beta, lam, omega, coords)
    gamma = _extract_gamma(g, beta, lam, omega)
    active = np.flatnonzero(beta)
    return FitResult(
        beta=beta,
        lam=float(lam),
        weights=omega,
        active_set=active,
        s=float(omega @ np.abs(beta)),
        gamma=gamma,
        lagrange=float(lam),
        rss=bound.rss(beta),
        converged=converged,
        sweeps_used=sweeps,
        kkt_residual=residual,
        skipped_coords=tuple(sorted(skipped)),
        objective_trace=trace,
    )


def _kkt_residual(
    g: np.ndarray, beta: np.ndarray, lam: float, omega: np.ndarray, coords: np.ndarray
) -> float:
    res = 0.0
    for k in coords:
        if beta[k] != 0.0:
            res = max(res, abs(g[k] - lam * omega[k] * np.sign(beta[k])))
        else:
            res = max(res, max(0.0, abs(g[k]) - lam * omega[k]))
    return float(res)


def _extract_gamma(g: np.ndarray, beta: np.ndarray, lam: float, omega: np.ndarray) -> np.ndarray:
    gamma = np.zeros_like(beta)
    active = beta != 0.0
    gamma[active] = omega[active] * np.sign(beta[active])
    inactive = ~active
    if lam > 0:
        gamma[inactive] = np.clip(g[inactive] / lam, -omega[inactive], omega[inactive])
    return gamma


def lambda_max(model: Parametrization, y: np.ndarray, weights: np.ndarray) -> float:
    """Smallest lambda for which beta = 0 satisfies the KKT conditions."""
    omega = _check_weights(weights, model.p)
    if not np.any(omega > 0):
        raise ValueError("lambda_max needs at least one penalized coordinate")
    g = model.bind(y).gradient(np.zeros(model.p))
    mask = omega > 0
    return float(np.max(np.abs(g[mask]) / omega[mask]))


def default_lambda_grid(lam_max: float, size: int = 40, min_ratio: float = 1e-3) -> np.ndarray:
    """Log-spaced grid from lam_max down to min_ratio * lam_max."""
    if lam_max <= 0:
        raise ValueError("lam_max must be positive")
    return np.geomspace(lam_max, lam_max * min_ratio, size)


def lambda_path(
    model: Parametrization,
    y: np.ndarray,
    weights: np.ndarray,
    grid: np.ndarray | None = None,
    config: SolverConfig | None = None,
    beta_init: np.ndarray | None = None,
) -> LambdaPath:
    """Warm-started solution path over a decreasing lambda grid.

    The penalized solution at lambda is also the constrained solution at
    s(lambda) = sum_k omega_k |beta_k|, with Lagrange multiplier lambda;
    each FitResult records both.
    """
    if grid is None:
        grid = default_lambda_grid(lambda_max(model, y, weights))
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("lambda grid must be a nonempty 1-D array")
    if grid.size > 1 and not np.all(np.diff(grid) < 0):
        raise ValueError("lambda grid must be strictly decreasing")
    fits: list[FitResult] = []
    beta = beta_init
    for lam in grid:
        fit = coordinate_descent(model, y, float(lam), weights, beta_init=beta, config=config)
        fits.append(fit)
        beta = fit.beta
    return LambdaPath(fits)


def kkt_check(
    model: Parametrization,
    fit: FitResult,
    y: np.ndarray,
    pd_tol: float = 1e-12,
) -> KktReport:
    """Recompute the KKT system for a fit and audit the second-order condition.

    The Lagrange multiplier is re-extracted from the active coordinates by
    least squares when possible (falling back to the fit's lambda), and
    second_order_ok checks that J restricted to the active set is positive
    definite on the subspace orthogonal to gamma.
    """
    omega = fit.weights
    g = model.bind(y).gradient(fit.beta)
    active = fit.active_set
    lam_hat = fit.lam
    if active.size and np.any(omega[active] > 0):
        gam_act = omega[active] * np.sign(fit.beta[active])
        denom = float(gam_act @ gam_act)
        if denom > 0:
            lam_hat = float(gam_act @ g[active] / denom)
    if active.size == 0 and lam_hat <= 0:
        warnings.warn("empty active set with nonpositive Lagrange multiplier")
    residual = _kkt_residual(g, fit.beta, lam_hat, omega, np.arange(model.p))
    gamma = _extract_gamma(g, fit.beta, lam_hat, omega)

    second_order_ok = True
    if active.size:
        J_aa = model.j_matrix(fit.beta, y, coords=active)
        gam_act = gamma[active]
        if np.linalg.norm(gam_act) == 0.0:
            basis = np.eye(active.size)
        else:
            # orthonormal basis of {delta : delta^T gamma_A = 0}
            q, _ = np.linalg.qr(np.column_stack([gam_act, np.eye(active.size)]))
            basis = q[:, 1:]
        if basis.shape[1]:
            eigs = np.linalg.eigvalsh(basis.T @ J_aa @ basis)
            scale = max(1.0, float(np.abs(eigs).max()))
            second_order_ok = bool(eigs.min() > pd_tol * scale)
    return KktReport(residual=residual, gamma=gamma, second_order_ok=second_order_ok, lagrange=lam_hat)
