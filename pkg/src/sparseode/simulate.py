"""Simulation study harness: sparse linear-ODE recovery with risk curves.

One replication draws initial conditions x ~ N(0, init_scale^2 I) columnwise,
observes Y = e^{t B_true} x + noise, then runs the estimator suite:

* the l1 path (unit or adaptive weights) with the constrained-fit divergence
  and both risk estimates,
* the MLE (linear least squares in A = e^{tB}, principal log for B),
* hard thresholding of the MLE,
* forward stepwise pattern search with formula- and count-based df.

Risk curves are linearly interpolated from each replication's path knots
onto a fixed constraint grid before averaging, since the per-replication
constraint values s(lambda) are random.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .dof import PreconditionError, div_l1_constrained
from .expm import LogmDomainError, expm, logm_principal
from .models import IsochronalOdeModel
from .solver import SolverConfig, default_lambda_grid, lambda_max, lambda_path
from .stepwise import forward_stepwise, search_df
from .util import FLATTEN_ORDER, flatten, fmt_float, substream

__all__ = [
    "SimConfig",
    "SimSummary",
    "paper_b10",
    "desk_config",
    "paper_config",
    "generate_replication",
    "mle_fit",
    "adaptive_weights",
    "threshold_curve",
    "estimate_sigma2",
    "run_study",
    "write_replication_csv",
    "write_summary_csv",
    "write_stepwise_csv",
    "write_threshold_csv",
    "write_scalars_csv",
]


def paper_b10() -> np.ndarray:
    """The built-in sparse 10 x 10 drift matrix (28 nonzero entries)."""
    B = -np.eye(10)
    first_row = [-1.0, -1.0, -0.9, -0.8, -0.7, -0.6, -0.4, -0.3, -0.2, -0.1]
    first_col = [1.0, 0.9, 0.8, 0.7, 0.6, 0.4, 0.3, 0.2, 0.1]
    B[0, :] = first_row
    B[1:, 0] = first_col
    return B


@dataclass(frozen=True)
class SimConfig:
    d: int
    m: int
    t: float
    sigma2: float
    B_true: np.ndarray
    init_scale: float
    replications: int
    seed: int
    lambda_grid_size: int = 40
    lambda_min_ratio: float = 1e-3
    weight_mode: str = "unit"  # "unit" or "adaptive"
    s_grid: np.ndarray | None = None
    s_grid_size: int = 60
    stepwise_max_nonzero: int | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    # unpenalized restricted refits converge linearly and feed Monte Carlo
    # averages with ~1e-1 standard errors; a 1e-5 certificate is plenty there
    stepwise_solver: SolverConfig = field(
        default_factory=lambda: SolverConfig(tol_rel=1e-7, kkt_tol=1e-5)
    )
    threads: int = 1

    def __post_init__(self):
        B = np.asarray(self.B_true, dtype=float)
        if B.shape != (self.d, self.d):
            raise ValueError("B_true must be d x d")
        if min(self.d, self.m, self.replications) < 1 or self.t <= 0 or self.sigma2 < 0 or self.init_scale <= 0:
            raise ValueError("invalid simulation configuration")
        if self.weight_mode not in ("unit", "adaptive"):
            raise ValueError("weight_mode must be 'unit' or 'adaptive'")
        object.__setattr__(self, "B_true", B)
        if self.s_grid is None:
            # adaptive weights scale each true coordinate to ~1, so the
            # natural grid ceiling is the nonzero count instead of the norm
            if self.weight_mode == "adaptive":
                top = 1.2 * np.count_nonzero(B)
            else:
                top = 1.2 * np.abs(B).sum()
            object.__setattr__(self, "s_grid", np.linspace(0.0, top, self.s_grid_size))
        else:
            object.__setattr__(self, "s_grid", np.asarray(self.s_grid, dtype=float))

    @property
    def p(self) -> int:
        return self.d * self.d

    @property
    def n(self) -> int:
        return self.d * self.m


def desk_config(replications: int = 200, seed: int = 20240901, **overrides) -> SimConfig:
    """Desk-scale default: d=4, m=6, the leading 4x4 block of the built-in B."""
    cfg = SimConfig(
        d=4,
        m=6,
        t=1.0,
        sigma2=0.25,
        B_true=paper_b10()[:4, :4],
        init_scale=4.0,
        replications=replications,
        seed=seed,
    )
    return replace(cfg, **overrides) if overrides else cfg


def paper_config(replications: int = 1000, seed: int = 20240901, **overrides) -> SimConfig:
    """Full-scale study configuration: d=10, m=15 (hours, not an acceptance target)."""
    cfg = SimConfig(
        d=10,
        m=15,
        t=1.0,
        sigma2=0.25,
        B_true=paper_b10(),
        init_scale=4.0,
        replications=replications,
        seed=seed,
        stepwise_max_nonzero=40,
    )
    return replace(cfg, **overrides) if overrides else cfg


def generate_replication(config: SimConfig, rep_index: int) -> tuple[np.ndarray, np.ndarray]:
    """(x, Y) for one replication; deterministic given (seed, rep_index)."""
    rng = substream(config.seed, rep_index)
    x = config.init_scale * rng.standard_normal((config.d, config.m))
    mean = expm(config.t * config.B_true) @ x
    noise = rng.standard_normal((config.d, config.m)) if config.sigma2 > 0 else 0.0
    return x, mean + math.sqrt(config.sigma2) * noise


def mle_fit(x: np.ndarray, Y: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
    """MLE of (A, B): A_hat = Y x^T (x x^T)^{-1}, B_hat = log(A_hat)/t.

    Raises LinAlgError when x x^T is singular and LogmDomainError when
    A_hat has spectrum outside the principal-log domain; callers may keep
    the replication for path estimators in the latter case.
    """
    xxT = x @ x.T
    cond = np.linalg.cond(xxT)
    if not np.isfinite(cond) or cond > 1e12:
        raise np.linalg.LinAlgError("x x^T is singular; need m >= d informative columns")
    A_hat = np.linalg.solve(xxT, x @ Y.T).T
    B_hat = logm_principal(A_hat) / t
    return A_hat, B_hat


def adaptive_weights(B_hat: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """omega_kl = 1/|B_hat_kl| flattened (magnitudes floored to stay finite)."""
    return 1.0 / np.maximum(np.abs(flatten(B_hat)), floor)


def threshold_curve(
    B_hat: np.ndarray, levels: np.ndarray, exempt_diagonal: bool = False
) -> list[tuple[np.ndarray, int]]:
    """Hard-thresholded versions of B_hat: entries with |B_kl| < level zeroed.

    ``exempt_diagonal`` keeps the diagonal untouched (the simulation study
    uses this so e^{tB} stays away from degenerate comparisons).
    """
    levels = np.atleast_1d(np.asarray(levels, dtype=float))
    out = []
    diag = np.eye(B_hat.shape[0], dtype=bool)
    for level in levels:
        keep = np.abs(B_hat) >= level
        if exempt_diagonal:
            keep |= diag
        B_thr = np.where(keep, B_hat, 0.0)
        out.append((B_thr, int(np.count_nonzero(B_thr))))
    return out


def estimate_sigma2(x: np.ndarray, Y: np.ndarray, t: float) -> float:
    """sigma^2 estimate from MLE residuals with divisor n - tr(J^{-1} G)."""
    A_hat, B_hat = mle_fit(x, Y, t)
    model = IsochronalOdeModel(t, x, data=Y)
    beta = flatten(B_hat)
    G = model.g_matrix(beta)
    J = model.j_matrix(beta, Y)
    rss = float(((Y - A_hat @ x) ** 2).sum())
    df = float(np.trace(np.linalg.solve(J, G)))
    return rss / (model.n - df)


# ---------------------------------------------------------------------------
# Study driver
# ---------------------------------------------------------------------------
@dataclass
class SimSummary:
    config: SimConfig
    s_grid: np.ndarray
    coverage: np.ndarray  # replications contributing per grid point
    mean_true_risk: np.ndarray
    se_true_risk: np.ndarray
    mean_risk_hat: np.ndarray
    se_risk_hat: np.ndarray
    mean_risk_tilde: np.ndarray
    se_risk_tilde: np.ndarray
    mean_bias_hat: np.ndarray  # paired mean of risk_hat - true_risk
    se_bias_hat: np.ndarray
    mle_risk_mean: float
    mle_risk_se: float
    mle_ok: int
    threshold_counts: np.ndarray
    threshold_risk_mean: np.ndarray
    threshold_risk_se: np.ndarray
    stepwise_counts: np.ndarray
    stepwise_true_mean: np.ndarray
    stepwise_true_se: np.ndarray
    stepwise_hat_thm_mean: np.ndarray
    stepwise_hat_thm_se: np.ndarray
    stepwise_hat_count_mean: np.ndarray
    stepwise_hat_count_se: np.ndarray
    stepwise_bias_thm_mean: np.ndarray  # paired mean of estimate - truth
    stepwise_bias_thm_se: np.ndarray
    selected_s_mean: float
    selected_true_risk_mean: float
    selected_true_risk_se: float
    selected_risk_hat_mean: float
    selected_risk_hat_se: float
    accuracy_mean: float
    accuracy_se: float
    n_replications: int
    failures: list[str]
    div_failures: int
    replication_rows: list[tuple]


def _interp_to_grid(s_knots: np.ndarray, values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Linear interpolation with NaN outside the covered range and at NaN knots."""
    ok = np.isfinite(values) & np.isfinite(s_knots)
    if ok.sum() < 2:
        return np.full(grid.shape, np.nan)
    s, v = s_knots[ok], values[ok]
    order = np.argsort(s, kind="stable")
    s, v = s[order], v[order]
    out = np.interp(grid, s, v)
    out[(grid < s[0] - 1e-12) | (grid > s[-1] + 1e-12)] = np.nan
    return out


def _run_replication(config: SimConfig, rep: int) -> dict:
    x, Y = generate_replication(config, rep)
    model = IsochronalOdeModel(config.t, x, data=Y)
    xi = (expm(config.t * config.B_true) @ x).ravel(order=FLATTEN_ORDER)
    n = config.n
    sigma2 = config.sigma2
    out: dict = {"rep": rep}

    mle_risk = np.nan
    B_hat = None
    try:
        A_hat, B_hat = mle_fit(x, Y, config.t)
        mle_risk = float(((xi - (A_hat @ x).ravel(order=FLATTEN_ORDER)) ** 2).sum())
    except (np.linalg.LinAlgError, LogmDomainError) as exc:
        try:  # the plug-in mean A_hat x does not need the logarithm
            xxT = x @ x.T
            A_hat = np.linalg.solve(xxT, x @ Y.T).T
            mle_risk = float(((xi - (A_hat @ x).ravel(order=FLATTEN_ORDER)) ** 2).sum())
        except np.linalg.LinAlgError:
            pass
        if config.weight_mode == "adaptive":
            raise RuntimeError(f"adaptive weights unavailable: {exc}") from exc
    out["mle_risk"] = mle_risk

    if config.weight_mode == "adaptive":
        omega = adaptive_weights(B_hat)
    else:
        omega = np.ones(config.p)

    lam_top = lambda_max(model, Y, omega)
    grid = default_lambda_grid(lam_top, config.lambda_grid_size, config.lambda_min_ratio)
    path = lambda_path(model, Y, omega, grid, config=config.solver)

    div_failures = 0
    rows = []
    s_knots, true_curve, hat_curve, tilde_curve = [], [], [], []
    for fit in path:
        act = fit.active_set
        if act.size == 0:
            div = 0.0
        else:
            try:
                G_aa = model.g_matrix(fit.beta, coords=act)
                J_aa = model.j_matrix(fit.beta, Y, coords=act)
                div = div_l1_constrained(G_aa, J_aa, fit.gamma[act], np.arange(act.size))
            except PreconditionError:
                div_failures += 1
                div = np.nan
        true_risk = float(((xi - model.eval(fit.beta)) ** 2).sum())
        risk_hat = fit.rss - n * sigma2 + 2.0 * sigma2 * div
        risk_tilde = fit.rss - n * sigma2 + 2.0 * sigma2 * max(act.size - 1, 0)
        s_knots.append(fit.s)
        true_curve.append(true_risk)
        hat_curve.append(risk_hat)
        tilde_curve.append(risk_tilde)
        rows.append(
            (rep, fit.lam, fit.s, fit.rss, div, risk_hat, risk_tilde, true_risk, act.size)
        )
    s_knots = np.array(s_knots)
    true_curve = np.array(true_curve)
    hat_curve = np.array(hat_curve)
    tilde_curve = np.array(tilde_curve)

    out["rows"] = rows
    out["div_failures"] = div_failures
    out["true_grid"] = _interp_to_grid(s_knots, true_curve, config.s_grid)
    out["hat_grid"] = _interp_to_grid(s_knots, hat_curve, config.s_grid)
    out["tilde_grid"] = _interp_to_grid(s_knots, tilde_curve, config.s_grid)

    finite = np.isfinite(hat_curve)
    best = int(np.argmin(np.where(finite, hat_curve, np.inf)))
    out["selected_s"] = float(s_knots[best])
    out["selected_true_risk"] = float(true_curve[best])
    out["selected_risk_hat"] = float(hat_curve[best])
    pattern_hat = path[best].beta != 0.0
    pattern_true = flatten(config.B_true) != 0.0
    out["accuracy"] = float(np.mean(pattern_hat == pattern_true))

    if B_hat is not None:
        offdiag = np.abs(B_hat[~np.eye(config.d, dtype=bool)])
        levels = np.concatenate([[np.inf], np.sort(offdiag)[::-1]])
        thr_risks = []
        for B_thr, _count in threshold_curve(B_hat, levels, exempt_diagonal=True):
            mean_thr = (expm(config.t * B_thr) @ x).ravel(order=FLATTEN_ORDER)
            thr_risks.append(float(((xi - mean_thr) ** 2).sum()))
        out["threshold_risk"] = np.array(thr_risks)  # counts d, d+1, ..., d^2
    else:
        out["threshold_risk"] = np.full(config.p - config.d + 1, np.nan)

    max_nz = config.stepwise_max_nonzero or config.p
    states = forward_stepwise(model, Y, max_nz, config=config.stepwise_solver)
    sw_true, sw_thm, sw_cnt = [], [], []
    for st in states:
        df_thm, df_cnt, _fallback = search_df(st, model, Y)
        sw_true.append(float(((xi - model.eval(st.fit.beta)) ** 2).sum()))
        sw_thm.append(st.rss - n * sigma2 + 2.0 * sigma2 * df_thm)
        sw_cnt.append(st.rss - n * sigma2 + 2.0 * sigma2 * df_cnt)
    out["stepwise_true"] = np.array(sw_true)
    out["stepwise_hat_thm"] = np.array(sw_thm)
    out["stepwise_hat_count"] = np.array(sw_cnt)
    return out


def _worker(args) -> dict:
    config, rep = args
    try:
        return _run_replication(config, rep)
    except Exception as exc:  # noqa: BLE001 - per-replication failures are data
        return {"rep": rep, "error": f"{type(exc).__name__}: {exc}"}


def _mean_se(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column-wise nan-aware mean, standard error, and count."""
    arr = np.asarray(arr, dtype=float)
    count = np.sum(np.isfinite(arr), axis=0)
    with np.errstate(invalid="ignore"), warnings.catch_warnings():
        # all-NaN or single-value columns legitimately produce NaN summaries
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(arr, axis=0)
        sd = np.nanstd(arr, axis=0, ddof=1)
    se = np.where(count > 1, sd / np.sqrt(np.maximum(count, 1)), np.nan)
    return mean, se, count


def run_study(config: SimConfig) -> SimSummary:
    """Run all replications and aggregate; fails if more than 5% of them error."""
    tasks = [(config, rep) for rep in range(config.replications)]
    if config.threads > 1:
        with ProcessPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(_worker, tasks))
    else:
        results = [_worker(t) for t in tasks]
    results.sort(key=lambda r: r["rep"])

    failures = [f"rep {r['rep']}: {r['error']}" for r in results if "error" in r]
    good = [r for r in results if "error" not in r]
    if len(failures) > 0.05 * config.replications:
        raise RuntimeError(
            f"{len(failures)}/{config.replications} replications failed: {failures[:5]}"
        )

    true_grid = np.vstack([r["true_grid"] for r in good])
    hat_grid = np.vstack([r["hat_grid"] for r in good])
    tilde_grid = np.vstack([r["tilde_grid"] for r in good])
    mean_true, se_true, cover = _mean_se(true_grid)
    mean_hat, se_hat, _ = _mean_se(hat_grid)
    mean_tilde, se_tilde, _ = _mean_se(tilde_grid)
    mean_bias, se_bias, _ = _mean_se(hat_grid - true_grid)

    mle = np.array([r["mle_risk"] for r in good])
    mle_mean, mle_se, mle_count = _mean_se(mle[:, None])

    thr = np.vstack([r["threshold_risk"] for r in good])
    thr_mean, thr_se, _ = _mean_se(thr)

    sw_len = max(len(r["stepwise_true"]) for r in good)

    def pad(v: np.ndarray) -> np.ndarray:
        return np.pad(v, (0, sw_len - len(v)), constant_values=np.nan)

    sw_true = np.vstack([pad(r["stepwise_true"]) for r in good])
    sw_thm = np.vstack([pad(r["stepwise_hat_thm"]) for r in good])
    sw_cnt = np.vstack([pad(r["stepwise_hat_count"]) for r in good])
    sw_true_m, sw_true_se, _ = _mean_se(sw_true)
    sw_thm_m, sw_thm_se, _ = _mean_se(sw_thm)
    sw_cnt_m, sw_cnt_se, _ = _mean_se(sw_cnt)
    sw_bias_m, sw_bias_se, _ = _mean_se(sw_thm - sw_true)

    sel_true = np.array([r["selected_true_risk"] for r in good])
    sel_hat = np.array([r["selected_risk_hat"] for r in good])
    acc = np.array([r["accuracy"] for r in good])
    sel_true_m, sel_true_se, _ = _mean_se(sel_true[:, None])
    sel_hat_m, sel_hat_se, _ = _mean_se(sel_hat[:, None])
    acc_m, acc_se, _ = _mean_se(acc[:, None])

    rows = [row for r in good for row in r["rows"]]

    return SimSummary(
        config=config,
        s_grid=config.s_grid,
        coverage=cover,
        mean_true_risk=mean_true,
        se_true_risk=se_true,
        mean_risk_hat=mean_hat,
        se_risk_hat=se_hat,
        mean_risk_tilde=mean_tilde,
        se_risk_tilde=se_tilde,
        mean_bias_hat=mean_bias,
        se_bias_hat=se_bias,
        mle_risk_mean=float(mle_mean[0]),
        mle_risk_se=float(mle_se[0]),
        mle_ok=int(mle_count[0]),
        threshold_counts=np.arange(config.d, config.p + 1),
        threshold_risk_mean=thr_mean,
        threshold_risk_se=thr_se,
        stepwise_counts=np.arange(config.d, config.d + sw_len),
        stepwise_true_mean=sw_true_m,
        stepwise_true_se=sw_true_se,
        stepwise_hat_thm_mean=sw_thm_m,
        stepwise_hat_thm_se=sw_thm_se,
        stepwise_hat_count_mean=sw_cnt_m,
        stepwise_hat_count_se=sw_cnt_se,
        stepwise_bias_thm_mean=sw_bias_m,
        stepwise_bias_thm_se=sw_bias_se,
        selected_s_mean=float(np.mean([r["selected_s"] for r in good])),
        selected_true_risk_mean=float(sel_true_m[0]),
        selected_true_risk_se=float(sel_true_se[0]),
        selected_risk_hat_mean=float(sel_hat_m[0]),
        selected_risk_hat_se=float(sel_hat_se[0]),
        accuracy_mean=float(acc_m[0]),
        accuracy_se=float(acc_se[0]),
        n_replications=len(good),
        failures=failures,
        div_failures=sum(r["div_failures"] for r in good),
        replication_rows=rows,
    )


# ---------------------------------------------------------------------------
# CSV output (plot-ready; full-precision decimals, deterministic)
# ---------------------------------------------------------------------------
def _write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")


def _cell(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return fmt_float(v)


def write_replication_csv(path, summary: SimSummary) -> None:
    header = ["rep", "lambda", "s", "rss", "div_thm4", "risk_hat", "risk_tilde", "true_risk", "n_active"]
    _write_csv(path, header, summary.replication_rows)


def write_summary_csv(path, summary: SimSummary) -> None:
    header = [
        "s", "n_covered",
        "mean_true_risk", "se_true_risk",
        "mean_risk_hat", "se_risk_hat",
        "mean_risk_tilde", "se_risk_tilde",
        "mean_bias_hat", "se_bias_hat",
    ]
    rows = zip(
        summary.s_grid, summary.coverage,
        summary.mean_true_risk, summary.se_true_risk,
        summary.mean_risk_hat, summary.se_risk_hat,
        summary.mean_risk_tilde, summary.se_risk_tilde,
        summary.mean_bias_hat, summary.se_bias_hat,
    )
    _write_csv(path, header, rows)


def write_stepwise_csv(path, summary: SimSummary) -> None:
    header = [
        "n_nonzero",
        "mean_true_risk", "se_true_risk",
        "mean_risk_hat_thm", "se_risk_hat_thm",
        "mean_risk_hat_count", "se_risk_hat_count",
    ]
    rows = zip(
        summary.stepwise_counts,
        summary.stepwise_true_mean, summary.stepwise_true_se,
        summary.stepwise_hat_thm_mean, summary.stepwise_hat_thm_se,
        summary.stepwise_hat_count_mean, summary.stepwise_hat_count_se,
    )
    _write_csv(path, header, rows)


def write_threshold_csv(path, summary: SimSummary) -> None:
    header = ["n_nonzero", "mean_true_risk", "se_true_risk"]
    rows = zip(summary.threshold_counts, summary.threshold_risk_mean, summary.threshold_risk_se)
    _write_csv(path, header, rows)


def write_scalars_csv(path, summary: SimSummary) -> None:
    header = ["name", "value"]
    rows = [
        ("replications_ok", summary.n_replications),
        ("replications_failed", len(summary.failures)),
        ("div_failures", summary.div_failures),
        ("mle_risk_mean", summary.mle_risk_mean),
        ("mle_risk_se", summary.mle_risk_se),
        ("mle_ok", summary.mle_ok),
        ("selected_s_mean", summary.selected_s_mean),
        ("selected_true_risk_mean", summary.selected_true_risk_mean),
        ("selected_true_risk_se", summary.selected_true_risk_se),
        ("selected_risk_hat_mean", summary.selected_risk_hat_mean),
        ("selected_risk_hat_se", summary.selected_risk_hat_se),
        ("accuracy_mean", summary.accuracy_mean),
        ("accuracy_se", summary.accuracy_se),
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for name, value in rows:
            fh.write(f"{name},{_cell(value)}\n")
