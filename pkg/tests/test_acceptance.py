"""Acceptance suite: one test per release criterion, at pinned tolerances.

Run with `pytest tests/test_acceptance.py -v -s` to see one PASS line per
criterion.  The simulation-study criterion runs the full desk-scale study
(R = 200) and dominates the runtime (minutes, single-core).
"""

import math
import time

import numpy as np
import pytest

from sparseode.dof import (
    L2Ball,
    L2Sphere,
    TwoAxes,
    analytic_df,
    div_l1_constrained,
    div_unconstrained,
)
from sparseode.expm import expm, expm_frechet, expm_second, logm_principal
from sparseode.models import IsochronalOdeModel, LinearModel
from sparseode.oracle import (
    BranchSwitchError,
    McConfig,
    OracleError,
    fd_divergence,
    fixed_branch_map,
    gauss_newton,
    mc_df_pair,
    mc_true_risk,
)
from sparseode.simulate import (
    desk_config,
    generate_replication,
    mle_fit,
    paper_b10,
    paper_config,
    run_study,
    write_replication_csv,
    write_scalars_csv,
    write_stepwise_csv,
    write_summary_csv,
    write_threshold_csv,
)
from sparseode.solver import (
    SolverConfig,
    coordinate_descent,
    default_lambda_grid,
    kkt_check,
    lambda_max,
    lambda_path,
)
from sparseode.util import flatten


def report(name: str, detail: str) -> None:
    print(f"\nACCEPTANCE {name}: PASS  ({detail})")


# ---------------------------------------------------------------------------
# 1. Two-axes reproduction: df = 1 + 2/pi, df_S = 1, singular mass 2/pi
# ---------------------------------------------------------------------------
def test_criterion_1_two_axes():
    start = time.perf_counter()
    config = McConfig(replications=2_000_000, seed=42, sigma2=1.0, xi=np.zeros(2))
    df, dfs, gap = mc_df_pair(TwoAxes(), config)
    target_df, target_dfs = analytic_df(TwoAxes())
    assert abs(df.estimate - 1.6366) <= 0.005
    assert abs(df.estimate - target_df) <= 0.005
    assert abs(dfs.estimate - 1.000) <= 0.002
    assert abs(gap.estimate - 2.0 / math.pi) <= 0.005
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0
    report(
        "1 (two-axes df)",
        f"df={df.estimate:.4f} (target 1.6366), df_S={dfs.estimate:.4f}, "
        f"gap={gap.estimate:.4f} (target {2/math.pi:.4f}), {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 2. Sphere reproduction: n=1 closed forms; n=2+ has a null singular measure
# ---------------------------------------------------------------------------
def test_criterion_2_sphere():
    c1 = McConfig(replications=500_000, seed=43, sigma2=1.0, xi=np.zeros(1))
    df1, dfs1, _ = mc_df_pair(L2Sphere(1), c1)
    target1, _ = analytic_df(L2Sphere(1))
    assert abs(df1.estimate - target1) <= 3 * df1.se
    assert dfs1.estimate == 0.0 and dfs1.se == 0.0

    c3 = McConfig(replications=500_000, seed=44, sigma2=1.0, xi=np.zeros(3))
    df3, dfs3, _ = mc_df_pair(L2Sphere(3), c3)
    combined = math.hypot(df3.se, dfs3.se)
    assert abs(df3.estimate - dfs3.estimate) <= 3 * combined

    risk = mc_true_risk(L2Sphere(3), c3)
    # per-draw loss is identically 1: the tiny absolute allowance covers
    # double-rounding of ||y/||y|| ||^2, not Monte Carlo error
    assert abs(risk.estimate - 1.000) <= 3 * risk.se + 1e-9
    report(
        "2 (sphere df)",
        f"n=1 df={df1.estimate:.4f} (target {target1:.4f}), df_S=0 exactly; "
        f"n=3 |df-df_S|={abs(df3.estimate-dfs3.estimate):.2e}; risk={risk.estimate:.6f}",
    )


# ---------------------------------------------------------------------------
# 3. Convex unbiasedness on the l2-ball across noise levels
# ---------------------------------------------------------------------------
def test_criterion_3_ball_convex_unbiasedness():
    details = []
    for sigma2, seed in ((0.25, 45), (1.0, 46)):
        config = McConfig(replications=500_000, seed=seed, sigma2=sigma2, xi=np.zeros(3))
        df, dfs, _ = mc_df_pair(L2Ball(1.0, 3), config)
        combined = math.hypot(df.se, dfs.se)
        assert abs(df.estimate - dfs.estimate) <= 3 * combined
        exact = L2Ball(1.0, 3).df(sigma2)
        assert abs(df.estimate - exact) <= 3 * df.se
        details.append(f"sigma2={sigma2}: df={df.estimate:.4f} vs E[div]={dfs.estimate:.4f}")
    report("3 (ball unbiasedness)", "; ".join(details))


# ---------------------------------------------------------------------------
# Shared small-ODE problem for the divergence cross-checks
# ---------------------------------------------------------------------------
def _ode_problem(seed: int, sigma: float = 0.2):
    r = np.random.default_rng(seed)
    d, m, t = 3, 4, 0.5
    B_true = paper_b10()[:3, :3]
    x = r.standard_normal((d, m)) * 2.0
    y = expm(t * B_true) @ x + sigma * r.standard_normal((d, m))
    return IsochronalOdeModel(t, x, data=y), y


def test_criterion_4_theorem3_crosscheck():
    start = time.perf_counter()
    worst = 0.0
    for seed in range(10):
        model, y = _ode_problem(seed)
        _, B0 = mle_fit(model.x, model.y, model.t)
        beta_hat, ok = gauss_newton(model, y, flatten(B0))
        assert ok
        G = model.g_matrix(beta_hat)
        J = model.j_matrix(beta_hat, y)
        want = div_unconstrained(G, J)

        def fitted(z, model=model, beta_hat=beta_hat):
            beta, ok = gauss_newton(model, z, beta_hat)
            if not ok:
                raise OracleError("refit did not converge")
            return model.eval(beta)

        got = fd_divergence(fitted, y.ravel(order="F"))
        rel = abs(got - want) / abs(want)
        worst = max(worst, rel)
        assert rel < 1e-3
    elapsed = time.perf_counter() - start
    assert elapsed < 120.0
    report("4 (Theorem 3 vs FD)", f"10 draws, worst relative error {worst:.2e}, {elapsed:.1f}s")


def test_criterion_5_theorem4_crosscheck():
    model, y = _ode_problem(1234, sigma=0.25)
    omega = np.ones(model.p)
    lam_top = lambda_max(model, y, omega)
    grid = default_lambda_grid(lam_top, 25)
    config = SolverConfig(max_sweeps=2000, tol_rel=1e-12)
    path = lambda_path(model, y, omega, grid, config=config)

    checked = 0
    worst = 0.0
    for fit in path:
        if checked == 3:
            break
        act = fit.active_set
        if act.size < 2 or act.size == model.p or not fit.converged:
            continue
        audit = kkt_check(model, fit, y)
        if not audit.second_order_ok:
            continue
        G = model.g_matrix(fit.beta, coords=act)
        J = model.j_matrix(fit.beta, y, coords=act)
        want = div_l1_constrained(G, J, fit.gamma[act], np.arange(act.size))
        try:
            got = fd_divergence(fixed_branch_map(model, fit), y.ravel(order="F"))
        except BranchSwitchError:
            continue  # active set unstable at this knot; use the next one
        rel = abs(got - want) / abs(want)
        worst = max(worst, rel)
        assert rel < 1e-2
        checked += 1
    assert checked == 3

    # locally linear case: the formula collapses to |A| - 1 exactly
    r = np.random.default_rng(5)
    X = r.standard_normal((12, 5))
    yl = r.standard_normal(12)
    lm = LinearModel(X)
    fitl = coordinate_descent(lm, yl, 0.4, np.ones(5), config=SolverConfig(tol_rel=1e-14, max_sweeps=5000, kkt_tol=1e-9))
    actl = fitl.active_set
    Gl = lm.g_matrix(fitl.beta, coords=actl)
    val = div_l1_constrained(Gl, Gl, fitl.gamma[actl], np.arange(actl.size))
    assert abs(val - (actl.size - 1)) < 1e-8
    report(
        "5 (Theorem 4 vs FD)",
        f"3 stable path points, worst relative error {worst:.2e}; "
        f"linear case gives |A|-1 = {actl.size - 1} exactly",
    )


# ---------------------------------------------------------------------------
# 6. Matrix-exponential derivative suite, 100 random instances per check
# ---------------------------------------------------------------------------
def test_criterion_6_expm_derivatives():
    worst_f = worst_s = worst_b = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        d = int(r.integers(2, 5))
        A = r.standard_normal((d, d))
        F = r.standard_normal((d, d))

        _, L = expm_frechet(A, F)
        h = 1e-5
        fd = (expm(A + h * F) - expm(A - h * F)) / (2 * h)
        rel = np.abs(L - fd).max() / np.abs(fd).max()
        worst_f = max(worst_f, rel)
        assert rel < 1e-6

        G = r.standard_normal((d, d))
        h2 = 1e-3
        second = expm_second(A, F, G) + expm_second(A, G, F)
        fd2 = (
            expm(A + h2 * (F + G))
            - expm(A + h2 * (F - G))
            - expm(A - h2 * (F - G))
            + expm(A - h2 * (F + G))
        ) / (4 * h2**2)
        rel2 = np.abs(second - fd2).max() / np.abs(fd2).max()
        worst_s = max(worst_s, rel2)
        assert rel2 < 1e-4

        scale = 0.8 / max(1.0, np.abs(A).sum(axis=0).max())
        As = A * scale
        M = np.zeros((2 * d, 2 * d))
        M[:d, :d] = As
        M[:d, d:] = F
        M[d:, d:] = As
        big = expm(M)
        E = expm(As)
        block_err = max(np.abs(big[:d, :d] - E).max(), np.abs(big[d:, d:] - E).max())
        worst_b = max(worst_b, block_err)
        assert block_err < 1e-12

    B = paper_b10()
    roundtrip = np.abs(logm_principal(expm(B)) - B).max()
    assert roundtrip < 1e-8
    report(
        "6 (expm derivatives)",
        f"worst Frechet {worst_f:.1e}, second {worst_s:.1e}, block {worst_b:.1e}, "
        f"logm roundtrip {roundtrip:.1e}",
    )


# ---------------------------------------------------------------------------
# 7. Desk-scale simulation study + paper-scale smoke run
# ---------------------------------------------------------------------------
def test_criterion_7_simulation_study(tmp_path):
    start = time.perf_counter()
    cfg = desk_config()
    summary = run_study(cfg)
    study_minutes = (time.perf_counter() - start) / 60.0

    assert summary.n_replications == 200
    assert not summary.failures

    covered = summary.coverage == summary.n_replications
    assert covered.sum() >= 30  # the grid is mostly inside every path's range
    z = np.abs(summary.mean_bias_hat[covered]) / summary.se_bias_hat[covered]
    assert np.all(z <= 3.0), f"risk_hat bias beyond 3 SE: max z = {np.nanmax(z):.2f}"

    true_support = int(np.count_nonzero(cfg.B_true))  # 10 for the 4x4 block
    idx = int(np.where(summary.stepwise_counts == true_support)[0][0])
    gap = summary.stepwise_bias_thm_mean[idx]
    gse = summary.stepwise_bias_thm_se[idx]
    assert gap < -3.0 * gse, f"stepwise estimate not below truth: {gap:.3f} +- {gse:.3f}"

    # paper-scale smoke: single replication must complete and emit sound CSV
    smoke = run_study(paper_config(replications=1, seed=11))
    write_replication_csv(tmp_path / "replications.csv", smoke)
    write_summary_csv(tmp_path / "summary.csv", smoke)
    write_stepwise_csv(tmp_path / "stepwise.csv", smoke)
    write_threshold_csv(tmp_path / "threshold.csv", smoke)
    write_scalars_csv(tmp_path / "scalars.csv", smoke)
    rep_lines = (tmp_path / "replications.csv").read_text().splitlines()
    assert len(rep_lines) == 1 + 40
    assert all(len(line.split(",")) == 9 for line in rep_lines)
    for name in ("summary.csv", "stepwise.csv", "threshold.csv", "scalars.csv"):
        assert (tmp_path / name).stat().st_size > 0

    report(
        "7 (simulation study)",
        f"R=200 d=4: max |bias z| = {z.max():.2f} over {int(covered.sum())} grid points; "
        f"stepwise bias at support size {true_support}: {gap:.2f} +- {gse:.2f} "
        f"(z = {gap/gse:.1f}); study {study_minutes:.1f} min (1 core; "
        f"replications parallelize); paper-scale smoke CSV ok",
    )


# ---------------------------------------------------------------------------
# 8. Solver correctness: closed-form path, monotone objective, KKT certificates
# ---------------------------------------------------------------------------
def test_criterion_8_solver():
    r = np.random.default_rng(88)
    X = np.linalg.qr(r.standard_normal((40, 8)))[0]
    y = r.standard_normal(40) * 2.0
    z = X.T @ y
    lm = LinearModel(X)
    grid = default_lambda_grid(np.abs(z).max(), 30)
    path = lambda_path(lm, y, np.ones(8), grid)
    worst_path = 0.0
    for fit in path:
        err = np.abs(fit.beta - np.sign(z) * np.maximum(np.abs(z) - fit.lam, 0.0)).max()
        worst_path = max(worst_path, err)
    assert worst_path < 1e-6

    # objective audit: at least 1e4 accepted steps, never increasing
    total_steps = 0
    config = SolverConfig(audit_objective=True)
    for seed in range(6):
        rr = np.random.default_rng(seed)
        d, m, t = 4, 6, 1.0
        B_true = np.diag([-1.0, -0.9, -0.8, -0.7])
        B_true[0, 1] = 0.8
        x = rr.standard_normal((d, m)) * 3.0
        yy = expm(t * B_true) @ x + 0.5 * rr.standard_normal((d, m))
        model = IsochronalOdeModel(t, x, data=yy)
        omega = np.ones(model.p)
        beta = None
        for lam in default_lambda_grid(lambda_max(model, yy, omega), 15):
            fit = coordinate_descent(model, yy, lam, omega, beta_init=beta, config=config)
            trace = np.array(fit.objective_trace)
            assert np.all(np.diff(trace) <= 0.0)
            total_steps += len(trace) - 1
            assert fit.converged
            assert fit.kkt_residual < 1e-6
            audit = kkt_check(model, fit, yy)
            assert audit.residual < 1.5e-6  # re-extracted multiplier
            beta = fit.beta
    assert total_steps >= 10_000
    report(
        "8 (solver)",
        f"orthonormal path max error {worst_path:.1e}; {total_steps} audited steps "
        f"monotone; all converged fits certify KKT < 1e-6",
    )


# ---------------------------------------------------------------------------
# 9. Sufficient statistics match direct evaluation
# ---------------------------------------------------------------------------
def test_criterion_9_sufficient_statistics():
    worst_loss = worst_grad = 0.0
    for seed in range(50):
        r = np.random.default_rng(seed)
        d = int(r.integers(2, 5))
        m = int(r.integers(d, d + 4))
        t = float(r.uniform(0.3, 1.2))
        x = r.standard_normal((d, m)) * 2.0
        y = r.standard_normal((d, m)) * 2.0
        model = IsochronalOdeModel(t, x, data=y)
        beta = flatten(r.standard_normal((d, d)) * 0.6)

        loss, grad = model.loss_and_gradient(beta)
        resid = y.ravel(order="F") - model.eval(beta)
        direct_loss = float(resid @ resid)
        rel_loss = abs(loss - direct_loss) / max(direct_loss, 1e-300)
        worst_loss = max(worst_loss, rel_loss)
        assert rel_loss < 1e-10

        direct_grad = -model.jacobian(beta).T @ resid
        rel_grad = np.abs(grad - direct_grad).max() / max(np.abs(direct_grad).max(), 1e-300)
        worst_grad = max(worst_grad, rel_grad)
        assert rel_grad < 1e-6
    report(
        "9 (sufficient statistics)",
        f"50 draws: worst loss deviation {worst_loss:.1e} (tol 1e-10), "
        f"worst gradient deviation {worst_grad:.1e} (tol 1e-6)",
    )
