"""Command-line interface.

Subcommands: fit, path, df, simulate, search, examples.  A JSON config file
(--config) can hold any long-option value; explicit flags win.  Exit codes:
0 ok, 2 input/config error, 3 numerical/solver failure, 4 Monte Carlo
tolerance failure in `examples`.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from .dof import (
    L2Ball,
    L2Sphere,
    PreconditionError,
    TwoAxes,
    analytic_df,
    div_l1_constrained,
    div_unconstrained,
    sure_risk,
    tic,
)
from .models import IsochronalOdeModel
from .oracle import McConfig, mc_df_pair, mc_true_risk
from .simulate import (
    SimConfig,
    desk_config,
    generate_replication,
    paper_b10,
    paper_config,
    run_study,
    write_replication_csv,
    write_scalars_csv,
    write_stepwise_csv,
    write_summary_csv,
    write_threshold_csv,
)
from .solver import SolverConfig, coordinate_descent, default_lambda_grid, lambda_max, lambda_path
from .stepwise import forward_stepwise, search_df
from .util import fmt_float, substream

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_MC_TOLERANCE = 4


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# Data files: "#shape d m" pragma, header row, one leading index column
# ---------------------------------------------------------------------------
def read_matrix_csv(path: str) -> np.ndarray:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            pragma = fh.readline().strip()
            if not pragma.startswith("#shape"):
                raise InputError(f"{path}: missing '#shape d m' pragma line")
            parts = pragma.split()
            if len(parts) != 3:
                raise InputError(f"{path}: malformed pragma {pragma!r}")
            d, m = int(parts[1]), int(parts[2])
            fh.readline()  # header row
            rows = []
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                cells = line.split(",")
                rows.append([float(c) for c in cells[1:]])
    except (OSError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from exc
    M = np.array(rows, dtype=float)
    if M.shape != (d, m):
        raise InputError(f"{path}: data shape {M.shape} does not match pragma ({d}, {m})")
    return M


def write_matrix_csv(path: str, M: np.ndarray) -> None:
    d, m = M.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#shape {d} {m}\n")
        fh.write("idx," + ",".join(f"c{j}" for j in range(m)) + "\n")
        for i in range(d):
            fh.write(f"{i}," + ",".join(fmt_float(v) for v in M[i]) + "\n")


# ---------------------------------------------------------------------------
# Config merging: JSON file values fill in unset flags; unknown keys rejected
# ---------------------------------------------------------------------------
def _merge_config(args: argparse.Namespace, parser: argparse.ArgumentParser) -> argparse.Namespace:
    if not getattr(args, "config", None):
        return args
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            file_conf = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"config {args.config}: {exc}") from exc
    if not isinstance(file_conf, dict):
        raise InputError("config file must hold a JSON object")
    known = set(vars(args))
    for key, value in file_conf.items():
        attr = key.replace("-", "_")
        if attr not in known:
            raise InputError(f"unknown config key {key!r}")
        if getattr(args, attr) is None:
            setattr(args, attr, value)
    return args


def _resolve(value, default):
    return default if value is None else value


def _load_problem(args) -> tuple[IsochronalOdeModel, np.ndarray, float]:
    """(model-with-data, Y, t) from files or the built-in simulated dataset."""
    t = float(_resolve(args.t, 1.0))
    if args.builtin:
        if args.builtin != "paper_B10":
            raise InputError(f"unknown builtin dataset {args.builtin!r} (try paper_B10)")
        seed = int(_resolve(args.seed, 0))
        cfg = paper_config(replications=1, seed=seed)
        x, Y = generate_replication(cfg, 0)
        t = cfg.t
    else:
        if not args.data or not args.init:
            raise InputError("either --builtin or both --data and --init are required")
        Y = read_matrix_csv(args.data)
        x = read_matrix_csv(args.init)
        if Y.shape != x.shape:
            raise InputError(f"data {Y.shape} and initial conditions {x.shape} differ in shape")
    return IsochronalOdeModel(t, x, data=Y), Y, t


def _weights(args, model: IsochronalOdeModel, Y: np.ndarray) -> np.ndarray:
    mode = _resolve(args.weights, "unit")
    if mode == "unit":
        return np.ones(model.p)
    if mode == "adaptive":
        from .simulate import adaptive_weights, mle_fit

        _, B_hat = mle_fit(model.x, Y, model.t)
        return adaptive_weights(B_hat)
    raise InputError(f"unknown weight mode {mode!r}")


def _fit_to_dict(model, fit, Y, sigma2) -> dict:
    act = fit.active_set
    if act.size:
        G_aa = model.g_matrix(fit.beta, coords=act)
        J_aa = model.j_matrix(fit.beta, Y, coords=act)
        try:
            div = div_l1_constrained(G_aa, J_aa, fit.gamma[act], np.arange(act.size))
        except PreconditionError:
            div = float("nan")
    else:
        div = 0.0
    risk = sure_risk(fit.rss, model.n, sigma2, div) if sigma2 > 0 else None
    return {
        "beta": fit.beta.reshape(model.d, model.d, order="F").tolist(),
        "lambda": fit.lam,
        "s": fit.s,
        "rss": fit.rss,
        "active_set": fit.active_set.tolist(),
        "n_active": int(fit.active_set.size),
        "gamma": fit.gamma.tolist(),
        "converged": fit.converged,
        "kkt_residual": fit.kkt_residual,
        "divergence": div,
        "risk_hat": None if risk is None else risk.risk_hat,
        "sigma2": sigma2,
    }


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------
def cmd_fit(args) -> int:
    model, Y, _t = _load_problem(args)
    omega = _weights(args, model, Y)
    sigma2 = float(_resolve(args.sigma2, 0.0))
    config = SolverConfig()
    if args.lam is None:
        raise InputError("--lambda is required for fit")
    lam = float(args.lam)
    lam_top = lambda_max(model, Y, omega)
    if lam < lam_top:
        # warm-start down a short path; a cold solve deep below lambda_max is slow
        grid = np.geomspace(lam_top, lam, 16)
        fit = lambda_path(model, Y, omega, grid, config=config)[-1]
    else:
        fit = coordinate_descent(model, Y, lam, omega, config=config)
    if not fit.converged:
        print("solver did not converge", file=sys.stderr)
        return EXIT_NUMERICAL
    out_dir = _resolve(args.out_dir, ".")
    os.makedirs(out_dir, exist_ok=True)
    out_path = os.path.join(out_dir, "fit.json")
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(_fit_to_dict(model, fit, Y, sigma2), fh, indent=2)
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_path(args) -> int:
    model, Y, _t = _load_problem(args)
    omega = _weights(args, model, Y)
    sigma2 = float(_resolve(args.sigma2, 0.0))
    size = int(_resolve(args.lambda_grid, 40))
    grid = default_lambda_grid(lambda_max(model, Y, omega), size)
    path = lambda_path(model, Y, omega, grid)
    out_dir = _resolve(args.out_dir, ".")
    os.makedirs(out_dir, exist_ok=True)
    out_path = os.path.join(out_dir, "path.csv")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("lambda,s,rss,n_active,divergence,risk_hat\n")
        for fit in path:
            rec = _fit_to_dict(model, fit, Y, sigma2)
            risk_hat = rec["risk_hat"] if rec["risk_hat"] is not None else float("nan")
            fh.write(
                ",".join(
                    [fmt_float(fit.lam), fmt_float(fit.s), fmt_float(fit.rss), str(fit.active_set.size), fmt_float(rec["divergence"]), fmt_float(risk_hat)]
                )
                + "\n"
            )
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_df(args) -> int:
    model, Y, _t = _load_problem(args)
    if not args.fit:
        raise InputError("--fit FIT_JSON is required for df")
    try:
        with open(args.fit, "r", encoding="utf-8") as fh:
            fit_rec = json.load(fh)
        beta = np.array(fit_rec["beta"], dtype=float).flatten(order="F")
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise InputError(f"fit file {args.fit}: {exc}") from exc
    sigma2 = float(_resolve(args.sigma2, fit_rec.get("sigma2", 0.0)))
    act = np.flatnonzero(beta)
    G = model.g_matrix(beta)
    J = model.j_matrix(beta, Y)
    report: dict = {"n_active": int(act.size)}
    try:
        report["div_unconstrained"] = div_unconstrained(G, J)
        if sigma2 > 0:
            report["tic"] = tic(float(fit_rec["rss"]), sigma2, G, J)
    except PreconditionError as exc:
        report["div_unconstrained_error"] = str(exc)
    if act.size:
        gamma = np.array(fit_rec["gamma"], dtype=float)
        try:
            report["div_l1_constrained"] = div_l1_constrained(G, J, gamma, act)
        except PreconditionError as exc:
            report["div_l1_constrained_error"] = str(exc)
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_simulate(args) -> int:
    seed = int(_resolve(args.seed, 20240901))
    reps = args.replications
    overrides = {
        "seed": seed,
        "weight_mode": _resolve(args.weights, "unit"),
        "threads": int(_resolve(args.threads, os.cpu_count() or 1)),
        "lambda_grid_size": int(_resolve(args.lambda_grid, 40)),
    }
    if args.sigma2 is not None:
        overrides["sigma2"] = float(args.sigma2)
    if args.paper_scale:
        cfg = paper_config(replications=int(_resolve(reps, 1000)), **overrides)
    else:
        cfg = desk_config(replications=int(_resolve(reps, 200)), **overrides)
    summary = run_study(cfg)
    out_dir = _resolve(args.out_dir, ".")
    os.makedirs(out_dir, exist_ok=True)
    write_replication_csv(os.path.join(out_dir, "replications.csv"), summary)
    write_summary_csv(os.path.join(out_dir, "summary.csv"), summary)
    write_stepwise_csv(os.path.join(out_dir, "stepwise.csv"), summary)
    write_threshold_csv(os.path.join(out_dir, "threshold.csv"), summary)
    write_scalars_csv(os.path.join(out_dir, "scalars.csv"), summary)
    print(
        f"{summary.n_replications} replications ok, {len(summary.failures)} failed; "
        f"outputs in {out_dir}"
    )
    return EXIT_OK


def cmd_search(args) -> int:
    model, Y, _t = _load_problem(args)
    sigma2 = float(_resolve(args.sigma2, 0.0))
    max_nz = int(_resolve(args.max_nonzero, model.p))
    states = forward_stepwise(model, Y, max_nz)
    out_dir = _resolve(args.out_dir, ".")
    os.makedirs(out_dir, exist_ok=True)
    out_path = os.path.join(out_dir, "search.csv")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("step,added,n_nonzero,rss,df_thm3,df_count,risk_hat_thm3,risk_hat_count\n")
        for step, st in enumerate(states):
            df_thm, df_cnt, _flag = search_df(st, model, Y)
            hat_thm = st.rss - model.n * sigma2 + 2 * sigma2 * df_thm
            hat_cnt = st.rss - model.n * sigma2 + 2 * sigma2 * df_cnt
            added = "" if st.added is None else str(st.added)
            fh.write(
                f"{step},{added},{st.pattern.size},{fmt_float(st.rss)},"
                f"{fmt_float(df_thm)},{fmt_float(df_cnt)},{fmt_float(hat_thm)},{fmt_float(hat_cnt)}\n"
            )
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_examples(args) -> int:
    reps = int(_resolve(args.replications, 2_000_000))
    seed = int(_resolve(args.seed, 42))
    checks: list[tuple[str, float, float, float, float]] = []

    cfg2 = McConfig(replications=reps, seed=seed, sigma2=1.0, xi=np.zeros(2))
    df, dfs, gap = mc_df_pair(TwoAxes(), cfg2)
    target_df, target_dfs = analytic_df(TwoAxes())
    checks.append(("two_axes df", df.estimate, df.se, target_df, 0.005))
    checks.append(("two_axes df_S", dfs.estimate, dfs.se, target_dfs, 0.002))
    checks.append(("two_axes nu-mass", gap.estimate, gap.se, 2.0 / math.pi, 0.005))

    cfg1 = McConfig(replications=max(reps // 4, 2), seed=seed, sigma2=1.0, xi=np.zeros(1))
    df1, dfs1, _ = mc_df_pair(L2Sphere(1), cfg1)
    t_df1, t_dfs1 = analytic_df(L2Sphere(1))
    checks.append(("sphere n=1 df", df1.estimate, df1.se, t_df1, 3 * df1.se))
    checks.append(("sphere n=1 df_S", dfs1.estimate, dfs1.se, t_dfs1, 1e-12))

    cfg3 = McConfig(replications=max(reps // 4, 2), seed=seed, sigma2=1.0, xi=np.zeros(3))
    df3, dfs3, gap3 = mc_df_pair(L2Sphere(3), cfg3)
    t_df3, _ = analytic_df(L2Sphere(3))
    checks.append(("sphere n=3 df", df3.estimate, df3.se, t_df3, 3 * df3.se))
    checks.append(("sphere n=3 df-df_S", gap3.estimate, gap3.se, 0.0, 3 * gap3.se))
    risk3 = mc_true_risk(L2Sphere(3), cfg3)
    checks.append(("sphere n=3 risk", risk3.estimate, risk3.se, 1.0, 3 * risk3.se + 1e-9))

    for sigma2 in (0.25, 1.0):
        cfgb = McConfig(replications=max(reps // 4, 2), seed=seed, sigma2=sigma2, xi=np.zeros(3))
        ball = L2Ball(1.0, 3)
        dfb, dfsb, gapb = mc_df_pair(ball, cfgb)
        target = ball.df(sigma2)
        checks.append((f"ball s=1 sig2={sigma2} df", dfb.estimate, dfb.se, target, 3 * dfb.se))
        checks.append(
            (f"ball s=1 sig2={sigma2} df-df_S", gapb.estimate, gapb.se, 0.0, 3 * gapb.se)
        )

    all_ok = True
    print(f"{'check':34s} {'estimate':>12s} {'se':>10s} {'target':>12s} {'tol':>10s}  result")
    for name, est, se, target, tol in checks:
        ok = abs(est - target) <= tol
        all_ok &= ok
        print(
            f"{name:34s} {est:12.6f} {se:10.2e} {target:12.6f} {tol:10.2e}  "
            + ("PASS" if ok else "FAIL")
        )
    return EXIT_OK if all_ok else EXIT_MC_TOLERANCE


# ---------------------------------------------------------------------------
def _add_common(sub: argparse.ArgumentParser, data: bool = True) -> None:
    sub.add_argument("--config", help="JSON config file; explicit flags win")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--threads", type=int, default=None)
    sub.add_argument("--out-dir", dest="out_dir", default=None)
    sub.add_argument("--sigma2", type=float, default=None)
    if data:
        sub.add_argument("--data", help="observations CSV (#shape pragma format)")
        sub.add_argument("--init", help="initial-conditions CSV, same shape")
        sub.add_argument("--builtin", help="named built-in dataset (paper_B10)")
        sub.add_argument("--t", type=float, default=None, help="sampling time (default 1)")
        sub.add_argument("--weights", choices=["unit", "adaptive"], default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparseode", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p_fit = subs.add_parser("fit", help="one penalized fit, written as fit.json")
    _add_common(p_fit)
    p_fit.add_argument("--lambda", dest="lam", type=float, default=None)
    p_fit.set_defaults(func=cmd_fit)

    p_path = subs.add_parser("path", help="lambda path CSV")
    _add_common(p_path)
    p_path.add_argument("--lambda-grid", dest="lambda_grid", type=int, default=None)
    p_path.set_defaults(func=cmd_path)

    p_df = subs.add_parser("df", help="divergence/df report for a stored fit")
    _add_common(p_df)
    p_df.add_argument("--fit", help="fit.json produced by the fit subcommand")
    p_df.set_defaults(func=cmd_df)

    p_sim = subs.add_parser("simulate", help="run the simulation study, emit CSVs")
    _add_common(p_sim, data=False)
    p_sim.add_argument("--weights", choices=["unit", "adaptive"], default=None)
    p_sim.add_argument("--replications", type=int, default=None)
    p_sim.add_argument("--lambda-grid", dest="lambda_grid", type=int, default=None)
    p_sim.add_argument("--paper-scale", action="store_true", help="full d=10, m=15 configuration")
    p_sim.set_defaults(func=cmd_simulate)

    p_search = subs.add_parser("search", help="forward stepwise trajectory CSV")
    _add_common(p_search)
    p_search.add_argument("--max-nonzero", dest="max_nonzero", type=int, default=None)
    p_search.set_defaults(func=cmd_search)

    p_ex = subs.add_parser("examples", help="closed-form projection examples vs Monte Carlo")
    _add_common(p_ex, data=False)
    p_ex.add_argument("--replications", type=int, default=None)
    p_ex.set_defaults(func=cmd_examples)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _merge_config(args, parser)
        return args.func(args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (np.linalg.LinAlgError, PreconditionError, RuntimeError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
