"""Mean-value parametrizations: residuals, Jacobians, and the G/J matrices.

A parametrization maps a p-vector of parameters to an n-vector of fitted
means.  Beyond evaluation and the Jacobian, models expose the two p x p
matrices used by the divergence formulas:

    G_kl = sum_i d_k zeta_i d_l zeta_i          (Gram matrix of the Jacobian)
    J_kl = G_kl - sum_i (y_i - zeta_i) d_k d_l zeta_i

For the linear-ODE models the parameter is a d x d matrix B flattened by
stacking columns, the mean is e^{tB} x, and everything is assembled from
directional derivatives of the matrix exponential.  The isochronal model
(one common sampling time) additionally carries the three d x d cross
products y y^T, x y^T, x x^T of the attached data, which make the loss and
gradient cost independent of the number of observation columns.
"""

from __future__ import annotations

import numpy as np

from .expm import _expm_core, expm, expm_frechet, frechet_stack, second_stack
from .util import FLATTEN_ORDER, coord_rows_cols, flatten, unflatten

__all__ = ["Parametrization", "LinearModel", "IsochronalOdeModel", "MultiTimeOdeModel"]


class Parametrization:
    """Abstract mean-value model zeta: R^p -> R^n with C^2 derivative contracts."""

    p: int
    n: int

    def eval(self, beta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, beta: np.ndarray) -> np.ndarray:
        """n x p matrix of partial derivatives d_k zeta_i."""
        raise NotImplementedError

    def weighted_hessian(
        self, beta: np.ndarray, w: np.ndarray, coords: np.ndarray | None = None
    ) -> np.ndarray:
        """sum_i w_i * (Hessian of zeta_i), restricted to ``coords`` if given."""
        raise NotImplementedError

    def g_matrix(self, beta: np.ndarray, coords: np.ndarray | None = None) -> np.ndarray:
        jac = self.jacobian(beta)
        if coords is not None:
            jac = jac[:, coords]
        G = jac.T @ jac
        return 0.5 * (G + G.T)

    def j_matrix(
        self, beta: np.ndarray, y: np.ndarray, coords: np.ndarray | None = None
    ) -> np.ndarray:
        beta = self._check_beta(beta)
        y = np.asarray(y, dtype=float).ravel(order=FLATTEN_ORDER)
        if y.size != self.n:
            raise ValueError(f"y has {y.size} entries, expected {self.n}")
        residual = y - self.eval(beta)
        return self.g_matrix(beta, coords) - self.weighted_hessian(beta, residual, coords)

    def bind(self, y: np.ndarray) -> "BoundModel":
        """Attach data; the result drives the solver (loss, surrogate terms)."""
        return BoundModel(self, y)

    def _check_beta(self, beta: np.ndarray) -> np.ndarray:
        beta = np.asarray(beta, dtype=float).ravel(order=FLATTEN_ORDER)
        if beta.size != self.p:
            raise ValueError(f"beta has {beta.size} entries, expected {self.p}")
        return beta


class BoundModel:
    """A parametrization with data attached: loss and Gauss-Newton surrogate terms.

    ``surrogate(beta)`` returns (g, a) with g_k = <r, d_k zeta> and
    a_k = ||d_k zeta||^2, the two ingredients of the coordinate-wise
    penalized quadratic.  g is also the KKT gradient D zeta^T (y - zeta).
    Results are memoized on the current beta.
    """

    def __init__(self, model: Parametrization, y: np.ndarray):
        self.model = model
        self.y = np.asarray(y, dtype=float).ravel(order=FLATTEN_ORDER)
        if self.y.size != model.n:
            raise ValueError(f"y has {self.y.size} entries, expected {model.n}")
        self._key: bytes | None = None
        self._cache: tuple[np.ndarray, np.ndarray] | None = None

    def rss(self, beta: np.ndarray) -> float:
        r = self.y - self.model.eval(beta)
        return float(r @ r)

    def surrogate(self, beta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        beta = np.asarray(beta, dtype=float)
        key = beta.tobytes()
        if key != self._key:
            self._cache = self._compute_surrogate(beta)
            self._key = key
        return self._cache

    def gradient(self, beta: np.ndarray) -> np.ndarray:
        """D zeta(beta)^T (y - zeta(beta)); the KKT gradient."""
        return self.surrogate(beta)[0]

    def objective_noise(self, f_value: float) -> float:
        """Resolution of objective comparisons at the current working scale.

        Differences below this are dominated by floating-point rounding of
        the loss evaluation; line searches must not trust them.
        """
        return 256.0 * np.finfo(float).eps * max(1.0, abs(f_value))

    def loss_delta(self, beta: np.ndarray, k: int, delta: float) -> float:
        """(1/2)||y - zeta(beta + delta e_k)||^2 - (1/2)||y - zeta(beta)||^2.

        Overridden where the difference can be computed without subtracting
        two nearly equal losses; line searches on tiny steps need the extra
        resolution.
        """
        candidate = np.array(beta, dtype=float, copy=True)
        candidate[k] += delta
        return 0.5 * (self.rss(candidate) - self.rss(beta))

    def surrogate_k(self, beta: np.ndarray, k: int) -> tuple[float, float]:
        """(g_k, a_k) for one coordinate; may be cheaper than the full vectors."""
        g, a = self.surrogate(beta)
        return float(g[k]), float(a[k])

    def _compute_surrogate(self, beta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        jac = self.model.jacobian(beta)
        r = self.y - self.model.eval(beta)
        return jac.T @ r, (jac * jac).sum(axis=0)


class LinearModel(Parametrization):
    """zeta(beta) = X beta; J = G = X^T X for any data."""

    def __init__(self, X: np.ndarray):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise ValueError("design matrix must be 2-D")
        if not np.all(np.isfinite(X)):
            raise ValueError("design matrix contains non-finite entries")
        self.X = X
        self.n, self.p = X.shape

    def eval(self, beta: np.ndarray) -> np.ndarray:
        return self.X @ self._check_beta(beta)

    def jacobian(self, beta: np.ndarray) -> np.ndarray:
        return self.X

    def weighted_hessian(self, beta, w, coords=None):
        k = self.p if coords is None else len(coords)
        return np.zeros((k, k))

    def bind(self, y: np.ndarray) -> "BoundModel":
        return _LinearBound(self, y)


class _LinearBound(BoundModel):
    def loss_delta(self, beta: np.ndarray, k: int, delta: float) -> float:
        # quadratic loss: the coordinate-move difference is exactly
        # -delta g_k + (1/2) delta^2 a_k
        g, a = self.surrogate(beta)
        return -delta * float(g[k]) + 0.5 * delta * delta * float(a[k])


class _OdeBase(Parametrization):
    """Shared machinery for matrix-exponential models: coordinate unit matrices."""

    d: int

    def _unit_stack(self) -> np.ndarray:
        d = self.d
        E = np.zeros((d * d, d, d))
        rows, cols = coord_rows_cols(d)
        E[np.arange(d * d), rows, cols] = 1.0
        return E


class IsochronalOdeModel(_OdeBase):
    """zeta(B) = column-stacked e^{tB} x for a common sampling time t.

    ``data`` (d x m observations, same layout as x) may be attached at
    construction or via ``with_data``; attaching caches the cross products
    y y^T, x y^T, x x^T, after which loss/gradient evaluation no longer
    scales with m.  Instances are immutable.
    """

    def __init__(self, t: float, x: np.ndarray, data: np.ndarray | None = None):
        if t <= 0:
            raise ValueError("sampling time t must be positive")
        x = np.asarray(x, dtype=float)
        if x.ndim != 2:
            raise ValueError("initial conditions x must be d x m")
        self.t = float(t)
        self.x = x
        self.d, self.m = x.shape
        self.p = self.d * self.d
        self.n = self.d * self.m
        self._E = self._unit_stack()
        self._rows, self._cols = coord_rows_cols(self.d)
        self.xxT = x @ x.T
        self.y = None
        self.yyT = None
        self.xyT = None
        if data is not None:
            y = np.asarray(data, dtype=float)
            y = y.reshape((self.d, self.m), order=FLATTEN_ORDER)
            self.y = y
            self.yyT = y @ y.T
            self.xyT = x @ y.T

    def with_data(self, data: np.ndarray) -> "IsochronalOdeModel":
        return IsochronalOdeModel(self.t, self.x, data)

    def eval(self, beta: np.ndarray) -> np.ndarray:
        B = unflatten(self._check_beta(beta), self.d)
        return (expm(self.t * B) @ self.x).ravel(order=FLATTEN_ORDER)

    def jacobian(self, beta: np.ndarray) -> np.ndarray:
        B = unflatten(self._check_beta(beta), self.d)
        W = frechet_stack(self.t * B, self._E)  # (p, d, d)
        V = self.t * (W @ self.x)  # (p, d, m)
        return V.transpose(1, 2, 0).reshape(self.n, self.p, order=FLATTEN_ORDER)

    def g_matrix(self, beta: np.ndarray, coords: np.ndarray | None = None) -> np.ndarray:
        # column b: t^2 L(tB^T, L(tB, E_b) xx^T)[k, l] over coordinates (k, l)
        B = unflatten(self._check_beta(beta), self.d)
        A = self.t * B
        rows, cols = self._rows, self._cols
        if coords is not None:
            rows, cols = rows[coords], cols[coords]
            Es = self._E[coords]
        else:
            Es = self._E
        W = frechet_stack(A, Es)
        Z = frechet_stack(A.T, W @ self.xxT)
        G = self.t**2 * Z[:, rows, cols].T
        return 0.5 * (G + G.T)

    def weighted_hessian(
        self, beta: np.ndarray, w: np.ndarray, coords: np.ndarray | None = None
    ) -> np.ndarray:
        B = unflatten(self._check_beta(beta), self.d)
        W_mat = np.asarray(w, dtype=float).reshape((self.d, self.m), order=FLATTEN_ORDER)
        M = self.x @ W_mat.T
        rows, cols = self._rows, self._cols
        if coords is not None:
            rows, cols = rows[coords], cols[coords]
            Es = self._E[coords]
        else:
            Es = self._E
        HM = second_stack(self.t * B, Es, M)  # (k, d, d)
        # tr(d_b d_a e^{tB} M) = t^2 (H(tB,E_a,M)[l_b,k_b] + H(tB,E_b,M)[l_a,k_a])
        term = HM[:, cols, rows]
        return self.t**2 * (term + term.T)

    def loss_and_gradient(self, beta: np.ndarray) -> tuple[float, np.ndarray]:
        """Cross-product loss ||y - zeta(B)||^2 and gradient of half the loss.

        Requires attached data.  The loss expands to
        tr(yy^T) - 2 tr(e^{tB} xy^T) + tr(e^{tB^T} e^{tB} xx^T), and the
        gradient of (1/2)||y - zeta(B)||^2 is -t L(tB, xy^T - xx^T e^{tB^T})^T
        flattened: two exponentials regardless of m.
        """
        if self.y is None:
            raise ValueError("no data attached; use with_data first")
        B = unflatten(self._check_beta(beta), self.d)
        E, grad_mat = self._loss_pieces(B)
        loss = (
            float(np.trace(self.yyT))
            - 2.0 * float(np.sum(E * self.xyT.T))
            + float(np.sum((E.T @ E) * self.xxT))
        )
        return loss, flatten(-grad_mat)

    def _loss_pieces(self, B: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        A = self.t * B
        E = expm(A)
        M = self.xyT - self.xxT @ E.T
        _, L = expm_frechet(A, M)
        return E, self.t * L.T

    def bind(self, y: np.ndarray) -> "BoundModel":
        return _IsochronalBound(self if self.y is not None and self._same_data(y) else self.with_data(y))

    def _same_data(self, y: np.ndarray) -> bool:
        y = np.asarray(y, dtype=float).reshape((self.d, self.m), order=FLATTEN_ORDER)
        return self.y is not None and np.array_equal(y, self.y)


class _IsochronalBound(BoundModel):
    """Sufficient-statistics implementation of the solver hooks.

    Everything the solver touches per coordinate visit reduces to small
    block exponentials: the full gradient is one doubled block with the
    data direction xy^T - xx^T e^{tB^T} in the corner, and each squared
    column norm ||d_a zeta||^2 is one doubled block with the unit matrix
    E_a in the corner.  Norms are computed lazily per visited coordinate
    and all caches are keyed on the current parameter bytes, so a cyclic
    sweep between parameter changes costs one exponential per visit
    instead of a p-sized batch per change.
    """

    def __init__(self, model: IsochronalOdeModel):
        if model.y is None:
            raise ValueError("model must carry data")
        super().__init__(model, model.y)
        self.ode = model
        self._tr_yy = float(np.trace(model.yyT))
        d = model.d
        self._d = d
        self._pair = np.zeros((1, 2 * d, 2 * d))  # reusable doubled block
        self._exp_key: bytes | None = None
        self._exp_val: np.ndarray | None = None
        self._trial_key: bytes | None = None
        self._trial_val: np.ndarray | None = None
        self._grad_key: bytes | None = None
        self._grad_val: np.ndarray | None = None
        self._norm_key: bytes | None = None
        self._norms: dict[int, float] = {}

    def _exp_at(self, beta: np.ndarray, key: bytes) -> np.ndarray:
        if key != self._exp_key:
            if key == self._trial_key:  # accepted line-search candidate
                self._exp_val = self._trial_val
            else:
                A = self.ode.t * unflatten(beta, self._d)
                self._exp_val = _expm_core(A[None])[0]
            self._exp_key = key
        return self._exp_val

    def _corner(self, beta: np.ndarray, direction: np.ndarray) -> np.ndarray:
        """L(tB, direction) via one doubled block exponential."""
        d = self._d
        A = self.ode.t * unflatten(beta, d)
        pair = self._pair
        pair[0, :d, :d] = A
        pair[0, d:, d:] = A
        pair[0, :d, d:] = direction
        return _expm_core(pair)[0, :d, d:]

    def _rss_from_exp(self, E: np.ndarray) -> float:
        ode = self.ode
        cross = float(np.sum(E * ode.xyT.T))
        quad = float(np.sum((E.T @ E) * ode.xxT))
        # the three traces cancel almost completely near a good fit, so the
        # rounding scale of the result is set by their magnitudes, not by it
        self._rss_scale = self._tr_yy + 2.0 * abs(cross) + abs(quad)
        return self._tr_yy - 2.0 * cross + quad

    def objective_noise(self, f_value: float) -> float:
        scale = max(1.0, abs(f_value), getattr(self, "_rss_scale", 0.0))
        return 256.0 * np.finfo(float).eps * scale

    def rss(self, beta: np.ndarray) -> float:
        beta = np.asarray(beta, dtype=float)
        return self._rss_from_exp(self._exp_at(beta, beta.tobytes()))

    def loss_delta(self, beta: np.ndarray, k: int, delta: float) -> float:
        """Sharp half-rss difference for a coordinate move.

        e^{A'} - e^{A} is read off the (1,2) block of exp([[A', A'-A], [0, A]])
        (the two-sided integral identity), so the loss difference is linear in
        that block and never suffers the cancellation of subtracting two
        nearly equal losses.  The candidate exponential comes along free in
        the (1,1) block and is cached for acceptance.
        """
        ode = self.ode
        d, t = self._d, ode.t
        beta = np.asarray(beta, dtype=float)
        E = self._exp_at(beta, beta.tobytes())
        A = t * unflatten(beta, d)
        row, col = int(ode._rows[k]), int(ode._cols[k])
        pair = self._pair
        pair[0, :d, :d] = A
        pair[0, row, col] += t * delta
        pair[0, d:, d:] = A
        pair[0, :d, d:] = 0.0
        pair[0, row, col + d] = t * delta
        big = _expm_core(pair)
        E_new = big[0, :d, :d]
        dE = big[0, :d, d:]
        candidate = np.array(beta, copy=True)
        candidate[k] += delta
        self._trial_key = candidate.tobytes()
        self._trial_val = E_new
        d_rss = -2.0 * float(np.sum(dE * ode.xyT.T)) + float(
            np.sum(dE * (((E_new + E) @ ode.xxT)))
        )
        return 0.5 * d_rss

    def gradient(self, beta: np.ndarray) -> np.ndarray:
        beta = np.asarray(beta, dtype=float)
        key = beta.tobytes()
        if key != self._grad_key:
            ode = self.ode
            E = self._exp_at(beta, key)
            L = self._corner(beta, ode.xyT - ode.xxT @ E.T)
            self._grad_val = flatten(ode.t * L.T)
            self._grad_key = key
        return self._grad_val

    def surrogate_k(self, beta: np.ndarray, k: int) -> tuple[float, float]:
        beta = np.asarray(beta, dtype=float)
        g = self.gradient(beta)
        key = self._grad_key
        if key != self._norm_key:
            self._norms = {}
            self._norm_key = key
        a_k = self._norms.get(k)
        if a_k is None:
            ode = self.ode
            W = self._corner(beta, ode._E[k])
            a_k = ode.t**2 * float(((W @ ode.x) ** 2).sum())
            self._norms[k] = a_k
        return float(g[k]), a_k

    def _compute_surrogate(self, beta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        ode = self.ode
        d, t = self._d, ode.t
        A = t * unflatten(beta, d)
        g = self.gradient(beta)
        p = ode.p
        stack = np.zeros((p, 2 * d, 2 * d))
        stack[:, :d, :d] = A
        stack[:, d:, d:] = A
        stack[:, :d, d:] = ode._E
        W = _expm_core(stack)[:, :d, d:]
        a = t**2 * ((W @ ode.x) ** 2).sum(axis=(1, 2))
        return g, a


class MultiTimeOdeModel(_OdeBase):
    """zeta(B) = (e^{t_1 B} x_1, ..., e^{t_m B} x_m) stacked, distinct times allowed.

    Correctness-first path: per-observation exponentials, no caching shared
    across distinct sampling times.
    """

    def __init__(self, times: np.ndarray, inits: np.ndarray):
        times = np.asarray(times, dtype=float).ravel()
        inits = np.asarray(inits, dtype=float)
        if inits.ndim != 2 or inits.shape[1] != times.size:
            raise ValueError("inits must be d x m with one column per time")
        if np.any(times <= 0):
            raise ValueError("sampling times must be positive")
        self.times = times
        self.inits = inits
        self.d, self.m = inits.shape
        self.p = self.d * self.d
        self.n = self.d * self.m
        self._E = self._unit_stack()
        self._rows, self._cols = coord_rows_cols(self.d)

    def eval(self, beta: np.ndarray) -> np.ndarray:
        B = unflatten(self._check_beta(beta), self.d)
        cols = [expm(t * B) @ self.inits[:, i] for i, t in enumerate(self.times)]
        return np.concatenate(cols)

    def jacobian(self, beta: np.ndarray) -> np.ndarray:
        B = unflatten(self._check_beta(beta), self.d)
        jac = np.empty((self.n, self.p))
        for i, t in enumerate(self.times):
            W = frechet_stack(t * B, self._E)  # (p, d, d)
            jac[i * self.d : (i + 1) * self.d, :] = t * (W @ self.inits[:, i]).T
        return jac

    def weighted_hessian(
        self, beta: np.ndarray, w: np.ndarray, coords: np.ndarray | None = None
    ) -> np.ndarray:
        B = unflatten(self._check_beta(beta), self.d)
        w = np.asarray(w, dtype=float).reshape((self.d, self.m), order=FLATTEN_ORDER)
        rows, cols = self._rows, self._cols
        Es = self._E
        if coords is not None:
            rows, cols = rows[coords], cols[coords]
            Es = self._E[coords]
        k = len(rows)
        WH = np.zeros((k, k))
        for i, t in enumerate(self.times):
            M = np.outer(self.inits[:, i], w[:, i])
            HM = second_stack(t * B, Es, M)
            term = HM[:, cols, rows]
            WH += t**2 * (term + term.T)
        return WH
