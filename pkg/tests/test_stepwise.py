"""Forward stepwise pattern search and its df evaluations."""

import numpy as np

from sparseode.expm import expm
from sparseode.models import IsochronalOdeModel, LinearModel
from sparseode.solver import SolverConfig
from sparseode.stepwise import forward_stepwise, search_df
from sparseode.util import flat_index


class TestSelectionOrder:
    def test_orthogonal_design_greedy_order(self, rng):
        # with orthonormal columns the RSS decrease of adding k is (X^T y)_k^2
        X = np.linalg.qr(rng.standard_normal((10, 5)))[0]
        y = rng.standard_normal(10) * 2.0
        states = forward_stepwise(LinearModel(X), y, 5, initial_pattern=np.array([], dtype=int))
        added = [st.added for st in states[1:]]
        want = list(np.argsort(-np.abs(X.T @ y)))
        assert added == want

    def test_strong_coupling_found_first(self):
        # diagonal truth plus one strong off-diagonal coupling: that entry
        # should win the first addition in nearly every replication
        d, m, t = 4, 6, 1.0
        B_true = np.diag([-1.0, -1.0, -1.0, -1.0])
        B_true[0, 1] = 2.0
        target = flat_index(0, 1, d)
        hits = 0
        for seed in range(100):
            r = np.random.default_rng(seed)
            x = r.standard_normal((d, m)) * 3.0
            y = expm(t * B_true) @ x + 0.5 * r.standard_normal((d, m))
            model = IsochronalOdeModel(t, x, data=y)
            states = forward_stepwise(model, y, d + 1)
            if states[1].added == target:
                hits += 1
        assert hits >= 95


class TestTrajectory:
    def _states(self, rng, max_nonzero=9):
        d, m, t = 3, 5, 0.8
        B_true = np.diag([-0.9, -0.8, -0.7])
        B_true[0, 2] = 0.6
        x = rng.standard_normal((d, m)) * 2.0
        y = expm(t * B_true) @ x + 0.3 * rng.standard_normal((d, m))
        model = IsochronalOdeModel(t, x, data=y)
        return model, y, forward_stepwise(model, y, max_nonzero)

    def test_single_state_when_max_is_d(self, rng):
        model, y, states = self._states(rng, max_nonzero=3)
        assert len(states) == 1
        assert states[0].added is None

    def test_diagonal_start_and_growth(self, rng):
        model, y, states = self._states(rng)
        assert sorted(states[0].pattern) == [flat_index(i, i, 3) for i in range(3)]
        for k, st in enumerate(states):
            assert st.pattern.size == 3 + k

    def test_rss_nonincreasing(self, rng):
        model, y, states = self._states(rng)
        rss = [st.rss for st in states]
        assert all(b <= a + 1e-10 for a, b in zip(rss, rss[1:]))


class TestSearchDf:
    def test_linear_model_both_equal_pattern_size(self, rng):
        X = rng.standard_normal((12, 6))
        y = rng.standard_normal(12)
        model = LinearModel(X)
        states = forward_stepwise(model, y, 4, initial_pattern=np.array([0], dtype=int))
        for st in states:
            df_thm, df_count, fallback = search_df(st, model, y)
            assert not fallback
            assert df_count == st.pattern.size
            assert abs(df_thm - df_count) < 1e-8

    def test_zero_residual_gives_count(self, rng):
        d, m, t = 3, 5, 0.8
        B_true = np.diag([-0.9, -0.8, -0.7])
        x = rng.standard_normal((d, m)) * 2.0
        y = expm(t * B_true) @ x  # noiseless
        model = IsochronalOdeModel(t, x, data=y)
        states = forward_stepwise(model, y, 4)
        df_thm, df_count, _ = search_df(states[0], model, y)
        assert abs(df_thm - df_count) < 1e-5

    def test_ode_fit_within_band(self, rng):
        d, m, t = 3, 5, 0.8
        B_true = np.diag([-0.9, -0.8, -0.7])
        B_true[1, 0] = 0.5
        x = rng.standard_normal((d, m)) * 2.0
        y = expm(t * B_true) @ x + 0.2 * rng.standard_normal((d, m))
        model = IsochronalOdeModel(t, x, data=y)
        states = forward_stepwise(model, y, 5)
        df_thm, df_count, fallback = search_df(states[-1], model, y)
        assert not fallback
        assert abs(df_thm - df_count) <= 0.2 * df_count


class TestRiskAlongTrajectory:
    def test_diagonal_truth_prefers_small_models(self):
        # risk estimates along the search should bottom out at or near the
        # base (diagonal) state for most replications when the truth is diagonal
        d, m, t, sigma2 = 3, 6, 1.0, 0.25
        B_true = np.diag([-1.0, -0.8, -0.6])
        n = d * m
        wins = 0
        reps = 40
        for seed in range(reps):
            r = np.random.default_rng(1000 + seed)
            x = r.standard_normal((d, m)) * 3.0
            y = expm(t * B_true) @ x + np.sqrt(sigma2) * r.standard_normal((d, m))
            model = IsochronalOdeModel(t, x, data=y)
            states = forward_stepwise(model, y, 6)
            hats = []
            for st in states:
                df_thm, _, _ = search_df(st, model, y)
                hats.append(st.rss - n * sigma2 + 2 * sigma2 * df_thm)
            if int(np.argmin(hats)) <= 1:
                wins += 1
        assert wins > reps / 2
