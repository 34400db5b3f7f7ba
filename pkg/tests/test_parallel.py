import time

import numpy as np
import pytest

from basepar.actm import ExogenousInput, NetworkState
from basepar.base_controllers import ExplicitAlineaController, warm_start_rollout
from basepar.parallel import (
    CONVENTIONAL,
    PARAMETERIZED,
    MpcProblem,
    OptimizerConfig,
    _fd_gradient,
    base_start_for,
    decision_to_metering,
    fallback_start,
    make_shift_warm_starts,
    objective,
    run_parallel_cell,
    solve_budgeted,
)
from basepar.scenario import default_scenario

from oracles import central_difference, oracle_rollout_cost


NET = default_scenario().network


def random_state(rng):
    return NetworkState(
        n=tuple(rng.uniform(0, 60, size=6)), q=tuple(rng.uniform(0, 15, size=3))
    )


def random_input(rng):
    return ExogenousInput(rng.uniform(0, 7), tuple(rng.uniform(0, 3, size=3)))


def make_problem(rng, kind=CONVENTIONAL, horizon=3, label="MPC"):
    nr = 3
    if kind == CONVENTIONAL:
        lo, hi = (0.0,) * (nr * horizon), (8.0,) * (nr * horizon)
    else:
        lo, hi = (0.0,) * nr, (1.0,) * nr
    return MpcProblem(
        kind=kind, horizon=horizon, params=NET,
        initial_state=random_state(rng),
        demand_forecast=(random_input(rng),),
        mu_prev=tuple(rng.uniform(0, 2, size=nr)),
        bounds_lo=lo, bounds_hi=hi, gamma=0.8, label=label,
    )


def dummy_problem(dim, lo=-10.0, hi=10.0):
    """Conventional-shaped carrier for surrogate objectives (3 ramps)."""
    assert dim % 3 == 0
    horizon = dim // 3
    return MpcProblem(
        kind=CONVENTIONAL, horizon=horizon, params=NET,
        initial_state=NetworkState(n=(10.0,) * 6, q=(1.0,) * 3),
        demand_forecast=(ExogenousInput(1.0, (0.5, 0.5, 0.5)),),
        mu_prev=(0.5, 0.5, 0.5),
        bounds_lo=(lo,) * dim, bounds_hi=(hi,) * dim, gamma=0.8, label="surrogate",
    )


class TestObjective:
    def test_matches_independent_rollout_cost(self):
        rng = np.random.default_rng(17)
        for _ in range(5):
            problem = make_problem(rng, horizon=4)
            for _ in range(10):
                x = rng.uniform(0, 8, size=problem.decision_dim)
                got = objective(problem, x)
                plan = [tuple(r) for r in x.reshape(4, 3)]
                want = oracle_rollout_cost(
                    NET, problem.initial_state, problem.demand_forecast, plan, 4, 0.8
                )
                assert got == pytest.approx(want, abs=1e-9)

    def test_parameterized_zero_gain_zero_prev_is_no_admission(self):
        rng = np.random.default_rng(23)
        state = random_state(rng)
        problem = MpcProblem(
            kind=PARAMETERIZED, horizon=5, params=NET, initial_state=state,
            demand_forecast=(random_input(rng),), mu_prev=(0.0, 0.0, 0.0),
            bounds_lo=(0.0,) * 3, bounds_hi=(1.0,) * 3, gamma=0.8, label="PMPC",
        )
        got = objective(problem, np.zeros(3))
        plan = [(0.0, 0.0, 0.0)] * 5
        want = oracle_rollout_cost(NET, state, problem.demand_forecast, plan, 5, 0.8)
        assert decision_to_metering(problem, np.zeros(3)) == ((0.0, 0.0, 0.0),) * 5
        assert got == pytest.approx(want, abs=1e-12)

    def test_horizon_one_gamma_zero_is_occupancy_time(self):
        rng = np.random.default_rng(29)
        state = random_state(rng)
        problem = MpcProblem(
            kind=CONVENTIONAL, horizon=1, params=NET, initial_state=state,
            demand_forecast=(random_input(rng),), mu_prev=(0.0, 0.0, 0.0),
            bounds_lo=(0.0,) * 3, bounds_hi=(8.0,) * 3, gamma=0.0, label="CMPC",
        )
        expected = NET.sample_cycle_s / 3600.0 * (sum(state.n) + sum(state.q))
        assert objective(problem, rng.uniform(0, 8, size=3)) == pytest.approx(expected)

    def test_dimension_check(self):
        rng = np.random.default_rng(1)
        problem = make_problem(rng)
        with pytest.raises(ValueError):
            objective(problem, np.zeros(problem.decision_dim + 1))


class TestShiftStarts:
    def test_shift_once(self):
        history = [np.array([[1.0], [2.0], [3.0]])]
        starts = make_shift_warm_starts(history)
        assert len(starts) == 2  # (a) and (c)
        np.testing.assert_allclose(starts[0], [[2.0], [3.0], [3.0]])
        np.testing.assert_allclose(starts[1], starts[0])  # degenerate average

    def test_pairwise_average(self):
        history = [np.array([[4.0], [5.0], [6.0]]), np.array([[1.0], [2.0], [3.0]])]
        starts = make_shift_warm_starts(history)
        assert len(starts) == 3
        np.testing.assert_allclose(starts[0], [[2.0], [3.0], [3.0]])
        np.testing.assert_allclose(starts[1], [[4.0], [4.5], [4.5]])

    def test_empty_history(self):
        assert make_shift_warm_starts([]) == []

    def test_parameterized_solutions_degenerate(self):
        history = [np.array([[0.2, 0.4, 0.6]]), np.array([[0.4, 0.6, 0.8]])]
        starts = make_shift_warm_starts(history)
        np.testing.assert_allclose(starts[0], [[0.4, 0.6, 0.8]])
        np.testing.assert_allclose(starts[1], [[0.3, 0.5, 0.7]])
        np.testing.assert_allclose(starts[2], [[0.3, 0.5, 0.7]])


class TestSolver:
    def quadratic(self, dim, seed=0):
        rng = np.random.default_rng(seed)
        a = rng.uniform(-3, 3, size=dim)
        m = rng.normal(size=(dim, dim))
        q = m.T @ m + np.eye(dim)
        return (lambda x: float((x - a) @ q @ (x - a))), a

    def test_reaches_quadratic_minimizer(self):
        fun, a = self.quadratic(6, seed=3)
        problem = dummy_problem(6)
        cfg = OptimizerConfig(budget_s=None, max_iterations=300)
        result = solve_budgeted(problem, [np.zeros(6)], cfg, objective_fn=fun)
        x = np.asarray(result.best.decision)
        assert np.max(np.abs(x - a)) < 1e-5

    def test_bound_optimum_projected(self):
        problem = dummy_problem(3, lo=0.0, hi=2.0)
        fun = lambda x: float(np.sum((x - 5.0) ** 2))
        cfg = OptimizerConfig(budget_s=None, max_iterations=100)
        result = solve_budgeted(problem, [np.ones(3)], cfg, objective_fn=fun)
        np.testing.assert_allclose(result.best.decision, [2.0, 2.0, 2.0], atol=1e-9)

    def test_zero_budget_returns_best_start(self):
        fun, _ = self.quadratic(3, seed=5)
        problem = dummy_problem(3)
        starts = [np.zeros(3), np.ones(3), np.full(3, -1.0)]
        cfg = OptimizerConfig(budget_s=0.0, max_iterations=100)
        result = solve_budgeted(problem, starts, cfg, objective_fn=fun)
        start_costs = [fun(np.clip(s, -10, 10)) for s in starts]
        assert result.best.cost == min(start_costs)
        assert len(result.cost_trail) == 3

    def test_anytime_best_so_far_non_increasing(self):
        rng = np.random.default_rng(31)
        problem = make_problem(rng, horizon=3)
        cfg = OptimizerConfig(budget_s=None, max_iterations=40, termination="all")
        starts = [fallback_start(problem), rng.uniform(0, 8, size=problem.decision_dim)]
        result = solve_budgeted(problem, starts, cfg)
        best_so_far = np.minimum.accumulate(result.cost_trail)
        assert all(b <= a + 1e-15 for a, b in zip(best_so_far, best_so_far[1:]))
        assert result.best.cost == min(result.cost_trail)
        assert len(result.iterates) == len(result.cost_trail)

    def test_final_never_worse_than_any_start(self):
        rng = np.random.default_rng(37)
        for i in range(20):
            kind = CONVENTIONAL if i % 2 == 0 else PARAMETERIZED
            problem = make_problem(rng, kind=kind, horizon=rng.integers(1, 5))
            k = int(rng.integers(1, 5))
            if kind == CONVENTIONAL:
                starts = [rng.uniform(0, 8, size=problem.decision_dim) for _ in range(k)]
            else:
                starts = [rng.uniform(0, 1, size=problem.decision_dim) for _ in range(k)]
            cfg = OptimizerConfig(budget_s=None, max_iterations=15)
            result = solve_budgeted(problem, starts, cfg)
            for s in starts:
                assert result.best.cost <= objective(problem, s) + 1e-12

    def test_gradient_matches_central_difference_oracle(self):
        rng = np.random.default_rng(41)
        problem = make_problem(rng, horizon=3)
        fun = lambda x: objective(problem, x)
        lo = np.asarray(problem.bounds_lo)
        hi = np.asarray(problem.bounds_hi)
        for _ in range(10):
            x = rng.uniform(0.5, 7.5, size=problem.decision_dim)
            g_fwd = _fd_gradient(fun, x, fun(x), lo, hi, 1e-6, None)
            g_ctr = central_difference(fun, x, h=1e-6)
            scale = max(1e-6, float(np.max(np.abs(g_ctr))))
            assert np.max(np.abs(g_fwd - g_ctr)) / scale < 1e-4

    def test_budget_compliance_with_slow_objective(self):
        eval_time = 0.02
        calls = []

        def slow(x):
            time.sleep(eval_time)
            calls.append(1)
            return float(np.sum(np.sin(x * 37.0)) + np.sum(x**2) * 1e-6)

        problem = dummy_problem(3)
        budget = 0.5
        cfg = OptimizerConfig(budget_s=budget, max_iterations=10_000)
        t0 = time.monotonic()
        solve_budgeted(problem, [np.zeros(3)], cfg, objective_fn=slow)
        elapsed = time.monotonic() - t0
        assert elapsed <= (budget + eval_time) * 1.10 + 0.05
        assert len(calls) >= 2  # it did work inside the window

    def test_parameterized_conventional_consistency_horizon_one(self):
        rng = np.random.default_rng(43)
        consistent = 0
        for _ in range(10):
            state = random_state(rng)
            inp = random_input(rng)
            mu_prev = tuple(rng.uniform(0.5, 3, size=3))
            conv = MpcProblem(
                kind=CONVENTIONAL, horizon=1, params=NET, initial_state=state,
                demand_forecast=(inp,), mu_prev=mu_prev,
                bounds_lo=(0.0,) * 3, bounds_hi=(8.0,) * 3, gamma=0.8, label="C",
            )
            rho = [state.n[i] / (NET.cells[i].length) for i in NET.metered_cells]
            delta = [NET.rho_crit - r for r in rho]
            if any(abs(d) < 1e-6 for d in delta):
                continue
            lo, hi = [], []
            for j in range(3):
                a = (0.0 - mu_prev[j]) / delta[j]
                b = (8.0 - mu_prev[j]) / delta[j]
                lo.append(min(a, b))
                hi.append(max(a, b))
            par = MpcProblem(
                kind=PARAMETERIZED, horizon=1, params=NET, initial_state=state,
                demand_forecast=(inp,), mu_prev=mu_prev,
                bounds_lo=tuple(lo), bounds_hi=tuple(hi), gamma=0.8, label="P",
            )
            cfg = OptimizerConfig(budget_s=None, max_iterations=150)
            c_starts = [np.zeros(3), np.full(3, 8.0), np.asarray(mu_prev)]
            p_starts = [np.asarray(lo), np.asarray(hi), np.zeros(3)]
            jc = solve_budgeted(conv, c_starts, cfg).best.cost
            jp = solve_budgeted(par, p_starts, cfg).best.cost
            assert abs(jc - jp) <= cfg.function_tolerance
            consistent += 1
        assert consistent >= 8  # almost every random draw is usable

    def test_requires_a_start(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ValueError):
            solve_budgeted(make_problem(rng), [], OptimizerConfig())


class TestParallelCell:
    def setup_cell(self, seed=47):
        rng = np.random.default_rng(seed)
        state = NetworkState(n=(32.6, 36.2, 5.1, 25.3, 3.9, 0.0), q=(5.5, 9.6, 1.6))
        measured = ExogenousInput(5.0, (1.5, 1.0, 0.8))
        base = ExplicitAlineaController(NET, gains=(0.016,) * 3, mu_init=(0.5, 0.2, 0.4))
        warm = warm_start_rollout(base, state, (measured,), 10, NET, (3.8, 3.2, 0.6))
        problems = [
            MpcProblem(
                kind=CONVENTIONAL, horizon=h, params=NET, initial_state=state,
                demand_forecast=(measured,), mu_prev=(0.5, 0.2, 0.4),
                bounds_lo=(0.0,) * (3 * h), bounds_hi=(8.0,) * (3 * h),
                gamma=0.8, label=f"CMPC({i})",
            )
            for i, h in enumerate((3, 10), start=1)
        ]
        return problems, warm

    def test_warm_start_prefix_truncation(self):
        problems, warm = self.setup_cell()
        start = base_start_for(problems[0], warm)
        np.testing.assert_allclose(
            start, np.asarray(warm.mu[:3], dtype=float).ravel()
        )
        assert start.size == 9
        assert base_start_for(problems[1], warm).size == 30

    def test_single_controller_cell_equals_solve_budgeted(self):
        problems, warm = self.setup_cell()
        cfg = OptimizerConfig(budget_s=None, max_iterations=10)
        cell = run_parallel_cell(problems[:1], warm, {}, cfg, serial=True)
        direct = solve_budgeted(problems[0], [base_start_for(problems[0], warm)], cfg)
        assert cell["CMPC(1)"].best.decision == direct.best.decision
        assert cell["CMPC(1)"].cost_trail == direct.cost_trail

    def test_serial_determinism_bitwise(self):
        problems, warm = self.setup_cell()
        cfg = OptimizerConfig(budget_s=None, max_iterations=12)
        hist = {"CMPC(1)": [np.full((3, 3), 0.7)], "CMPC(2)": []}
        a = run_parallel_cell(problems, warm, hist, cfg, serial=True)
        b = run_parallel_cell(problems, warm, hist, cfg, serial=True)
        for label in ("CMPC(1)", "CMPC(2)"):
            assert a[label].best.decision == b[label].best.decision
            assert a[label].cost_trail == b[label].cost_trail

    def test_short_warm_start_rejected(self):
        problems, _ = self.setup_cell()
        base = ExplicitAlineaController(NET, gains=(0.016,) * 3, mu_init=(0.5, 0.2, 0.4))
        state = NetworkState(n=(32.6, 36.2, 5.1, 25.3, 3.9, 0.0), q=(5.5, 9.6, 1.6))
        short = warm_start_rollout(
            base, state, (ExogenousInput(5.0, (1.5, 1.0, 0.8)),), 3, NET, (3.8, 3.2, 0.6)
        )
        with pytest.raises(ValueError):
            run_parallel_cell(problems, short, {}, OptimizerConfig(), serial=True)
