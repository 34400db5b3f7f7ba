import logging
import math

import numpy as np
import pytest

from basepar.actm import ExogenousInput, NetworkState
from basepar.base_controllers import ExplicitAlineaController
from basepar.orchestrator import (
    ArchitectureConfig,
    BaseParallelController,
    EvaluationResult,
    ParallelCell,
    ParallelControllerSpec,
    evaluate_candidates,
    select_best,
)
from basepar.parallel import CONVENTIONAL, CandidateSequence, OptimizerConfig
from basepar.scenario import default_scenario

from oracles import oracle_rollout_cost

NET = default_scenario().network
STATE = NetworkState(n=(32.6, 36.2, 5.1, 25.3, 3.9, 0.0), q=(5.5, 9.6, 1.6))
MEASURED = ExogenousInput(5.0, (1.5, 1.0, 0.8))
O_PREV = (3.8, 3.2, 0.6)


def alinea(label="ALINEA"):
    return ExplicitAlineaController(NET, gains=(0.016,) * 3, mu_init=(0.5, 0.2, 0.4), label=label)


def make_arch(cells, evaluation_horizon=3, max_iterations=8):
    config = ArchitectureConfig(
        params=NET,
        cells=cells,
        evaluation_horizon=evaluation_horizon,
        gamma=0.8,
        optimizer=OptimizerConfig(budget_s=None, max_iterations=max_iterations),
        metering_lo=(0.0,) * 3,
        metering_hi=(8.0,) * 3,
        gain_lo=(0.0,) * 3,
        gain_hi=(1.0,) * 3,
        serial=True,
    )
    return BaseParallelController(config, mu_init=(0.5, 0.2, 0.4))


def plan(*rows):
    return tuple(tuple(float(v) for v in row) for row in rows)


class TestSelectBest:
    def evaluation(self, costs):
        cands = tuple(
            CandidateSequence(metering=plan((0.1 * i, 0.0, 0.0)), source=f"c{i}", cost=c)
            for i, c in enumerate(costs)
        )
        return EvaluationResult(candidates=cands, costs=tuple(costs))

    def test_argmin(self):
        ev = self.evaluation([3.0, 1.0, 2.0])
        winner, applied = select_best(ev)
        assert winner == 1
        assert applied == ev.candidates[1].metering[0]

    def test_tie_breaks_to_lower_index(self):
        winner, _ = select_best(self.evaluation([1.0, 1.0]))
        assert winner == 0

    def test_constant_shift_invariance(self):
        base = [4.0, 2.5, 3.0, 2.5]
        w1, _ = select_best(self.evaluation(base))
        w2, _ = select_best(self.evaluation([c + 10.0 for c in base]))
        assert w1 == w2

    def test_all_infinite_falls_back(self, caplog):
        ev = self.evaluation([math.inf, math.inf, math.inf])
        with caplog.at_level(logging.WARNING):
            winner, _ = select_best(ev, fallback_index=1)
        assert winner == 1
        assert any("falling back" in r.message for r in caplog.records)

    def test_margins_and_winner_recorded(self):
        ev = self.evaluation([3.0, 1.0, 2.0])
        select_best(ev)
        assert ev.winner_index == 1
        assert ev.margins == (2.0, 0.0, 1.0)


class TestEvaluateCandidates:
    def test_identical_candidates_identical_costs(self):
        cand = CandidateSequence(
            metering=plan((0.5, 0.2, 0.4), (0.5, 0.2, 0.4), (0.5, 0.2, 0.4)),
            source="a", cost=0.0,
        )
        twin = CandidateSequence(metering=cand.metering, source="b", cost=0.0)
        ev = evaluate_candidates([cand, twin], NET, STATE, (MEASURED,), 3, 0.8)
        assert ev.costs[0] == ev.costs[1]

    def test_single_step_horizon_is_stage_cost(self):
        cand = CandidateSequence(metering=plan((0.5, 0.2, 0.4)), source="a", cost=0.0)
        ev = evaluate_candidates([cand], NET, STATE, (MEASURED,), 1, 0.8)
        want = oracle_rollout_cost(NET, STATE, (MEASURED,), [(0.5, 0.2, 0.4)], 1, 0.8)
        assert ev.costs[0] == pytest.approx(want, abs=1e-12)

    def test_short_candidate_holds_last_value(self):
        short = CandidateSequence(metering=plan((1.0, 1.0, 1.0)), source="s", cost=0.0)
        long = CandidateSequence(
            metering=plan((1.0, 1.0, 1.0), (1.0, 1.0, 1.0), (1.0, 1.0, 1.0)),
            source="l", cost=0.0,
        )
        ev = evaluate_candidates([short, long], NET, STATE, (MEASURED,), 3, 0.8)
        assert ev.costs[0] == pytest.approx(ev.costs[1], abs=1e-15)

    def test_failing_candidate_gets_infinite_cost(self, caplog):
        bad = CandidateSequence(metering=plan((-1.0, 0.0, 0.0)), source="bad", cost=0.0)
        good = CandidateSequence(metering=plan((0.5, 0.2, 0.4)), source="good", cost=0.0)
        with caplog.at_level(logging.WARNING):
            ev = evaluate_candidates([bad, good], NET, STATE, (MEASURED,), 2, 0.8)
        assert math.isinf(ev.costs[0]) and math.isfinite(ev.costs[1])
        winner, _ = select_best(ev)
        assert winner == 1

    def test_empty_candidate_set_rejected(self):
        with pytest.raises(ValueError):
            evaluate_candidates([], NET, STATE, (MEASURED,), 3, 0.8)


class TestControlStep:
    def test_base_only_architecture_applies_base_output(self):
        arch = make_arch([ParallelCell(base=alinea())])
        record, _ = arch.control_step(STATE, MEASURED, O_PREV)
        expected, _ = alinea().advance(STATE, MEASURED, O_PREV)
        assert record.applied == pytest.approx(expected, abs=1e-15)
        assert record.winner == "ALINEA"

    def test_identical_bases_tie_break_to_first(self):
        arch = make_arch([
            ParallelCell(base=alinea("BASE-A")),
            ParallelCell(base=alinea("BASE-B")),
        ])
        record, evaluation = arch.control_step(STATE, MEASURED, O_PREV)
        assert evaluation.costs[0] == evaluation.costs[1]
        assert record.winner == "BASE-A"

    def test_applied_equals_winner_first_element(self):
        arch = make_arch([
            ParallelCell(
                base=alinea(),
                controllers=(ParallelControllerSpec("CMPC(1)", CONVENTIONAL, 3),),
            )
        ])
        record, evaluation = arch.control_step(STATE, MEASURED, O_PREV)
        winner_cand = evaluation.candidates[evaluation.winner_index]
        assert record.applied == winner_cand.metering[0]
        assert record.winner == winner_cand.source

    def test_selection_matches_brute_force_oracle(self):
        arch = make_arch([
            ParallelCell(
                base=alinea(),
                controllers=(ParallelControllerSpec("CMPC(1)", CONVENTIONAL, 3),),
            )
        ])
        record, evaluation = arch.control_step(STATE, MEASURED, O_PREV)
        recomputed = [
            oracle_rollout_cost(NET, STATE, (MEASURED,), list(c.metering), 3, 0.8)
            for c in evaluation.candidates
        ]
        assert evaluation.costs == pytest.approx(recomputed, abs=1e-9)
        best = min(range(len(recomputed)), key=lambda i: (recomputed[i], i))
        assert evaluation.winner_index == best
        assert evaluation.costs[evaluation.winner_index] <= min(recomputed) + 1e-12

    def test_predicted_cost_matches_evaluation_for_matching_horizon(self):
        # prediction model == evaluation model and a shared forecast: the
        # horizon-3 controller's reported cost equals its evaluated cost
        arch = make_arch([
            ParallelCell(
                base=alinea(),
                controllers=(ParallelControllerSpec("CMPC(1)", CONVENTIONAL, 3),),
            )
        ])
        _, evaluation = arch.control_step(STATE, MEASURED, O_PREV)
        for cand, eps in zip(evaluation.candidates, evaluation.costs):
            if cand.source == "CMPC(1)":
                assert eps == pytest.approx(cand.cost, abs=1e-9)

    def test_superset_monotonicity_at_fixed_states(self):
        rng = np.random.default_rng(53)
        for _ in range(4):
            state = NetworkState(
                n=tuple(rng.uniform(0, 60, size=6)), q=tuple(rng.uniform(0, 12, size=3))
            )
            measured = ExogenousInput(rng.uniform(0, 7), tuple(rng.uniform(0, 2.5, size=3)))
            small = make_arch([
                ParallelCell(
                    base=alinea(),
                    controllers=(ParallelControllerSpec("CMPC(1)", CONVENTIONAL, 3),),
                )
            ])
            large = make_arch([
                ParallelCell(
                    base=alinea(),
                    controllers=(
                        ParallelControllerSpec("CMPC(1)", CONVENTIONAL, 3),
                        ParallelControllerSpec("CMPC(2)", CONVENTIONAL, 10),
                    ),
                )
            ])
            _, ev_small = small.control_step(state, measured, O_PREV)
            _, ev_large = large.control_step(state, measured, O_PREV)
            eps_small = ev_small.costs[ev_small.winner_index]
            eps_large = ev_large.costs[ev_large.winner_index]
            assert eps_large <= eps_small + 1e-12

    def test_histories_and_feedback_state_updated(self):
        arch = make_arch([
            ParallelCell(
                base=alinea(),
                controllers=(ParallelControllerSpec("CMPC(1)", CONVENTIONAL, 3),),
            )
        ])
        record, _ = arch.control_step(STATE, MEASURED, O_PREV)
        assert arch.mu_prev == record.applied
        assert arch.config.cells[0].base.state.mu_prev == list(record.applied)
        assert len(arch.histories["CMPC(1)"]) == 1
        assert arch.histories["CMPC(1)"][0].shape == (3, 3)

    def test_serial_determinism(self):
        def build():
            return make_arch([
                ParallelCell(
                    base=alinea(),
                    controllers=(ParallelControllerSpec("CMPC(1)", CONVENTIONAL, 3),),
                )
            ])

        r1, e1 = build().control_step(STATE, MEASURED, O_PREV)
        r2, e2 = build().control_step(STATE, MEASURED, O_PREV)
        assert r1.applied == r2.applied
        assert e1.costs == e2.costs

    def test_all_iterates_termination_expands_candidate_set(self):
        def build(termination):
            config = ArchitectureConfig(
                params=NET,
                cells=[ParallelCell(
                    base=alinea(),
                    controllers=(ParallelControllerSpec("CMPC(1)", CONVENTIONAL, 3),),
                )],
                evaluation_horizon=3,
                gamma=0.8,
                optimizer=OptimizerConfig(budget_s=None, max_iterations=8,
                                          termination=termination),
                metering_lo=(0.0,) * 3,
                metering_hi=(8.0,) * 3,
                gain_lo=(0.0,) * 3,
                gain_hi=(1.0,) * 3,
                serial=True,
            )
            return BaseParallelController(config, mu_init=(0.5, 0.2, 0.4))

        _, ev_best = build("best").control_step(STATE, MEASURED, O_PREV)
        record, ev_all = build("all").control_step(STATE, MEASURED, O_PREV)
        assert len(ev_best.candidates) == 2  # base + one solved candidate
        assert len(ev_all.candidates) > len(ev_best.candidates)
        # the selector is still exact over the enlarged set
        costs = ev_all.costs
        first = min(range(len(costs)), key=lambda i: (costs[i], i))
        assert ev_all.winner_index == first
        assert record.applied == ev_all.candidates[first].metering[0]

    def test_refined_evaluation_model_hook(self):
        slower = list(NET.cells)
        slower[1] = type(NET.cells[1])(**{
            **{f: getattr(NET.cells[1], f) for f in (
                "length", "capacity_nbar", "sat_mainline_obar", "sat_offramp_sbar",
                "split_beta", "blend_alpha", "eta_idling", "xi",
                "has_onramp", "has_offramp", "metered", "allow_beta_one",
            )},
            "eta_moving": 0.4,
        })
        from basepar.actm import NetworkParams

        refined = NetworkParams(
            cells=tuple(slower), sample_cycle_s=NET.sample_cycle_s,
            rho_crit=NET.rho_crit, lanes=NET.lanes, free_flow_mps=NET.free_flow_mps,
        )
        cand = CandidateSequence(metering=plan((0.5, 0.2, 0.4)), source="a", cost=0.0)
        default = evaluate_candidates([cand], NET, STATE, (MEASURED,), 3, 0.8)
        swapped = evaluate_candidates([cand], refined, STATE, (MEASURED,), 3, 0.8)
        assert default.costs != swapped.costs


class TestConfigValidation:
    def test_evaluation_horizon_capped_by_min_horizon(self):
        with pytest.raises(ValueError):
            ArchitectureConfig(
                params=NET,
                cells=[ParallelCell(
                    base=alinea(),
                    controllers=(ParallelControllerSpec("CMPC(1)", CONVENTIONAL, 3),),
                )],
                evaluation_horizon=4,
                gamma=0.8,
                optimizer=OptimizerConfig(),
                metering_lo=(0.0,) * 3,
                metering_hi=(8.0,) * 3,
                gain_lo=(0.0,) * 3,
                gain_hi=(1.0,) * 3,
            )

    def test_duplicate_labels_rejected(self):
        with pytest.raises(ValueError):
            ArchitectureConfig(
                params=NET,
                cells=[
                    ParallelCell(base=alinea("X")),
                    ParallelCell(base=alinea("X")),
                ],
                evaluation_horizon=1,
                gamma=0.8,
                optimizer=OptimizerConfig(),
                metering_lo=(0.0,) * 3,
                metering_hi=(8.0,) * 3,
                gain_lo=(0.0,) * 3,
                gain_hi=(1.0,) * 3,
            )
