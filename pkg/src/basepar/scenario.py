"""Scenario definition, closed-loop experiment runner, metrics and outputs.

A scenario bundles the network, its initial condition, piecewise-linear
demand profiles, the demand-measurement noise, the control settings and a
seed.  Scenario files are YAML (schema documented in the README); any
omitted section falls back to the shipped single-lane six-cell case with
three metered on-ramps.

The closed loop is driven step by step: the plant advances under the true
demands while every controller sees a noisy measurement of them (one
symmetric-uniform multiplicative draw per source per step, identical across
controller choices for a given seed, so different control approaches face
exactly the same disturbance stream).  Controllers see the plant state
exactly.

Run logs are line-delimited JSON with a schema header, one record per step
and a trailing summary; plot data is emitted as plain CSV tables.
"""

from __future__ import annotations

import json
import os
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import yaml

from .actm import (
    CellParams,
    ExogenousInput,
    NetworkParams,
    NetworkState,
    step,
)
from .base_controllers import (
    ExplicitAlineaController,
    GenerationRanges,
    ImplicitAnnController,
    MlpParams,
    TrainConfig,
    TrainResult,
    generate_training_data,
    load_mlp_params,
    train_mlp,
)
from .orchestrator import (
    ArchitectureConfig,
    BaseParallelController,
    ParallelCell,
    ParallelControllerSpec,
)
from .parallel import (
    CONVENTIONAL,
    PARAMETERIZED,
    MpcProblem,
    OptimizerConfig,
    fallback_start,
    make_shift_warm_starts,
    solve_budgeted,
)

__all__ = [
    "ScenarioError",
    "DemandProfile",
    "NoiseModel",
    "ControlSettings",
    "AnnSettings",
    "ScenarioConfig",
    "MetricsSummary",
    "StepRecord",
    "RunLog",
    "CONTROLLER_KEYS",
    "CONTROLLER_LABELS",
    "default_scenario",
    "default_scenario_path",
    "load_scenario",
    "perturb_demand",
    "train_networks",
    "build_architecture",
    "run_experiment",
    "summarize",
    "write_runlog",
    "read_runlog",
    "emit_plot_data",
]

RUNLOG_SCHEMA = "runlog/1"
SCENARIO_SCHEMA = "scenario/1"

CONTROLLER_KEYS = ("alinea", "ann", "cmpc1", "cmpc2", "pmpc1", "pmpc2", "architecture")
CONTROLLER_LABELS = {
    "alinea": "ALINEA",
    "ann": "ANN",
    "cmpc1": "CMPC(1)",
    "cmpc2": "CMPC(2)",
    "pmpc1": "PMPC(1)",
    "pmpc2": "PMPC(2)",
    "architecture": "Base-parallel architecture",
}


class ScenarioError(ValueError):
    """Scenario file violates the schema; the message names the field."""


# ---------------------------------------------------------------------------
# Scenario data
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DemandProfile:
    """Piecewise-linear demand over simulation steps, veh/cycle."""

    breakpoints: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if not self.breakpoints:
            raise ValueError("a demand profile needs at least one breakpoint")
        times = [t for t, _ in self.breakpoints]
        if any(b > a for a, b in zip(times[1:], times)):
            raise ValueError("breakpoints must be time-sorted")
        if any(v < 0 for _, v in self.breakpoints):
            raise ValueError("demand values must be nonnegative")

    def value(self, step_index: float) -> float:
        xs = [t for t, _ in self.breakpoints]
        ys = [v for _, v in self.breakpoints]
        return float(np.interp(step_index, xs, ys))


@dataclass(frozen=True)
class NoiseModel:
    """Symmetric-uniform multiplicative demand-measurement noise."""

    fraction: float = 0.10
    distribution: str = "uniform"
    seed: Optional[int] = None  # defaults to the scenario seed

    def __post_init__(self) -> None:
        if not 0.0 <= self.fraction < 1.0:
            raise ValueError("noise fraction must lie in [0, 1)")
        if self.distribution != "uniform":
            raise ValueError("only the uniform distribution is supported")


@dataclass(frozen=True)
class ControlSettings:
    """Controller and solver parameters shared by every control approach."""

    evaluation_horizon: int = 3
    horizons: tuple[int, int] = (3, 10)          # short and long MPC horizons
    budget_s: float = 2.0
    function_tolerance: float = 1e-3
    step_tolerance: float = 1e-7
    max_iterations: int = 40
    fd_step: float = 1e-6
    termination: str = "best"
    metering_upper: float = 8.0                  # per-ramp rate bound, veh/cycle
    gain_upper: float = 1.0
    alinea_gain: float = 0.016                   # SI units

    def optimizer(
        self,
        budget_override: Optional[float] = None,
        termination_override: Optional[str] = None,
        serial: bool = False,
    ) -> OptimizerConfig:
        budget = self.budget_s if budget_override is None else budget_override
        return OptimizerConfig(
            function_tolerance=self.function_tolerance,
            step_tolerance=self.step_tolerance,
            budget_s=None if serial else budget,
            max_iterations=self.max_iterations,
            termination=termination_override or self.termination,
            fd_step=self.fd_step,
        )


@dataclass(frozen=True)
class AnnSettings:
    """How the gain-network base controller gets its parameters."""

    params_file: Optional[str] = None   # load when set, train from seed otherwise
    sample_count: int = 500
    validation_count: int = 100
    train_seed: Optional[int] = None    # defaults to the scenario seed


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    seed: int
    steps: int
    gamma: float
    network: NetworkParams
    initial_state: NetworkState
    mu_prev_init: tuple[float, ...]     # per metered ramp
    o_prev_init: tuple[float, ...]      # upstream inflow per metered ramp at step 0
    mainstream_profile: DemandProfile
    ramp_profiles: tuple[DemandProfile, ...]  # aligned with network.onramp_cells
    noise: NoiseModel
    control: ControlSettings
    ann: AnnSettings

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        nr = len(self.network.metered_cells)
        if len(self.mu_prev_init) != nr or len(self.o_prev_init) != nr:
            raise ValueError("initial flow vectors must match the metered ramp count")
        if len(self.ramp_profiles) != len(self.network.onramp_cells):
            raise ValueError("one demand profile per on-ramp is required")
        self.initial_state.validate(self.network)

    def true_demand(self, k: float) -> tuple[float, ...]:
        """Mainstream followed by per-on-ramp demand at step k."""
        return (self.mainstream_profile.value(k),) + tuple(
            p.value(k) for p in self.ramp_profiles
        )


# ---------------------------------------------------------------------------
# Default scenario: single-lane stretch, six cells, three metered on-ramps
# ---------------------------------------------------------------------------

def _default_cells() -> tuple[CellParams, ...]:
    plain = dict(
        length=560.0, capacity_nbar=80.0, sat_mainline_obar=8.0, sat_offramp_sbar=6.0,
        eta_moving=1.0, eta_idling=0.3, xi=0.4,
    )
    ramp = dict(length=560.0, capacity_nbar=80.0, sat_mainline_obar=8.0,
                sat_offramp_sbar=6.0, eta_idling=0.3, xi=0.4,
                has_onramp=True, has_offramp=True, metered=True)
    return (
        CellParams(**plain),
        CellParams(split_beta=0.35, blend_alpha=0.6, eta_moving=0.8, **ramp),
        CellParams(**plain),
        CellParams(split_beta=0.62, blend_alpha=0.8, eta_moving=0.65, **ramp),
        CellParams(split_beta=0.43, blend_alpha=0.7, eta_moving=0.8, **ramp),
        CellParams(**plain),
    )


def default_scenario(seed: int = 20260810) -> ScenarioConfig:
    """The shipped case: six 560 m cells, metered on-ramps at cells 2, 4, 5.

    The demand profiles are editable stand-ins: a sustained mainstream peak
    with staggered ramp peaks, sized so the off-ramp-heavy fourth cell
    becomes a genuine bottleneck during the rush.  The sixth cell starts
    empty (no initial count is specified for it).
    """
    network = NetworkParams(
        cells=_default_cells(),
        sample_cycle_s=20.0,
        rho_crit=0.0335,
        lanes=1,
        free_flow_mps=28.0,
    )
    return ScenarioConfig(
        name="default-6cell",
        seed=seed,
        steps=180,
        gamma=0.8,
        network=network,
        initial_state=NetworkState(
            n=(32.6, 36.2, 5.1, 25.3, 3.9, 0.0), q=(5.5, 9.6, 1.6), step=0
        ),
        mu_prev_init=(0.5, 0.2, 0.4),
        o_prev_init=(3.8, 3.2, 0.6),
        mainstream_profile=DemandProfile(
            breakpoints=((0, 5.0), (10, 8.0), (120, 8.0), (150, 1.5), (180, 1.5))
        ),
        ramp_profiles=(
            DemandProfile(breakpoints=((0, 1.0), (20, 4.5), (110, 4.5), (140, 0.5), (180, 0.5))),
            DemandProfile(breakpoints=((0, 0.8), (30, 4.5), (115, 4.5), (145, 0.5), (180, 0.5))),
            DemandProfile(breakpoints=((0, 0.6), (40, 3.0), (120, 3.0), (150, 0.4), (180, 0.4))),
        ),
        noise=NoiseModel(),
        control=ControlSettings(),
        ann=AnnSettings(),
    )


def default_scenario_path() -> str:
    """Path of the shipped default scenario file."""
    return os.path.join(os.path.dirname(__file__), "scenarios", "default.yaml")


# ---------------------------------------------------------------------------
# Scenario loading
# ---------------------------------------------------------------------------

def _require(mapping: dict, key: str, context: str):
    if key not in mapping:
        raise ScenarioError(f"missing required field '{context}{key}'")
    return mapping[key]


def _get_num(mapping: dict, key: str, context: str, default=None) -> float:
    if key not in mapping:
        if default is None:
            raise ScenarioError(f"missing required field '{context}{key}'")
        return default
    v = mapping[key]
    if not isinstance(v, (int, float)) or isinstance(v, bool):
        raise ScenarioError(f"field '{context}{key}' must be a number, got {v!r}")
    return float(v)


def _parse_cells(raw_cells, context: str) -> tuple[CellParams, ...]:
    if not isinstance(raw_cells, list) or not raw_cells:
        raise ScenarioError(f"field '{context}cells' must be a non-empty list")
    cells = []
    for i, raw in enumerate(raw_cells):
        ctx = f"{context}cells[{i}]."
        if not isinstance(raw, dict):
            raise ScenarioError(f"field '{context}cells[{i}]' must be a mapping")
        known = {
            "length", "capacity_nbar", "sat_mainline_obar", "sat_offramp_sbar",
            "split_beta", "blend_alpha", "eta_moving", "eta_idling", "xi",
            "has_onramp", "has_offramp", "metered", "allow_beta_one",
        }
        unknown = set(raw) - known
        if unknown:
            raise ScenarioError(f"unknown field(s) {sorted(unknown)} in '{context}cells[{i}]'")
        try:
            cells.append(CellParams(
                length=_get_num(raw, "length", ctx),
                capacity_nbar=_get_num(raw, "capacity_nbar", ctx),
                sat_mainline_obar=_get_num(raw, "sat_mainline_obar", ctx),
                sat_offramp_sbar=_get_num(raw, "sat_offramp_sbar", ctx),
                split_beta=_get_num(raw, "split_beta", ctx, 0.0),
                blend_alpha=_get_num(raw, "blend_alpha", ctx, 0.0),
                eta_moving=_get_num(raw, "eta_moving", ctx, 1.0),
                eta_idling=_get_num(raw, "eta_idling", ctx, 1.0),
                xi=_get_num(raw, "xi", ctx, 1.0),
                has_onramp=bool(raw.get("has_onramp", False)),
                has_offramp=bool(raw.get("has_offramp", False)),
                metered=bool(raw.get("metered", False)),
                allow_beta_one=bool(raw.get("allow_beta_one", False)),
            ))
        except ValueError as exc:
            raise ScenarioError(f"invalid cell '{context}cells[{i}]': {exc}") from exc
    return tuple(cells)


def _cell_keyed_vector(
    raw: dict, metered_or_onramp: Sequence[int], context: str
) -> tuple[float, ...]:
    """Read a {1-based cell number: value} mapping aligned to given cells."""
    if not isinstance(raw, dict):
        raise ScenarioError(f"field '{context}' must map cell numbers to values")
    values = []
    for i in metered_or_onramp:
        key = i + 1
        if key not in raw and str(key) not in raw:
            raise ScenarioError(f"missing entry for cell {key} in '{context}'")
        values.append(float(raw.get(key, raw.get(str(key)))))
    extra = {int(k) for k in raw} - {i + 1 for i in metered_or_onramp}
    if extra:
        raise ScenarioError(f"entries for non-matching cells {sorted(extra)} in '{context}'")
    return tuple(values)


def _parse_profile(raw, context: str) -> DemandProfile:
    if not isinstance(raw, dict) or "breakpoints" not in raw:
        raise ScenarioError(f"field '{context}' must carry a 'breakpoints' list")
    bps = raw["breakpoints"]
    if not isinstance(bps, list) or any(
        not isinstance(p, (list, tuple)) or len(p) != 2 for p in bps
    ):
        raise ScenarioError(f"field '{context}.breakpoints' must be a list of [step, value] pairs")
    try:
        return DemandProfile(breakpoints=tuple((float(t), float(v)) for t, v in bps))
    except ValueError as exc:
        raise ScenarioError(f"invalid '{context}.breakpoints': {exc}") from exc


def load_scenario(path) -> ScenarioConfig:
    """Parse and validate a scenario file, filling omitted sections from the
    shipped default."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ScenarioError(f"cannot parse {path}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ScenarioError("scenario file must hold a mapping at the top level")
    schema = raw.get("schema", SCENARIO_SCHEMA)
    if schema != SCENARIO_SCHEMA:
        raise ScenarioError(f"unsupported schema {schema!r}, expected {SCENARIO_SCHEMA!r}")

    base = default_scenario()
    name = raw.get("name", base.name)
    seed = int(raw.get("seed", base.seed))
    steps = int(raw.get("steps", base.steps))
    gamma = _get_num(raw, "gamma", "", base.gamma)

    if "network" in raw:
        net_raw = raw["network"]
        if not isinstance(net_raw, dict):
            raise ScenarioError("field 'network' must be a mapping")
        cells = (
            _parse_cells(net_raw["cells"], "network.")
            if "cells" in net_raw
            else base.network.cells
        )
        try:
            network = NetworkParams(
                cells=cells,
                sample_cycle_s=_get_num(net_raw, "sample_cycle_s", "network.",
                                        base.network.sample_cycle_s),
                rho_crit=_get_num(net_raw, "rho_crit", "network.", base.network.rho_crit),
                lanes=int(net_raw.get("lanes", base.network.lanes)),
                free_flow_mps=_get_num(net_raw, "free_flow_mps", "network.",
                                       base.network.free_flow_mps),
            )
        except ValueError as exc:
            raise ScenarioError(f"invalid 'network': {exc}") from exc
    else:
        network = base.network

    if "initial_state" in raw:
        st = raw["initial_state"]
        n = _require(st, "n", "initial_state.")
        if not isinstance(n, list) or len(n) != network.n_cells:
            raise ScenarioError(
                f"field 'initial_state.n' must list {network.n_cells} cell counts"
            )
        q = _cell_keyed_vector(
            _require(st, "q", "initial_state."), network.onramp_cells, "initial_state.q"
        )
        initial_state = NetworkState(n=tuple(float(v) for v in n), q=q, step=0)
    else:
        initial_state = base.initial_state

    if "initial_flows" in raw:
        fl = raw["initial_flows"]
        mu_prev = _cell_keyed_vector(
            _require(fl, "mu_prev", "initial_flows."),
            network.metered_cells, "initial_flows.mu_prev",
        )
        o_prev = _cell_keyed_vector(
            _require(fl, "o_prev", "initial_flows."),
            network.metered_cells, "initial_flows.o_prev",
        )
    else:
        mu_prev, o_prev = base.mu_prev_init, base.o_prev_init

    if "demand" in raw:
        dm = raw["demand"]
        mainstream = _parse_profile(_require(dm, "mainstream", "demand."), "demand.mainstream")
        ramps_raw = _require(dm, "onramps", "demand.")
        profiles = []
        for i in network.onramp_cells:
            key = i + 1
            if key not in ramps_raw and str(key) not in ramps_raw:
                raise ScenarioError(f"missing profile for on-ramp cell {key} in 'demand.onramps'")
            profiles.append(
                _parse_profile(
                    ramps_raw.get(key, ramps_raw.get(str(key))), f"demand.onramps.{key}"
                )
            )
        ramp_profiles = tuple(profiles)
    else:
        mainstream, ramp_profiles = base.mainstream_profile, base.ramp_profiles

    if "noise" in raw:
        nz = raw["noise"]
        try:
            noise = NoiseModel(
                fraction=_get_num(nz, "fraction", "noise.", base.noise.fraction),
                seed=None if nz.get("seed") is None else int(nz["seed"]),
            )
        except ValueError as exc:
            raise ScenarioError(f"invalid 'noise': {exc}") from exc
    else:
        noise = base.noise

    if "control" in raw:
        ct = raw["control"]
        horizons = ct.get("horizons", list(base.control.horizons))
        if not isinstance(horizons, list) or len(horizons) != 2:
            raise ScenarioError("field 'control.horizons' must list two horizons")
        try:
            control = ControlSettings(
                evaluation_horizon=int(ct.get("evaluation_horizon",
                                              base.control.evaluation_horizon)),
                horizons=(int(horizons[0]), int(horizons[1])),
                budget_s=_get_num(ct, "budget_s", "control.", base.control.budget_s),
                function_tolerance=_get_num(ct, "function_tolerance", "control.",
                                            base.control.function_tolerance),
                step_tolerance=_get_num(ct, "step_tolerance", "control.",
                                        base.control.step_tolerance),
                max_iterations=int(ct.get("max_iterations", base.control.max_iterations)),
                fd_step=_get_num(ct, "fd_step", "control.", base.control.fd_step),
                termination=str(ct.get("termination", base.control.termination)),
                metering_upper=_get_num(ct, "metering_upper", "control.",
                                        base.control.metering_upper),
                gain_upper=_get_num(ct, "gain_upper", "control.", base.control.gain_upper),
                alinea_gain=_get_num(ct, "alinea_gain", "control.", base.control.alinea_gain),
            )
        except ValueError as exc:
            raise ScenarioError(f"invalid 'control': {exc}") from exc
    else:
        control = base.control

    if "ann" in raw:
        an = raw["ann"]
        ann = AnnSettings(
            params_file=an.get("params_file"),
            sample_count=int(an.get("sample_count", base.ann.sample_count)),
            validation_count=int(an.get("validation_count", base.ann.validation_count)),
            train_seed=None if an.get("train_seed") is None else int(an["train_seed"]),
        )
    else:
        ann = base.ann

    known_top = {
        "schema", "name", "seed", "steps", "gamma", "network", "initial_state",
        "initial_flows", "demand", "noise", "control", "ann",
    }
    unknown = set(raw) - known_top
    if unknown:
        raise ScenarioError(f"unknown top-level field(s): {sorted(unknown)}")

    try:
        return ScenarioConfig(
            name=name, seed=seed, steps=steps, gamma=gamma, network=network,
            initial_state=initial_state, mu_prev_init=mu_prev, o_prev_init=o_prev,
            mainstream_profile=mainstream, ramp_profiles=ramp_profiles,
            noise=noise, control=control, ann=ann,
        )
    except ValueError as exc:
        raise ScenarioError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Demand noise
# ---------------------------------------------------------------------------

def perturb_demand(true_demand, noise: NoiseModel, rng: np.random.Generator):
    """Noisy measurement of nonnegative demand: ``d * (1 + u)`` with
    ``u ~ U(-fraction, +fraction)``, clipped at zero.  Draws one variate per
    element, so the stream is reproducible for a fixed generator state."""
    d = np.asarray(true_demand, dtype=float)
    if np.any(d < 0):
        raise ValueError("demands must be nonnegative")
    u = rng.uniform(-noise.fraction, noise.fraction, size=d.shape)
    out = np.maximum(d * (1.0 + u), 0.0)
    return float(out) if np.isscalar(true_demand) else out


# ---------------------------------------------------------------------------
# Network training for the implicit base controller
# ---------------------------------------------------------------------------

def train_networks(
    scenario: ScenarioConfig, seed: Optional[int] = None
) -> tuple[dict[int, MlpParams], dict[int, TrainResult]]:
    """Generate data and train one gain network per metered cell.

    Deterministic for a fixed seed (defaults to the scenario's training
    seed, then the scenario seed).  Returns the parameters plus the full
    training results (validation RMSE, loss history) keyed by cell index.
    """
    if seed is None:
        seed = scenario.ann.train_seed if scenario.ann.train_seed is not None else scenario.seed
    params = scenario.network
    nets: dict[int, MlpParams] = {}
    results: dict[int, TrainResult] = {}
    for cell_index in params.metered_cells:
        cell = params.cells[cell_index]
        ranges = GenerationRanges(
            n=(0.0, cell.capacity_nbar),
            q=(0.0, 30.0),
            d=(0.0, 4.0),
            o_prev=(0.0, cell.sat_mainline_obar),
        )
        rng = np.random.default_rng([seed, cell_index])
        samples = generate_training_data(
            params, cell_index, scenario.ann.sample_count, ranges, rng
        )
        result = train_mlp(
            samples, ranges,
            TrainConfig(seed=seed + cell_index,
                        validation_count=scenario.ann.validation_count),
        )
        nets[cell_index] = result.params
        results[cell_index] = result
    return nets, results


def _networks_for(scenario: ScenarioConfig, nets: Optional[dict[int, MlpParams]]):
    if nets is not None:
        return nets
    if scenario.ann.params_file:
        # the parameter file is keyed by 1-based cell numbers
        loaded = load_mlp_params(scenario.ann.params_file)
        return {cell - 1: p for cell, p in loaded.items()}
    trained, _ = train_networks(scenario)
    return trained


# ---------------------------------------------------------------------------
# Controllers wired for the closed loop
# ---------------------------------------------------------------------------

def _alinea_controller(scenario: ScenarioConfig) -> ExplicitAlineaController:
    nr = len(scenario.network.metered_cells)
    return ExplicitAlineaController(
        scenario.network,
        gains=(scenario.control.alinea_gain,) * nr,
        mu_init=scenario.mu_prev_init,
        label="ALINEA",
    )


def _ann_controller(scenario, nets) -> ImplicitAnnController:
    return ImplicitAnnController(
        scenario.network, nets, mu_init=scenario.mu_prev_init, label="ANN",
        gain_range=(0.0, scenario.control.gain_upper),
    )


def build_architecture(
    scenario: ScenarioConfig,
    nets: Optional[dict[int, MlpParams]] = None,
    serial: bool = False,
    budget_override: Optional[float] = None,
    termination: Optional[str] = None,
) -> BaseParallelController:
    """Full case-study architecture: the explicit base seeds two conventional
    MPC controllers, the implicit base seeds two parameterized ones."""
    nets = _networks_for(scenario, nets)
    ctl = scenario.control
    nr = len(scenario.network.metered_cells)
    h1, h2 = ctl.horizons
    config = ArchitectureConfig(
        params=scenario.network,
        cells=[
            ParallelCell(
                base=_alinea_controller(scenario),
                controllers=(
                    ParallelControllerSpec("CMPC(1)", CONVENTIONAL, h1),
                    ParallelControllerSpec("CMPC(2)", CONVENTIONAL, h2),
                ),
            ),
            ParallelCell(
                base=_ann_controller(scenario, nets),
                controllers=(
                    ParallelControllerSpec("PMPC(1)", PARAMETERIZED, h1),
                    ParallelControllerSpec("PMPC(2)", PARAMETERIZED, h2),
                ),
            ),
        ],
        evaluation_horizon=ctl.evaluation_horizon,
        gamma=scenario.gamma,
        optimizer=ctl.optimizer(budget_override, termination, serial=serial),
        metering_lo=(0.0,) * nr,
        metering_hi=(ctl.metering_upper,) * nr,
        gain_lo=(0.0,) * nr,
        gain_hi=(ctl.gain_upper,) * nr,
        serial=serial,
    )
    return BaseParallelController(config, mu_init=scenario.mu_prev_init)


class _BaseOnlyDriver:
    """Standalone base controller: its own output is applied every step."""

    def __init__(self, ctrl):
        self.ctrl = ctrl
        self.label = ctrl.label

    def decide(self, state, measured, o_prev):
        mu, _ = self.ctrl.advance(state, measured, o_prev)
        return mu, self.label, (), (), ()


class _StandaloneMpcDriver:
    """One budgeted MPC controller in closed loop.

    Starting points are the hold-previous-rates fallback plus the shift
    starts built from this controller's own solution history.
    """

    def __init__(self, scenario: ScenarioConfig, label: str, kind: str,
                 horizon: int, optimizer: OptimizerConfig):
        self.scenario = scenario
        self.label = label
        self.kind = kind
        self.horizon = horizon
        self.optimizer = optimizer
        self.mu_prev = tuple(scenario.mu_prev_init)
        self.history: list[np.ndarray] = []
        nr = len(scenario.network.metered_cells)
        if kind == CONVENTIONAL:
            self.lo = (0.0,) * (nr * horizon)
            self.hi = (scenario.control.metering_upper,) * (nr * horizon)
        else:
            self.lo = (0.0,) * nr
            self.hi = (scenario.control.gain_upper,) * nr

    def decide(self, state, measured, o_prev):
        problem = MpcProblem(
            kind=self.kind, horizon=self.horizon, params=self.scenario.network,
            initial_state=state, demand_forecast=(measured,), mu_prev=self.mu_prev,
            bounds_lo=self.lo, bounds_hi=self.hi, gamma=self.scenario.gamma,
            label=self.label,
        )
        starts = [fallback_start(problem)]
        starts.extend(s.ravel() for s in make_shift_warm_starts(self.history))
        result = solve_budgeted(problem, starts, self.optimizer)
        best = result.best
        applied = tuple(best.metering[0])
        self.mu_prev = applied
        shape = (self.horizon, -1) if self.kind == CONVENTIONAL else (1, -1)
        self.history.append(np.asarray(best.decision, dtype=float).reshape(shape))
        stats = ((self.label, result.elapsed_s, best.iterations, best.converged),)
        return applied, self.label, (self.label,), (best.cost,), stats


class _ArchitectureDriver:
    def __init__(self, arch: BaseParallelController):
        self.arch = arch
        self.label = CONTROLLER_LABELS["architecture"]

    def decide(self, state, measured, o_prev):
        record, evaluation = self.arch.control_step(state, measured, o_prev)
        return (
            record.applied,
            record.winner,
            record.candidate_labels,
            record.candidate_costs,
            record.solver_stats,
        )


def _build_driver(scenario, controller_choice, serial, nets,
                  budget_override, termination):
    key = controller_choice.lower()
    if key not in CONTROLLER_KEYS:
        raise ValueError(
            f"unknown controller {controller_choice!r}; pick one of {CONTROLLER_KEYS}"
        )
    if key == "alinea":
        return _BaseOnlyDriver(_alinea_controller(scenario))
    if key == "ann":
        return _BaseOnlyDriver(_ann_controller(scenario, _networks_for(scenario, nets)))
    if key == "architecture":
        return _ArchitectureDriver(
            build_architecture(scenario, nets, serial, budget_override, termination)
        )
    h1, h2 = scenario.control.horizons
    spec = {
        "cmpc1": (CONVENTIONAL, h1),
        "cmpc2": (CONVENTIONAL, h2),
        "pmpc1": (PARAMETERIZED, h1),
        "pmpc2": (PARAMETERIZED, h2),
    }[key]
    optimizer = scenario.control.optimizer(budget_override, termination, serial=serial)
    return _StandaloneMpcDriver(scenario, CONTROLLER_LABELS[key], spec[0], spec[1], optimizer)


# ---------------------------------------------------------------------------
# Closed-loop experiment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StepRecord:
    """Everything logged for one closed-loop step (state is pre-step)."""

    step: int
    n: tuple[float, ...]
    q: tuple[float, ...]
    true_demand: tuple[float, ...]       # mainstream first, then on-ramps
    measured_demand: tuple[float, ...]
    applied: tuple[float, ...]
    flow_e: tuple[float, ...]
    flow_o: tuple[float, ...]
    flow_s: tuple[float, ...]
    mainstream_in: float
    cost_tt: float
    cost_td_h: float
    cost_j: float
    throughput: float
    winner: str
    candidate_labels: tuple[str, ...]
    candidate_costs: tuple[float, ...]
    solver_stats: tuple[tuple[str, float, int, bool], ...]
    control_elapsed_s: float


@dataclass(frozen=True)
class MetricsSummary:
    j_total: float                       # hours
    n_total: float                       # vehicles that exited the network
    avg_cost_per_vehicle: Optional[float]  # seconds; None when nothing exited
    win_counts: tuple[tuple[str, int], ...]


@dataclass
class RunLog:
    scenario_name: str
    controller: str
    seed: int
    sample_cycle_s: float
    cell_lengths_m: tuple[float, ...]
    lanes: int
    onramp_cells: tuple[int, ...]   # 1-based cell numbers carrying an on-ramp
    records: list[StepRecord] = field(default_factory=list)
    summary: Optional[MetricsSummary] = None
    schema: str = RUNLOG_SCHEMA


def run_experiment(
    scenario: ScenarioConfig,
    controller_choice: str,
    serial: bool = False,
    nets: Optional[dict[int, MlpParams]] = None,
    budget_override: Optional[float] = None,
    termination: Optional[str] = None,
    steps_override: Optional[int] = None,
) -> RunLog:
    """Run the closed loop for one control approach.

    The plant advances under the true demand profiles; the controller sees
    the noisy measured demands.  ``controller_choice`` is one of
    ``CONTROLLER_KEYS``.  ``serial=True`` replaces the wall-clock budget by
    the iteration cap, which makes the run fully reproducible for a fixed
    seed.
    """
    params = scenario.network
    steps = scenario.steps if steps_override is None else steps_override
    if steps < 1:
        raise ValueError("step count must be at least 1")
    noise_seed = scenario.noise.seed if scenario.noise.seed is not None else scenario.seed
    rng = np.random.default_rng(noise_seed)
    driver = _build_driver(scenario, controller_choice, serial, nets,
                           budget_override, termination)

    state = scenario.initial_state
    o_prev = tuple(scenario.o_prev_init)
    log = RunLog(
        scenario_name=scenario.name,
        controller=driver.label,
        seed=scenario.seed,
        sample_cycle_s=params.sample_cycle_s,
        cell_lengths_m=tuple(c.length for c in params.cells),
        lanes=params.lanes,
        onramp_cells=tuple(i + 1 for i in params.onramp_cells),
    )
    for k in range(steps):
        d_true = np.asarray(scenario.true_demand(k))
        d_meas = perturb_demand(d_true, scenario.noise, rng)
        true_inp = ExogenousInput(float(d_true[0]), tuple(float(v) for v in d_true[1:]))
        measured = ExogenousInput(float(d_meas[0]), tuple(float(v) for v in d_meas[1:]))

        t0 = time.monotonic()
        applied, winner, labels, costs, stats = driver.decide(state, measured, o_prev)
        elapsed = time.monotonic() - t0
        if serial:
            # reproducible logs: wall-clock observations are not recorded
            elapsed = 0.0
            stats = tuple((lbl, 0.0, iters, conv) for lbl, _, iters, conv in stats)

        nxt, flows, cost = step(state, true_inp, applied, params, scenario.gamma)
        log.records.append(StepRecord(
            step=k,
            n=state.n, q=state.q,
            true_demand=tuple(float(v) for v in d_true),
            measured_demand=tuple(float(v) for v in d_meas),
            applied=tuple(applied),
            flow_e=flows.e, flow_o=flows.o, flow_s=flows.s,
            mainstream_in=flows.mainstream_in,
            cost_tt=cost.tt, cost_td_h=cost.td_h, cost_j=cost.j,
            throughput=cost.throughput,
            winner=winner,
            candidate_labels=tuple(labels),
            candidate_costs=tuple(costs),
            solver_stats=tuple(stats),
            control_elapsed_s=elapsed,
        ))
        o_prev = tuple(
            flows.mainstream_in if i == 0 else flows.o[i - 1]
            for i in params.metered_cells
        )
        state = nxt
    log.summary = summarize(log)
    return log


def summarize(log: RunLog) -> MetricsSummary:
    """Totals of a run: summed stage cost, summed network exits, and the
    average cost per vehicle in seconds (undefined when nothing exited)."""
    if not log.records:
        raise ValueError("cannot summarize an empty run log")
    j_total = sum(r.cost_j for r in log.records)
    n_total = sum(r.throughput for r in log.records)
    avg = j_total * 3600.0 / n_total if n_total > 0 else None
    wins = Counter(r.winner for r in log.records)
    return MetricsSummary(
        j_total=j_total,
        n_total=n_total,
        avg_cost_per_vehicle=avg,
        win_counts=tuple(sorted(wins.items())),
    )


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _json_line(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def write_runlog(log: RunLog, path) -> None:
    """Line-delimited JSON: a header, one record per step, and the summary."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_json_line({
            "schema": log.schema,
            "scenario": log.scenario_name,
            "controller": log.controller,
            "seed": log.seed,
            "sample_cycle_s": log.sample_cycle_s,
            "cell_lengths_m": list(log.cell_lengths_m),
            "lanes": log.lanes,
            "onramp_cells": list(log.onramp_cells),
            "steps": len(log.records),
        }) + "\n")
        for r in log.records:
            fh.write(_json_line({"record": asdict(r)}) + "\n")
        if log.summary is not None:
            fh.write(_json_line({"summary": asdict(log.summary)}) + "\n")


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def read_runlog(path) -> RunLog:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or "schema" not in lines[0]:
        raise ValueError(f"{path} is not a run log (missing header)")
    head = lines[0]
    if head["schema"] != RUNLOG_SCHEMA:
        raise ValueError(f"unsupported run-log schema {head['schema']!r}")
    log = RunLog(
        scenario_name=head["scenario"],
        controller=head["controller"],
        seed=head["seed"],
        sample_cycle_s=head["sample_cycle_s"],
        cell_lengths_m=tuple(head["cell_lengths_m"]),
        lanes=head["lanes"],
        onramp_cells=tuple(head["onramp_cells"]),
    )
    for line in lines[1:]:
        if "record" in line:
            fields = {k: _tuplify(v) for k, v in line["record"].items()}
            log.records.append(StepRecord(**fields))
        elif "summary" in line:
            fields = {k: _tuplify(v) for k, v in line["summary"].items()}
            log.summary = MetricsSummary(**fields)
    if len(log.records) != head["steps"]:
        raise ValueError(
            f"run log holds {len(log.records)} records, header says {head['steps']}"
        )
    return log


# ---------------------------------------------------------------------------
# Plot-data emission
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def emit_plot_data(log: RunLog, out_dir) -> list[str]:
    """Write CSV tables for plotting; returns the created paths.

    Files: per-source demands, per-cell states (count, queue, density), the
    per-candidate evaluation costs, the winner timeline and the cumulative
    cost.  Floats are written with full repr precision so the tables
    round-trip exactly.
    """
    if not log.records:
        raise ValueError("cannot emit plot data for an empty run log")
    os.makedirs(out_dir, exist_ok=True)
    sources = ["mainstream"] + [f"onramp_{c}" for c in log.onramp_cells]
    paths = []

    demand_path = os.path.join(out_dir, "demands.csv")
    with open(demand_path, "w", encoding="utf-8") as fh:
        fh.write("step,t_s,source,demand_veh_per_step\n")
        for r in log.records:
            t_s = r.step * log.sample_cycle_s
            for src, val in zip(sources, r.true_demand):
                fh.write(f"{r.step},{_fmt(t_s)},{src},{_fmt(val)}\n")
    paths.append(demand_path)

    states_path = os.path.join(out_dir, "states.csv")
    queue_pos = {c: j for j, c in enumerate(log.onramp_cells)}
    with open(states_path, "w", encoding="utf-8") as fh:
        fh.write("step,cell,n_veh,q_veh,rho_veh_per_m_per_lane\n")
        for r in log.records:
            for c, n in enumerate(r.n, start=1):
                q_field = _fmt(r.q[queue_pos[c]]) if c in queue_pos else ""
                rho = n / (log.cell_lengths_m[c - 1] * log.lanes)
                fh.write(f"{r.step},{c},{_fmt(n)},{q_field},{_fmt(rho)}\n")
    paths.append(states_path)

    cand_path = os.path.join(out_dir, "candidates.csv")
    with open(cand_path, "w", encoding="utf-8") as fh:
        fh.write("step,candidate,epsilon\n")
        for r in log.records:
            for label, cost in zip(r.candidate_labels, r.candidate_costs):
                fh.write(f"{r.step},{label},{_fmt(cost)}\n")
    paths.append(cand_path)

    winners_path = os.path.join(out_dir, "winners.csv")
    with open(winners_path, "w", encoding="utf-8") as fh:
        fh.write("step,winner\n")
        for r in log.records:
            fh.write(f"{r.step},{r.winner}\n")
    paths.append(winners_path)

    cum_path = os.path.join(out_dir, "cumulative_cost.csv")
    with open(cum_path, "w", encoding="utf-8") as fh:
        fh.write("step,stage_j_h,cumulative_j_h\n")
        total = 0.0
        for r in log.records:
            total += r.cost_j
            fh.write(f"{r.step},{_fmt(r.cost_j)},{_fmt(total)}\n")
    paths.append(cum_path)

    return paths
