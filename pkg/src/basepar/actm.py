"""Asymmetric cell-transmission model of a metered highway stretch.

The mainline is divided into cells; each cell holds at most one on-ramp
(upstream of its off-ramp, if any).  Per simulation cycle the model computes,
in this order, on-ramp inflows ``e``, mainline outflows ``o`` and off-ramp
outflows ``s``, then advances the per-cell vehicle counts ``n`` and the
per-on-ramp queues ``q``.  The ordering matters only because the mainline
outflow of cell ``i`` reads the on-ramp inflow of cell ``i+1``; there is no
other intra-step coupling.

UNIT CONVENTIONS
----------------
* All flows (``e``, ``o``, ``s``, demands, metering rates) are vehicles per
  simulation cycle.
* Vehicle counts (``n``, ``q``) are vehicles and may be fractional.
* Lengths are metres, the cycle length is seconds, speeds are m/s.
* Densities are vehicles per metre per lane.
* Stage costs are vehicle-hours: occupancy time is ``(cycle/3600) * sum(n+q)``
  and the travelled-distance reward is expressed as the free-flow time
  equivalent of the distance covered by exiting flows, which keeps the
  weighting factor dimensionless.

Boundary treatment: the upstream mainstream demand is admitted into cell 1
subject to that cell's vacant-capacity term (same form as the interior
receiving term); the last cell discharges freely (no downstream term).
Unserved mainstream demand is dropped, so conservation accounting uses the
*admitted* upstream inflow reported in :class:`FlowVector`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

__all__ = [
    "STATE_TOL",
    "TopologyError",
    "ModelConsistencyError",
    "CellParams",
    "NetworkParams",
    "NetworkState",
    "ExogenousInput",
    "FlowVector",
    "StageCost",
    "RolloutResult",
    "compute_onramp_inflow",
    "compute_mainline_outflow",
    "compute_offramp_outflow",
    "stage_cost",
    "step",
    "rollout",
    "density",
]

# Absolute per-component tolerance for post-step state checks.
STATE_TOL = 1e-9


class TopologyError(ValueError):
    """Vector lengths do not match the network topology."""


class ModelConsistencyError(RuntimeError):
    """A state update left the physically admissible region, which signals a
    flow-formula bug rather than bad input."""


@dataclass(frozen=True)
class CellParams:
    """Static parameters of one mainline cell."""

    length: float                 # metres
    capacity_nbar: float          # max vehicles in the cell
    sat_mainline_obar: float      # max mainline outflow, veh/cycle
    sat_offramp_sbar: float       # max off-ramp outflow, veh/cycle
    split_beta: float = 0.0       # off-ramp split fraction, 0 if no off-ramp
    blend_alpha: float = 0.0      # on-ramp blending fraction, 0 if no on-ramp
    eta_moving: float = 1.0       # moving-regime exit fraction per cycle
    eta_idling: float = 1.0       # vacant-capacity receiving fraction per cycle
    xi: float = 1.0               # vacant-capacity share available to the on-ramp
    has_onramp: bool = False
    has_offramp: bool = False
    metered: bool = False
    allow_beta_one: bool = False  # opt-in for the split_beta == 1 boundary branch

    def __post_init__(self) -> None:
        if self.length <= 0:
            raise ValueError("cell length must be positive")
        if self.capacity_nbar <= 0:
            raise ValueError("capacity_nbar must be positive")
        if self.sat_mainline_obar < 0 or self.sat_offramp_sbar < 0:
            raise ValueError("saturation flows must be nonnegative")
        for name in ("split_beta", "blend_alpha", "eta_moving", "eta_idling", "xi"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.split_beta >= 1.0 and not self.allow_beta_one:
            raise ValueError("split_beta == 1 requires allow_beta_one=True")
        if self.metered and not self.has_onramp:
            raise ValueError("a metered cell must have an on-ramp")
        if self.has_offramp and self.split_beta == 0.0:
            raise ValueError("a cell with an off-ramp needs split_beta > 0")
        if not self.has_offramp and self.split_beta != 0.0:
            raise ValueError("split_beta must be 0 for cells without an off-ramp")
        if not self.has_onramp and self.blend_alpha != 0.0:
            raise ValueError("blend_alpha must be 0 for cells without an on-ramp")


@dataclass(frozen=True)
class NetworkParams:
    """Ordered cell parameters plus network-wide constants."""

    cells: tuple[CellParams, ...]
    sample_cycle_s: float         # simulation/control cycle, seconds
    rho_crit: float               # critical density, veh/m/lane
    lanes: int = 1
    free_flow_mps: float = 28.0   # used to express travelled distance in time units

    # Derived topology indices, filled in __post_init__.
    onramp_cells: tuple[int, ...] = field(init=False, repr=False)
    metered_cells: tuple[int, ...] = field(init=False, repr=False)
    offramp_cells: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not self.cells:
            raise ValueError("network needs at least one cell")
        if self.sample_cycle_s <= 0:
            raise ValueError("sample_cycle_s must be positive")
        if self.rho_crit <= 0:
            raise ValueError("rho_crit must be positive")
        if self.lanes < 1:
            raise ValueError("lanes must be at least 1")
        if self.free_flow_mps <= 0:
            raise ValueError("free_flow_mps must be positive")
        object.__setattr__(self, "cells", tuple(self.cells))
        object.__setattr__(
            self, "onramp_cells", tuple(i for i, c in enumerate(self.cells) if c.has_onramp)
        )
        object.__setattr__(
            self, "metered_cells", tuple(i for i, c in enumerate(self.cells) if c.metered)
        )
        object.__setattr__(
            self, "offramp_cells", tuple(i for i, c in enumerate(self.cells) if c.has_offramp)
        )

    @property
    def n_cells(self) -> int:
        return len(self.cells)


@dataclass(frozen=True, slots=True)
class NetworkState:
    """Vehicle counts per cell and queue lengths per on-ramp at one step."""

    n: tuple[float, ...]          # vehicles per cell
    q: tuple[float, ...]          # vehicles queued, aligned with params.onramp_cells
    step: int = 0

    def validate(self, params: NetworkParams, tol: float = STATE_TOL) -> None:
        if len(self.n) != params.n_cells:
            raise TopologyError(
                f"state has {len(self.n)} cells, network has {params.n_cells}"
            )
        if len(self.q) != len(params.onramp_cells):
            raise TopologyError(
                f"state has {len(self.q)} queues, network has {len(params.onramp_cells)} on-ramps"
            )
        for i, (ni, cell) in enumerate(zip(self.n, params.cells)):
            if ni < -tol or ni > cell.capacity_nbar + tol:
                raise ValueError(f"n[{i}]={ni} outside [0, {cell.capacity_nbar}]")
        for j, qj in enumerate(self.q):
            if qj < -tol:
                raise ValueError(f"q[{j}]={qj} negative")


@dataclass(frozen=True, slots=True)
class ExogenousInput:
    """Uncontrolled inflow demands for one step, veh/cycle."""

    mainstream_demand: float
    ramp_demands: tuple[float, ...]  # aligned with params.onramp_cells

    def __post_init__(self) -> None:
        if self.mainstream_demand < 0 or any(d < 0 for d in self.ramp_demands):
            raise ValueError("demands must be nonnegative")


@dataclass(frozen=True, slots=True)
class FlowVector:
    """Realized flows of one step, veh/cycle.

    ``mainstream_in`` is the *admitted* upstream inflow into the first cell;
    entries of ``e``/``s`` are zero for cells without the corresponding ramp.
    """

    e: tuple[float, ...]
    o: tuple[float, ...]
    s: tuple[float, ...]
    mainstream_in: float


@dataclass(frozen=True, slots=True)
class StageCost:
    """Cost contributions of one step."""

    tt: float          # occupancy travel time, vehicle-hours
    td_h: float        # travelled distance as free-flow time equivalent, vehicle-hours
    j: float           # tt - gamma * td_h, hours
    throughput: float  # vehicles exiting the network this step


@dataclass(frozen=True)
class RolloutResult:
    """Trajectory produced by :func:`rollout`."""

    states: tuple[NetworkState, ...]   # length horizon + 1, includes the initial state
    flows: tuple[FlowVector, ...]      # length horizon
    costs: tuple[StageCost, ...]       # length horizon
    total_cost: float                  # sum of per-step j


def _metering_by_cell(
    metering: Optional[Sequence[float]], params: NetworkParams
) -> dict[int, float]:
    """Map a per-metered-ramp metering vector onto cell indices."""
    if metering is None:
        return {}
    if len(metering) != len(params.metered_cells):
        raise TopologyError(
            f"metering vector has {len(metering)} entries, "
            f"network has {len(params.metered_cells)} metered ramps"
        )
    for m in metering:
        if m < 0:
            raise ValueError("metering rates must be nonnegative")
    return dict(zip(params.metered_cells, metering))


def compute_onramp_inflow(
    state: NetworkState,
    inp: ExogenousInput,
    metering: Optional[Sequence[float]],
    params: NetworkParams,
) -> tuple[float, ...]:
    """On-ramp inflow per cell.

    Unmetered ramps admit ``min(queue + demand, xi * vacant capacity)``; a
    metered ramp additionally caps the inflow at its metering rate.  Cells
    without an on-ramp get 0.  ``metering`` is ordered like
    ``params.metered_cells`` (pass None to leave every ramp unmetered).
    """
    mu = _metering_by_cell(metering, params)
    demands = dict(zip(params.onramp_cells, inp.ramp_demands))
    e = []
    for i, cell in enumerate(params.cells):
        if not cell.has_onramp:
            e.append(0.0)
            continue
        supply = state.q[params.onramp_cells.index(i)] + demands[i]
        space = cell.xi * (cell.capacity_nbar - state.n[i])
        ei = min(supply, space)
        if i in mu:
            ei = min(ei, mu[i])
        e.append(max(ei, 0.0))
    return tuple(e)


def compute_mainline_outflow(
    state: NetworkState, e: Sequence[float], params: NetworkParams
) -> tuple[float, ...]:
    """Mainline outflow per cell: minimum of the sending term, the downstream
    receiving term (skipped for the last cell), the saturation flow and the
    off-ramp-coupled bound (skipped when the cell has no off-ramp)."""
    o = []
    last = params.n_cells - 1
    for i, cell in enumerate(params.cells):
        terms = [
            (1.0 - cell.split_beta) * (state.n[i] + cell.blend_alpha * e[i]) * cell.eta_moving,
            cell.sat_mainline_obar,
        ]
        if i < last:
            nxt = params.cells[i + 1]
            terms.append(
                (nxt.capacity_nbar - state.n[i + 1] - nxt.blend_alpha * e[i + 1])
                * nxt.eta_idling
            )
        if 0.0 < cell.split_beta < 1.0:
            terms.append((1.0 - cell.split_beta) / cell.split_beta * cell.sat_offramp_sbar)
        o.append(max(min(terms), 0.0))
    return tuple(o)


def compute_offramp_outflow(
    o: Sequence[float],
    params: NetworkParams,
    state: NetworkState,
    e: Sequence[float],
) -> tuple[float, ...]:
    """Off-ramp outflow per cell, proportional to the mainline outflow; the
    split-everything boundary case discharges the moving flow directly,
    capped at the off-ramp saturation."""
    s = []
    for i, cell in enumerate(params.cells):
        if not cell.has_offramp:
            s.append(0.0)
        elif cell.split_beta < 1.0:
            s.append(cell.split_beta / (1.0 - cell.split_beta) * o[i])
        else:
            moving = (state.n[i] + cell.blend_alpha * e[i]) * cell.eta_moving
            s.append(min(cell.sat_offramp_sbar, moving))
    return tuple(s)


def stage_cost(
    flows: FlowVector,
    state: NetworkState,
    params: NetworkParams,
    gamma: float,
) -> StageCost:
    """Stage cost of one step evaluated on the pre-step occupancy.

    Travel time is occupancy over the cycle; travelled distance counts each
    exiting flow across its cell length, converted to vehicle-hours at free
    flow so the weight ``gamma`` stays dimensionless.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    cycle_h = params.sample_cycle_s / 3600.0
    tt = cycle_h * (sum(state.n) + sum(state.q))
    dist = sum(
        (flows.o[i] + flows.s[i]) * cell.length for i, cell in enumerate(params.cells)
    )
    td_h = dist / (params.free_flow_mps * 3600.0)
    throughput = flows.o[-1] + sum(flows.s)
    return StageCost(tt=tt, td_h=td_h, j=tt - gamma * td_h, throughput=throughput)


def step(
    state: NetworkState,
    inp: ExogenousInput,
    metering: Optional[Sequence[float]],
    params: NetworkParams,
    gamma: float = 0.8,
) -> tuple[NetworkState, FlowVector, StageCost]:
    """Advance the network by one cycle.

    Returns the successor state, the realized flows and the stage cost of the
    step (computed from the pre-step occupancy).  Raises
    :class:`ModelConsistencyError` if the update leaves the admissible state
    region by more than ``STATE_TOL``.
    """
    state.validate(params)
    e = compute_onramp_inflow(state, inp, metering, params)
    o = compute_mainline_outflow(state, e, params)
    s = compute_offramp_outflow(o, params, state, e)

    first = params.cells[0]
    space0 = (first.capacity_nbar - state.n[0] - first.blend_alpha * e[0]) * first.eta_idling
    mainstream_in = max(min(inp.mainstream_demand, space0), 0.0)

    n_next = []
    for i, cell in enumerate(params.cells):
        inflow = mainstream_in if i == 0 else o[i - 1]
        ni = state.n[i] + inflow + e[i] - o[i] - s[i]
        if ni < -STATE_TOL or ni > cell.capacity_nbar + STATE_TOL:
            raise ModelConsistencyError(
                f"cell {i}: n={ni} outside [0, {cell.capacity_nbar}] after update"
            )
        n_next.append(min(max(ni, 0.0), cell.capacity_nbar))

    demands = dict(zip(params.onramp_cells, inp.ramp_demands))
    q_next = []
    for j, i in enumerate(params.onramp_cells):
        qi = state.q[j] + demands[i] - e[i]
        if qi < -STATE_TOL:
            raise ModelConsistencyError(f"on-ramp {i}: queue {qi} negative after update")
        q_next.append(max(qi, 0.0))

    flows = FlowVector(e=e, o=o, s=s, mainstream_in=mainstream_in)
    cost = stage_cost(flows, state, params, gamma)
    nxt = NetworkState(n=tuple(n_next), q=tuple(q_next), step=state.step + 1)
    return nxt, flows, cost


def rollout(
    state: NetworkState,
    inputs: Sequence[ExogenousInput],
    metering_plan: Optional[Sequence[Sequence[float]]],
    params: NetworkParams,
    horizon: int,
    gamma: float = 0.8,
) -> RolloutResult:
    """Apply :func:`step` ``horizon`` times.

    ``inputs`` and ``metering_plan`` shorter than the horizon hold their last
    entry; ``metering_plan`` may be None for a fully unmetered rollout.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if not inputs:
        raise ValueError("at least one exogenous input is required")
    if metering_plan is not None and len(metering_plan) == 0:
        raise ValueError("metering_plan must be None or non-empty")

    states = [state]
    flows: list[FlowVector] = []
    costs: list[StageCost] = []
    for k in range(horizon):
        inp = inputs[k] if k < len(inputs) else inputs[-1]
        mu = None
        if metering_plan is not None:
            mu = metering_plan[k] if k < len(metering_plan) else metering_plan[-1]
        nxt, fl, c = step(states[-1], inp, mu, params, gamma)
        states.append(nxt)
        flows.append(fl)
        costs.append(c)
    total = sum(c.j for c in costs)
    return RolloutResult(
        states=tuple(states), flows=tuple(flows), costs=tuple(costs), total_cost=total
    )


def density(state: NetworkState, params: NetworkParams) -> tuple[float, ...]:
    """Per-cell density in veh/m/lane."""
    return tuple(
        state.n[i] / (cell.length * params.lanes) for i, cell in enumerate(params.cells)
    )
