"""Offline-tuned ramp-metering controllers and their horizon extension.

Two base controllers are provided.  The explicit one is the classical
integral feedback law that nudges the metering rate proportionally to the
gap between a critical density and the measured density downstream of the
ramp.  The implicit one is a tiny feedforward network (4 inputs, one hidden
layer of 3 units, 1 output) trained per metered cell to emit the feedback
gain itself; the gain is then converted to a metering rate through the same
feedback law.

Training data for the network is generated by treating each metered cell in
isolation with unrestricted leaving flows and solving, per sampled operating
point, the one-dimensional problem of choosing the gain that drives the
cell's expected density closest to the critical density.  That problem is
piecewise linear and monotone in the gain, so it is solved in closed form;
tests audit it against a brute-force grid search.

Both controllers produce a rate for the current step only.  To seed the
online optimizers they are rolled forward through the plant model for the
largest prediction horizon of their cell (:func:`warm_start_rollout`),
yielding a full metering sequence (and, for the implicit controller, the
matching gain sequence).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .actm import ExogenousInput, NetworkParams, NetworkState, density, step

__all__ = [
    "AlineaState",
    "alinea_step",
    "MlpParams",
    "mlp_forward",
    "save_mlp_params",
    "load_mlp_params",
    "GenerationRanges",
    "TrainingSample",
    "optimal_gain_for_sample",
    "generate_training_data",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "train_mlp",
    "ExplicitAlineaController",
    "ImplicitAnnController",
    "WarmStart",
    "warm_start_rollout",
]


# ---------------------------------------------------------------------------
# Explicit feedback law
# ---------------------------------------------------------------------------

@dataclass
class AlineaState:
    """Per-ramp gains and the previous metering rates (veh/cycle)."""

    gains_theta: tuple[float, ...]
    mu_prev: list[float]

    def __post_init__(self) -> None:
        if len(self.gains_theta) != len(self.mu_prev):
            raise ValueError("gains and mu_prev must have the same length")
        if any(m < 0 for m in self.mu_prev):
            raise ValueError("mu_prev must be nonnegative")

    def clone(self) -> "AlineaState":
        return AlineaState(gains_theta=self.gains_theta, mu_prev=list(self.mu_prev))


def alinea_step(
    state: AlineaState, rho: Sequence[float], rho_crit: float
) -> tuple[float, ...]:
    """One metering update: ``mu = max(mu_prev + theta * (rho_crit - rho), 0)``.

    ``rho`` holds the measured density downstream of each metered ramp, in
    the same order as the state vectors.  The state's ``mu_prev`` is updated
    to the returned rates.
    """
    if len(rho) != len(state.mu_prev):
        raise ValueError("density vector length does not match the ramp count")
    if any(r < 0 for r in rho):
        raise ValueError("densities must be nonnegative")
    mu = tuple(
        max(state.mu_prev[i] + state.gains_theta[i] * (rho_crit - rho[i]), 0.0)
        for i in range(len(rho))
    )
    state.mu_prev[:] = mu
    return mu


# ---------------------------------------------------------------------------
# Implicit controller: gain-emitting network
# ---------------------------------------------------------------------------

_ACTIVATIONS = {"tanh": math.tanh}


@dataclass(frozen=True)
class MlpParams:
    """Weights of a 4-3-1 feedforward net plus its input scaling.

    Weights are stored row-major (``hidden_weights[j][k]`` connects input k
    to hidden unit j).  Inputs are scaled to [0, 1] by the recorded
    generation-range bounds before the forward pass; the output is linear.
    """

    hidden_weights: tuple[tuple[float, ...], ...]  # 3 x 4
    hidden_bias: tuple[float, ...]                 # 3
    output_weights: tuple[float, ...]              # 3
    output_bias: float
    input_lo: tuple[float, ...]                    # 4, per-feature scaling offsets
    input_hi: tuple[float, ...]                    # 4
    activation: str = "tanh"

    def __post_init__(self) -> None:
        if len(self.hidden_weights) != 3 or any(len(r) != 4 for r in self.hidden_weights):
            raise ValueError("hidden layer must be exactly 3x4")
        if len(self.hidden_bias) != 3 or len(self.output_weights) != 3:
            raise ValueError("hidden bias and output weights must have 3 entries")
        if len(self.input_lo) != 4 or len(self.input_hi) != 4:
            raise ValueError("input scaling needs 4 entries")
        for lo, hi in zip(self.input_lo, self.input_hi):
            span = hi - lo
            if not math.isfinite(span) or span == 0.0:
                raise ValueError("input scaling spans must be finite and nonzero")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def mlp_forward(params: MlpParams, inputs: Sequence[float]) -> float:
    """Deterministic forward pass; rejects non-finite inputs."""
    if len(inputs) != 4:
        raise ValueError("expected 4 inputs")
    if not all(math.isfinite(v) for v in inputs):
        raise ValueError("inputs must be finite")
    act = _ACTIVATIONS[params.activation]
    xs = [
        (inputs[k] - params.input_lo[k]) / (params.input_hi[k] - params.input_lo[k])
        for k in range(4)
    ]
    y = params.output_bias
    for j in range(3):
        pre = params.hidden_bias[j]
        row = params.hidden_weights[j]
        for k in range(4):
            pre += row[k] * xs[k]
        y += params.output_weights[j] * act(pre)
    return y


def save_mlp_params(path, nets: dict[int, MlpParams]) -> None:
    """Write the per-metered-cell network parameters as structured JSON.

    Cell keys are 1-based cell numbers.  The format is documented in the
    repository README and covered by a round-trip test.
    """
    payload = {
        "schema": "gain-net/1",
        "layout": "row-major",
        "shape": [4, 3, 1],
        "cells": {
            str(cell): {
                "activation": p.activation,
                "hidden_weights": [list(r) for r in p.hidden_weights],
                "hidden_bias": list(p.hidden_bias),
                "output_weights": list(p.output_weights),
                "output_bias": p.output_bias,
                "input_scale_lo": list(p.input_lo),
                "input_scale_hi": list(p.input_hi),
            }
            for cell, p in nets.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_mlp_params(path) -> dict[int, MlpParams]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("schema") != "gain-net/1":
        raise ValueError(f"unsupported parameter file schema: {payload.get('schema')!r}")
    if payload.get("shape") != [4, 3, 1]:
        raise ValueError(f"unsupported network shape: {payload.get('shape')!r}")
    nets = {}
    for cell, p in payload["cells"].items():
        nets[int(cell)] = MlpParams(
            hidden_weights=tuple(tuple(r) for r in p["hidden_weights"]),
            hidden_bias=tuple(p["hidden_bias"]),
            output_weights=tuple(p["output_weights"]),
            output_bias=p["output_bias"],
            input_lo=tuple(p["input_scale_lo"]),
            input_hi=tuple(p["input_scale_hi"]),
            activation=p["activation"],
        )
    return nets


# ---------------------------------------------------------------------------
# Training-data generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GenerationRanges:
    """Sampling ranges for the isolated-cell operating points."""

    n: tuple[float, float] = (0.0, 80.0)        # vehicles in the cell
    q: tuple[float, float] = (0.0, 30.0)        # queued vehicles
    d: tuple[float, float] = (0.0, 4.0)         # ramp demand, veh/cycle
    o_prev: tuple[float, float] = (0.0, 8.0)    # upstream mainline inflow, veh/cycle
    theta_max: float = 1.0                      # gain search bound

    def as_bounds(self) -> tuple[tuple[float, ...], tuple[float, ...]]:
        los = (self.n[0], self.q[0], self.d[0], self.o_prev[0])
        his = (self.n[1], self.q[1], self.d[1], self.o_prev[1])
        return los, his


@dataclass(frozen=True)
class TrainingSample:
    """One isolated-cell operating point with its optimal gain."""

    n: float
    q: float
    d: float
    o_prev: float
    theta: float
    clipped: bool  # True when the density target was not exactly attainable

    @property
    def inputs(self) -> tuple[float, float, float, float]:
        return (self.n, self.q, self.d, self.o_prev)


def optimal_gain_for_sample(
    params: NetworkParams,
    cell_index: int,
    n: float,
    q: float,
    d: float,
    o_prev: float,
    theta_max: float = 1.0,
) -> tuple[float, bool]:
    """Gain that drives the isolated cell's expected next density closest to
    the critical density.

    The cell is treated with unrestricted leaving flows, the ramp inflow uses
    the metered admission rule and the metering rate follows the feedback law
    with a zero previous rate, so the admitted inflow is
    ``min(q + d, xi * (nbar - n), max(theta * (rho_crit - rho), 0))``.  The
    expected count is affine and nondecreasing in the admitted inflow, which
    makes the error piecewise linear in the gain; the minimizer is computed
    directly, breaking ties toward the smallest gain.  Returns the gain and a
    flag marking residual density error (target unattainable inside the
    bounds).
    """
    cell = params.cells[cell_index]
    lanes_len = cell.length * params.lanes
    rho = n / lanes_len
    delta = params.rho_crit - rho
    cap = max(min(q + d, cell.xi * (cell.capacity_nbar - n)), 0.0)
    b = 1.0 - cell.blend_alpha * cell.eta_moving
    target = params.rho_crit * lanes_len
    base_count = n * (1.0 - cell.eta_moving) + o_prev
    e_needed = (target - base_count) / b

    if delta <= 0.0 or cap == 0.0:
        e_star = 0.0
        theta = 0.0
    else:
        e_star = min(max(e_needed, 0.0), cap, theta_max * delta)
        theta = e_star / delta
    residual = abs(base_count + b * e_star - target)
    return theta, residual > 1e-12


def generate_training_data(
    params: NetworkParams,
    cell_index: int,
    count: int = 500,
    ranges: GenerationRanges = GenerationRanges(),
    rng: Optional[np.random.Generator] = None,
) -> list[TrainingSample]:
    """Sample ``count`` operating points uniformly over the generation ranges
    and attach the closed-form optimal gain to each."""
    if count < 1:
        raise ValueError("count must be at least 1")
    if cell_index not in params.metered_cells:
        raise ValueError(f"cell {cell_index} is not metered")
    rng = rng if rng is not None else np.random.default_rng()
    los, his = ranges.as_bounds()
    samples = []
    for _ in range(count):
        u = rng.uniform(los, his)
        theta, clipped = optimal_gain_for_sample(
            params, cell_index, u[0], u[1], u[2], u[3], ranges.theta_max
        )
        samples.append(
            TrainingSample(
                n=float(u[0]), q=float(u[1]), d=float(u[2]), o_prev=float(u[3]),
                theta=theta, clipped=clipped,
            )
        )
    return samples


# ---------------------------------------------------------------------------
# Network training
# ---------------------------------------------------------------------------

class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4000
    learning_rate: float = 0.5
    restarts: int = 10
    seed: int = 0
    validation_count: int = 100
    output_resolve_every: int = 200  # exact output-layer refit cadence, 0 disables


@dataclass(frozen=True)
class TrainResult:
    params: MlpParams
    train_loss: tuple[float, ...]   # per accepted epoch, non-increasing
    validation_rmse: float


def _net_loss_and_grad(w1, b1, w2, b2, xs, ts):
    pre = xs @ w1.T + b1
    h = np.tanh(pre)
    pred = h @ w2 + b2
    err = pred - ts
    loss = float(np.mean(err**2))
    m = len(ts)
    dpred = 2.0 * err / m
    gw2 = h.T @ dpred
    gb2 = float(np.sum(dpred))
    dh = np.outer(dpred, w2) * (1.0 - h**2)
    gw1 = dh.T @ xs
    gb1 = dh.sum(axis=0)
    return loss, (gw1, gb1, gw2, gb2)


def _solve_output_layer(w1, b1, xs, ts):
    """Exact least-squares fit of the linear output layer for fixed hidden
    units.  Minimizes the same loss over a parameter subset, so accepting the
    result can never increase the training loss."""
    h = np.tanh(xs @ w1.T + b1)
    a = np.hstack([h, np.ones((len(xs), 1))])
    try:
        sol, *_ = np.linalg.lstsq(a, ts, rcond=None)
    except np.linalg.LinAlgError as exc:
        raise TrainingDivergedError(f"output-layer solve failed: {exc}") from exc
    return sol[:3], float(sol[3])


def _train_once(xs, ts, cfg: TrainConfig, rng: np.random.Generator):
    # Stump-style init: each hidden unit starts as a steep detector on one
    # randomly chosen input coordinate, centered on a random training point
    # (plus mild off-axis noise so mixed features can still develop).  The
    # sampled-target functions are dominated by sharp threshold behaviour,
    # which plain small-weight inits sharpen far too slowly.
    coords = rng.integers(0, xs.shape[1], size=3)
    steep = np.exp(rng.uniform(np.log(8.0), np.log(64.0), size=3))
    signs = rng.choice((-1.0, 1.0), size=3)
    w1 = rng.normal(scale=0.5, size=(3, xs.shape[1]))
    for j in range(3):
        w1[j, coords[j]] = signs[j] * steep[j]
    centers = xs[rng.integers(0, len(xs), size=3)]
    b1 = -np.sum(w1 * centers, axis=1)
    w2, b2 = _solve_output_layer(w1, b1, xs, ts)

    lr = cfg.learning_rate
    loss, grads = _net_loss_and_grad(w1, b1, w2, b2, xs, ts)
    history = [loss]
    for epoch in range(cfg.epochs):
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"non-finite loss {loss} at epoch {epoch}")
        if cfg.output_resolve_every and epoch and epoch % cfg.output_resolve_every == 0:
            w2c, b2c = _solve_output_layer(w1, b1, xs, ts)
            new_loss, new_grads = _net_loss_and_grad(w1, b1, w2c, b2c, xs, ts)
            if math.isfinite(new_loss) and new_loss <= loss:
                w2, b2, loss, grads = w2c, b2c, new_loss, new_grads
        gw1, gb1, gw2, gb2 = grads
        accepted = False
        while lr >= 1e-12:
            cand = (w1 - lr * gw1, b1 - lr * gb1, w2 - lr * gw2, b2 - lr * gb2)
            new_loss, new_grads = _net_loss_and_grad(*cand, xs, ts)
            if math.isfinite(new_loss) and new_loss <= loss:
                w1, b1, w2, b2 = cand
                loss, grads = new_loss, new_grads
                lr = min(lr * 1.2, 50.0)
                accepted = True
                break
            lr *= 0.5
        if not accepted:
            break
        history.append(loss)
    return (w1, b1, w2, b2), history


def train_mlp(
    samples: Sequence[TrainingSample],
    ranges: GenerationRanges,
    config: TrainConfig = TrainConfig(),
) -> TrainResult:
    """Fit the 4-3-1 gain network by full-batch gradient descent.

    The step size backtracks until each epoch decreases the loss, so the
    recorded training loss is non-increasing.  The sample set is shuffled
    deterministically from the config seed and split into training and
    validation parts (``validation_count`` held out); several restarts are
    trained and the one with the lowest validation RMSE is kept.  Targets are
    standardized internally and the scaling is folded back into the output
    layer, so the returned parameters predict in gain units directly.
    """
    if len(samples) < 2:
        raise ValueError("need at least 2 samples")
    if not 0 < config.validation_count < len(samples):
        raise ValueError("validation_count must leave at least one training sample")

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(samples))
    split = len(samples) - config.validation_count
    train_idx, val_idx = order[:split], order[split:]

    los, his = ranges.as_bounds()
    lo = np.asarray(los, dtype=float)
    span = np.asarray(his, dtype=float) - lo
    raw = np.asarray([s.inputs for s in samples], dtype=float)
    targets = np.asarray([s.theta for s in samples], dtype=float)
    xs = (raw - lo) / span

    t_mean = float(np.mean(targets[train_idx]))
    t_std = max(float(np.std(targets[train_idx])), 1e-9)
    ts = (targets - t_mean) / t_std

    best = None
    for _ in range(max(config.restarts, 1)):
        weights, history = _train_once(xs[train_idx], ts[train_idx], config, rng)
        w1, b1, w2, b2 = weights
        val_pred = np.tanh(xs[val_idx] @ w1.T + b1) @ w2 + b2
        rmse = float(np.sqrt(np.mean((val_pred * t_std + t_mean - targets[val_idx]) ** 2)))
        if best is None or rmse < best[0]:
            best = (rmse, weights, history)

    rmse, (w1, b1, w2, b2), history = best
    params = MlpParams(
        hidden_weights=tuple(tuple(float(v) for v in row) for row in w1),
        hidden_bias=tuple(float(v) for v in b1),
        output_weights=tuple(float(v * t_std) for v in w2),
        output_bias=float(b2 * t_std + t_mean),
        input_lo=tuple(float(v) for v in lo),
        input_hi=tuple(float(v) for v in (lo + span)),
    )
    return TrainResult(params=params, train_loss=tuple(history), validation_rmse=rmse)


# ---------------------------------------------------------------------------
# Base-controller objects and the warm-start loop
# ---------------------------------------------------------------------------

class ExplicitAlineaController:
    """Constant-gain feedback metering; emits rates directly."""

    def __init__(
        self,
        params: NetworkParams,
        gains: Sequence[float],
        mu_init: Sequence[float],
        label: str = "ALINEA",
    ):
        self.params = params
        self.label = label
        self.state = AlineaState(gains_theta=tuple(gains), mu_prev=list(mu_init))

    def clone(self) -> "ExplicitAlineaController":
        other = ExplicitAlineaController.__new__(ExplicitAlineaController)
        other.params = self.params
        other.label = self.label
        other.state = self.state.clone()
        return other

    def advance(
        self,
        state: NetworkState,
        measured: ExogenousInput,
        o_prev: Sequence[float],
    ) -> tuple[tuple[float, ...], Optional[tuple[float, ...]]]:
        """Emit the metering rates for this step and update mu_prev."""
        rho = density(state, self.params)
        rho_metered = [rho[i] for i in self.params.metered_cells]
        mu = alinea_step(self.state, rho_metered, self.params.rho_crit)
        return mu, None

    def set_previous_metering(self, mu: Sequence[float]) -> None:
        if any(m < 0 for m in mu):
            raise ValueError("applied metering must be nonnegative")
        self.state.mu_prev[:] = mu


class ImplicitAnnController:
    """Gain-emitting network controller; converts gains to rates through the
    same feedback law the explicit controller uses.

    Emitted gains are clipped into ``gain_range``: network extrapolation
    outside the range its targets were generated on is meaningless, and the
    clip keeps the controller inside the same gain family the parameterized
    online controllers search.
    """

    def __init__(
        self,
        params: NetworkParams,
        nets: dict[int, MlpParams],
        mu_init: Sequence[float],
        label: str = "ANN",
        gain_range: tuple[float, float] = (0.0, 1.0),
    ):
        missing = [i for i in params.metered_cells if i not in nets]
        if missing:
            raise ValueError(f"missing networks for metered cells {missing}")
        self.params = params
        self.nets = nets
        self.label = label
        self.gain_range = gain_range
        self.state = AlineaState(
            gains_theta=tuple(0.0 for _ in params.metered_cells), mu_prev=list(mu_init)
        )

    def clone(self) -> "ImplicitAnnController":
        other = ImplicitAnnController.__new__(ImplicitAnnController)
        other.params = self.params
        other.nets = self.nets
        other.label = self.label
        other.gain_range = self.gain_range
        other.state = self.state.clone()
        return other

    def advance(
        self,
        state: NetworkState,
        measured: ExogenousInput,
        o_prev: Sequence[float],
    ) -> tuple[tuple[float, ...], tuple[float, ...]]:
        """Emit (metering rates, gains) for this step and update mu_prev."""
        demands = dict(zip(self.params.onramp_cells, measured.ramp_demands))
        rho = density(state, self.params)
        lo, hi = self.gain_range
        thetas = []
        for j, i in enumerate(self.params.metered_cells):
            qi = state.q[self.params.onramp_cells.index(i)]
            raw = mlp_forward(self.nets[i], (state.n[i], qi, demands[i], o_prev[j]))
            thetas.append(min(max(raw, lo), hi))
        self.state = replace(self.state, gains_theta=tuple(thetas))
        rho_metered = [rho[i] for i in self.params.metered_cells]
        mu = alinea_step(self.state, rho_metered, self.params.rho_crit)
        return mu, tuple(thetas)

    def set_previous_metering(self, mu: Sequence[float]) -> None:
        if any(m < 0 for m in mu):
            raise ValueError("applied metering must be nonnegative")
        self.state.mu_prev[:] = mu


@dataclass(frozen=True)
class WarmStart:
    """Metering plan produced by rolling a base controller through the model."""

    mu: tuple[tuple[float, ...], ...]              # horizon x metered ramps
    theta: Optional[tuple[tuple[float, ...], ...]]  # gain trail for implicit bases
    states: tuple[NetworkState, ...]               # predicted states, horizon + 1
    total_cost: float                              # summed stage cost along the rollout


def warm_start_rollout(
    base,
    state: NetworkState,
    predicted_inputs: Sequence[ExogenousInput],
    horizon_max: int,
    params: NetworkParams,
    o_prev: Sequence[float],
    gamma: float = 0.8,
) -> WarmStart:
    """Extend a base controller's single-step output into a full sequence.

    The controller (cloned, so the caller's instance is untouched) and the
    plant model alternate for ``horizon_max`` steps: the controller emits the
    rates for the current predicted state, the model advances under those
    rates, and the updated state feeds the next emission.  ``o_prev`` carries
    the latest realized upstream mainline inflow per metered ramp, refreshed
    from the model's flows inside the loop.
    """
    if horizon_max < 1:
        raise ValueError("horizon_max must be at least 1")
    ctrl = base.clone()
    cur = state
    o_cur = list(o_prev)
    total = 0.0
    mus, thetas, states = [], [], [state]
    for k in range(horizon_max):
        inp = predicted_inputs[k] if k < len(predicted_inputs) else predicted_inputs[-1]
        mu, theta = ctrl.advance(cur, inp, o_cur)
        cur, flows, cost = step(cur, inp, mu, params, gamma)
        o_cur = [
            flows.mainstream_in if i == 0 else flows.o[i - 1]
            for i in params.metered_cells
        ]
        total += cost.j
        mus.append(mu)
        thetas.append(theta)
        states.append(cur)
    theta_seq = None if thetas[0] is None else tuple(thetas)
    return WarmStart(mu=tuple(mus), theta=theta_seq, states=tuple(states), total_cost=total)
