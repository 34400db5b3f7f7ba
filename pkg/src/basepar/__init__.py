"""Base-parallel ramp-metering control on a cell-transmission highway model.

Offline-tuned base controllers and budgeted online MPC controllers run side
by side; every candidate metering plan is scored on a plant-model rollout
and the cheapest one is applied each control step.
"""

from .actm import (
    CellParams,
    ExogenousInput,
    FlowVector,
    NetworkParams,
    NetworkState,
    RolloutResult,
    StageCost,
    density,
    rollout,
    stage_cost,
    step,
)
from .base_controllers import (
    AlineaState,
    ExplicitAlineaController,
    ImplicitAnnController,
    MlpParams,
    WarmStart,
    alinea_step,
    mlp_forward,
    warm_start_rollout,
)
from .orchestrator import (
    ArchitectureConfig,
    BaseParallelController,
    EvaluationResult,
    ParallelCell,
    ParallelControllerSpec,
    SelectionRecord,
    evaluate_candidates,
    select_best,
)
from .parallel import (
    BudgetedResult,
    CandidateSequence,
    MpcProblem,
    OptimizerConfig,
    make_shift_warm_starts,
    objective,
    run_parallel_cell,
    solve_budgeted,
)
from .scenario import (
    MetricsSummary,
    NoiseModel,
    RunLog,
    ScenarioConfig,
    default_scenario,
    default_scenario_path,
    emit_plot_data,
    load_scenario,
    perturb_demand,
    run_experiment,
    summarize,
    train_networks,
    write_runlog,
)

__version__ = "0.1.0"
