"""Economic dispatch and peer-to-peer energy-trade negotiation for
zero marginal-cost microgrids."""

from .battery import (
    ExtendedBattery,
    IdealBattery,
    Violation,
    check_feasible,
    repair_complementarity,
    soc_trajectory,
    soc_trajectory_ext,
)
from .dispatch import (
    AgentSpec,
    DispatchSolution,
    KKTReport,
    Scenario,
    best_response_battery,
    best_response_battery_ext,
    best_response_consumer,
    best_response_solar,
    no_trade_solution,
    solve_centralized,
    solve_centralized_ext,
    verify_kkt,
)
from .experiments import (
    ExperimentResult,
    GammaSweepConfig,
    MultiAgentConfig,
    SweepResult,
    run_gamma_sweep,
    run_multiagent_experiment,
)
from .negotiation import (
    NegotiationConfig,
    QAgentState,
    TradeLedger,
    closed_form_response,
    pi_price,
    pi_project,
    q_respond,
    run_negotiation,
    update_delta,
    update_oscillation,
)
from .report import emit_report
from .scenario import (
    ProfileSet,
    ScenarioRecipe,
    generate_profiles,
    generate_scenario,
    load_profiles,
)
from .solver import ConcaveProgram, SolveResult, SolverError, solve_concave_program, solve_linear_program
from .utility import QuasiCPEUtility, build_utility

__version__ = "0.1.0"
