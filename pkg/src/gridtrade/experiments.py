"""Simulation experiments: convergence-rate sweep over the step-shrink
parameters, and the multi-agent welfare study against the centralized
optimum.

Trials are independent with per-trial RNG streams derived from the top-level
seed, so results are reproducible and order-independent. The multi-agent
study reuses one stream per trial index across all battery configurations
(common random numbers), which makes the capacity comparisons paired.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dispatch import Scenario, no_trade_solution, solve_centralized
from .negotiation import NegotiationConfig, TradeLedger, run_negotiation
from .scenario import ScenarioRecipe, generate_profiles, generate_scenario, random_pair_scenario

__all__ = [
    "GammaSweepConfig",
    "SweepCell",
    "SweepResult",
    "MultiAgentConfig",
    "AgentOutcome",
    "TrialResult",
    "ExperimentResult",
    "run_gamma_sweep",
    "run_multiagent_experiment",
    "pareto_audit",
    "per_agent_centralized_welfare",
]

PARETO_SLACK = -1e-6
WELFARE_DENOM_FLOOR = 1e-6


@dataclass(frozen=True)
class GammaSweepConfig:
    """Grid over (shrink rate, initial step) for 2-agent single-period runs."""

    gammas: tuple[float, ...]
    delta0s: tuple[float, ...]
    trials_per_cell: int
    seed: int
    epsilon: float = 1e-3
    max_iters: int = 5000
    elasticity_range: tuple[float, float] = (-1.5, -0.5)

    @classmethod
    def from_dict(cls, data: dict) -> "GammaSweepConfig":
        data = dict(data)
        data["gammas"] = tuple(data["gammas"])
        data["delta0s"] = tuple(data["delta0s"])
        if "elasticity_range" in data:
            data["elasticity_range"] = tuple(data["elasticity_range"])
        return cls(**data)


@dataclass
class SweepCell:
    gamma: float
    delta0: float
    mean_iters: float
    max_iters: int
    converged: int
    trials: int


@dataclass
class SweepResult:
    cells: list[SweepCell]
    config: GammaSweepConfig

    def mean_by_gamma(self) -> dict[float, float]:
        by_gamma: dict[float, list[float]] = {}
        for c in self.cells:
            by_gamma.setdefault(c.gamma, []).append(c.mean_iters)
        return {g: float(np.mean(v)) for g, v in sorted(by_gamma.items())}


def run_gamma_sweep(cfg: GammaSweepConfig) -> SweepResult:
    """Mean and max iterations to settle per (gamma, delta0) cell."""
    cells = []
    for ci, gamma in enumerate(cfg.gammas):
        for di, delta0 in enumerate(cfg.delta0s):
            iters = []
            converged = 0
            for trial in range(cfg.trials_per_cell):
                rng = np.random.default_rng((cfg.seed, ci, di, trial))
                sc = random_pair_scenario(rng, cfg.elasticity_range)
                ncfg = NegotiationConfig(
                    gamma=gamma, epsilon=cfg.epsilon, delta0=delta0, max_iters=cfg.max_iters
                )
                ledger = run_negotiation(sc, ncfg)
                iters.append(ledger.iterations)
                converged += int(ledger.converged)
            cells.append(
                SweepCell(
                    gamma=gamma,
                    delta0=delta0,
                    mean_iters=float(np.mean(iters)),
                    max_iters=int(np.max(iters)),
                    converged=converged,
                    trials=cfg.trials_per_cell,
                )
            )
    return SweepResult(cells=cells, config=cfg)


@dataclass(frozen=True)
class MultiAgentConfig:
    """Sweep over (total capacity, power limit) pairs with randomized trials."""

    pairs: tuple[tuple[float, float], ...]
    trials_per_pair: int
    seed: int
    t_choices: tuple[int, ...] = (1, 12, 24)
    n_range: tuple[int, int] = (2, 10)
    elasticity_range: tuple[float, float] = (-1.5, -0.5)
    gamma: float = 0.5
    delta0: float = 0.5
    epsilon: float = 1e-3
    max_iters: int = 5000
    paired_trials: bool = True
    initial_soc_fraction: float = 0.5

    @classmethod
    def from_dict(cls, data: dict) -> "MultiAgentConfig":
        data = dict(data)
        data["pairs"] = tuple((float(s), float(p)) for s, p in data["pairs"])
        for key in ("t_choices", "n_range", "elasticity_range"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class AgentOutcome:
    name: str
    w_no: float
    w_centr: float
    w_p2p: float

    @property
    def dw(self) -> float:
        return self.w_centr - self.w_p2p

    @property
    def dw_pct(self) -> float | None:
        if abs(self.w_centr) < WELFARE_DENOM_FLOOR:
            return None
        return 100.0 * self.dw / self.w_centr


@dataclass
class TrialResult:
    capacity_total: float
    battery_power: float
    trial: int
    horizon: int
    num_agents: int
    iterations: int
    converged: bool
    w_no: float
    w_centr: float
    w_p2p: float
    pareto_ok: bool
    min_pareto_slack: float
    agents: list[AgentOutcome] = field(default_factory=list)

    @property
    def dw(self) -> float:
        return self.w_centr - self.w_p2p

    @property
    def dw_pct(self) -> float | None:
        if abs(self.w_centr) < WELFARE_DENOM_FLOOR:
            return None
        return 100.0 * self.dw / self.w_centr


@dataclass
class ExperimentResult:
    trials: list[TrialResult]
    config: MultiAgentConfig

    def summary_by_horizon(self) -> list[dict]:
        out = []
        for T in sorted({t.horizon for t in self.trials}):
            rows = [t for t in self.trials if t.horizon == T]
            conv = [t for t in rows if t.converged]
            pcts = [t.dw_pct for t in conv if t.dw_pct is not None]
            dws = [t.dw for t in conv]
            out.append(
                {
                    "T": T,
                    "simulations": len(rows),
                    "converged": len(conv),
                    "dw_pct_mean": float(np.mean(pcts)) if pcts else None,
                    "dw_pct_std": float(np.std(pcts, ddof=1)) if len(pcts) > 1 else 0.0,
                    "dw_pct_max": float(np.max(pcts)) if pcts else None,
                    "dw_mean": float(np.mean(dws)) if dws else None,
                    "dw_std": float(np.std(dws, ddof=1)) if len(dws) > 1 else 0.0,
                    "dw_max": float(np.max(dws)) if dws else None,
                }
            )
        return out

    def summary_by_capacity(self) -> list[dict]:
        out = []
        for cap in sorted({t.capacity_total for t in self.trials}):
            iters = [t.iterations for t in self.trials if t.capacity_total == cap and t.converged]
            if not iters:
                out.append({"capacity_total": cap, "trials": 0})
                continue
            q = np.percentile(iters, [0, 25, 50, 75, 100])
            out.append(
                {
                    "capacity_total": cap,
                    "trials": len(iters),
                    "iters_min": float(q[0]),
                    "iters_q1": float(q[1]),
                    "iters_median": float(q[2]),
                    "iters_q3": float(q[3]),
                    "iters_max": float(q[4]),
                }
            )
        return out

    def special_instance(self) -> TrialResult | None:
        """The converged trial with the largest absolute welfare gap."""
        conv = [t for t in self.trials if t.converged]
        if not conv:
            return None
        return max(conv, key=lambda t: t.dw)


def per_agent_centralized_welfare(sc: Scenario, sol) -> dict[str, float]:
    """Utility plus trading settled at the centralized price, per agent.

    Each agent buys its net position (demand minus own solar and battery
    injection) at the dual price; the trading terms cancel in the total.
    """
    out = {}
    for n, agent in enumerate(sc.agents):
        utility = float(sum(u.utility_value(max(d, 0.0)) for u, d in zip(agent.utilities, sol.demand[n])))
        net_buy = sol.demand[n] - sol.solar[n] - sol.battery_power[n]
        out[agent.name] = utility - float(sol.price @ net_buy)
    return out


def pareto_audit(sc: Scenario, ledger: TradeLedger) -> tuple[dict[str, float], dict[str, float]]:
    """Recompute no-trade welfare independently and the realized slacks.

    Returns (w_no per agent, slack per agent) with slack = realized - w_no.
    The no-trade values come from the dispatch solver rather than the
    negotiation engine's cached models, so the audit is an independent path.
    """
    realized = ledger.realized_welfare()
    w_no = {}
    slack = {}
    for agent in sc.agents:
        base = no_trade_solution(agent, sc.dt).objective
        w_no[agent.name] = base
        slack[agent.name] = realized[agent.name] - base
    return w_no, slack


def run_multiagent_experiment(cfg: MultiAgentConfig) -> ExperimentResult:
    """Centralized solve + negotiation + welfare accounting per trial."""
    trials: list[TrialResult] = []
    for pi, (cap_total, p_max) in enumerate(cfg.pairs):
        for trial in range(cfg.trials_per_pair):
            stream = (cfg.seed, trial) if cfg.paired_trials else (cfg.seed, pi, trial)
            rng = np.random.default_rng(stream)
            T = int(rng.choice(cfg.t_choices))
            N = int(rng.integers(cfg.n_range[0], cfg.n_range[1] + 1))
            profile_seed = int(rng.integers(0, 2**32))
            recipe_seed = int(rng.integers(0, 2**32))
            profiles = generate_profiles(N, T + 24, seed=profile_seed)
            # restrict to windows with sunshine so PV scaling is well-posed
            pv_total = profiles.pv.sum(axis=0)
            window_sums = np.convolve(pv_total, np.ones(T), mode="valid")
            valid_starts = np.nonzero(window_sums > 1e-9)[0]
            window_start = int(rng.choice(valid_starts))
            recipe = ScenarioRecipe(
                num_agents=N,
                horizon=T,
                elasticity_range=cfg.elasticity_range,
                battery_capacity_total=cap_total,
                battery_power=p_max,
                seed=recipe_seed,
                window_start=window_start,
                initial_soc_fraction=cfg.initial_soc_fraction,
            )
            sc = generate_scenario(profiles, recipe)
            sol = solve_centralized(sc)
            w_centr_agents = per_agent_centralized_welfare(sc, sol)

            ncfg = NegotiationConfig(
                gamma=cfg.gamma, epsilon=cfg.epsilon, delta0=cfg.delta0, max_iters=cfg.max_iters
            )
            ledger = run_negotiation(sc, ncfg)
            realized = ledger.realized_welfare()
            w_no, slack = pareto_audit(sc, ledger)

            agents = [
                AgentOutcome(
                    name=a.name,
                    w_no=w_no[a.name],
                    w_centr=w_centr_agents[a.name],
                    w_p2p=realized[a.name],
                )
                for a in sc.agents
            ]
            min_slack = min(slack.values())
            trials.append(
                TrialResult(
                    capacity_total=cap_total,
                    battery_power=p_max,
                    trial=trial,
                    horizon=T,
                    num_agents=N,
                    iterations=ledger.iterations,
                    converged=ledger.converged,
                    w_no=float(sum(w_no.values())),
                    w_centr=sol.objective,
                    w_p2p=float(sum(realized.values())),
                    pareto_ok=bool(min_slack >= PARETO_SLACK),
                    min_pareto_slack=float(min_slack),
                    agents=agents,
                )
            )
    return ExperimentResult(trials=trials, config=cfg)
