"""Centralized welfare-maximizing dispatch and its dual analysis.

Builds the horizon-coupled welfare maximization over demands, solar output,
and battery dispatch, extracts the per-period price as the dual of the power
balance, computes individual best responses to a price, and verifies the
optimality identities that tie price, marginal utility, and the battery
constraint duals together.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .battery import ExtendedBattery, IdealBattery, repair_complementarity, soc_trajectory, soc_trajectory_ext
from .solver import ConcaveProgram, SolverError, solve_concave_program, solve_linear_program
from .utility import QuasiCPEUtility, build_utility

__all__ = [
    "AgentSpec",
    "Scenario",
    "DispatchSolution",
    "KKTReport",
    "solve_centralized",
    "solve_centralized_ext",
    "best_response_consumer",
    "best_response_battery",
    "best_response_battery_ext",
    "best_response_solar",
    "no_trade_solution",
    "verify_kkt",
]

BALANCE_TOL = 1e-6


@dataclass(frozen=True)
class AgentSpec:
    """One prosumer: per-period utility, solar capacity, optional battery."""

    name: str
    utilities: tuple[QuasiCPEUtility, ...]
    solar: np.ndarray
    battery: IdealBattery | ExtendedBattery | None = None

    def __post_init__(self):
        object.__setattr__(self, "solar", np.asarray(self.solar, dtype=float))
        if np.any(self.solar < 0):
            raise ValueError(f"agent {self.name}: solar capacity must be nonnegative")
        if len(self.utilities) != self.solar.size:
            raise ValueError(f"agent {self.name}: utility and solar sequences differ in length")

    @property
    def horizon(self) -> int:
        return self.solar.size

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "utilities": [u.to_dict() for u in self.utilities],
            "solar": self.solar.tolist(),
            "battery": self.battery.to_dict() if self.battery is not None else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AgentSpec":
        battery = data.get("battery")
        if battery is not None:
            battery = (
                ExtendedBattery.from_dict(battery) if battery.get("kind") == "extended" else IdealBattery.from_dict(battery)
            )
        return cls(
            name=data["name"],
            utilities=tuple(QuasiCPEUtility.from_dict(u) for u in data["utilities"]),
            solar=np.asarray(data["solar"], dtype=float),
            battery=battery,
        )


@dataclass(frozen=True)
class Scenario:
    """A dispatch instance: agents with aligned per-period data."""

    dt: float
    agents: tuple[AgentSpec, ...]

    def __post_init__(self):
        if not self.agents:
            raise ValueError("scenario needs at least one agent")
        if not self.dt > 0:
            raise ValueError("time step must be positive")
        T = self.agents[0].horizon
        for a in self.agents:
            if a.horizon != T:
                raise ValueError(f"agent {a.name} horizon {a.horizon} != {T}")
            if a.battery is not None and a.battery.dt != self.dt:
                raise ValueError(f"agent {a.name} battery time step differs from scenario")

    @property
    def T(self) -> int:
        return self.agents[0].horizon

    @property
    def num_agents(self) -> int:
        return len(self.agents)

    def to_json(self, indent: int | None = None) -> str:
        return json.dumps({"dt": self.dt, "agents": [a.to_dict() for a in self.agents]}, indent=indent, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        data = json.loads(text)
        return cls(dt=float(data["dt"]), agents=tuple(AgentSpec.from_dict(a) for a in data["agents"]))


@dataclass
class DispatchSolution:
    """Primal dispatch with the dual prices that support it.

    Signed bound duals follow the upper-minus-lower convention; arrays for
    battery duals hold NaN rows for agents without a battery. Extended-model
    solutions additionally carry the split charge/discharge flows and their
    separate signed duals.
    """

    demand: np.ndarray
    solar: np.ndarray
    battery_power: np.ndarray
    soc: np.ndarray
    price: np.ndarray
    lambda_solar: np.ndarray
    lambda_demand_lo: np.ndarray
    lambda_battery: np.ndarray
    lambda_soc: np.ndarray
    objective: float
    kkt_residual: float
    balance_residual: float
    extended: bool = False
    discharge: np.ndarray | None = None
    charge: np.ndarray | None = None
    lambda_battery_charge: np.ndarray | None = None

    def to_dict(self) -> dict:
        out = {
            "objective": self.objective,
            "kkt_residual": self.kkt_residual,
            "balance_residual": self.balance_residual,
            "price": self.price.tolist(),
            "demand": self.demand.tolist(),
            "solar": self.solar.tolist(),
            "battery_power": self.battery_power.tolist(),
            "soc": self.soc.tolist(),
            "extended": self.extended,
        }
        if self.extended:
            out["discharge"] = self.discharge.tolist()
            out["charge"] = self.charge.tolist()
        return out


def _battery_agents(sc: Scenario) -> list[int]:
    return [n for n, a in enumerate(sc.agents) if a.battery is not None]


def _soc_rows_ideal(b: IdealBattery, T: int):
    """Inequality rows expressing 0 <= s_t <= s_max on cumulative power."""
    cum = b.dt * np.tril(np.ones((T, T)))
    s_max = b.energy_limits(T)
    rows_low = cum  # dt * cumsum(p) <= s0   (s_t >= 0)
    rhs_low = np.full(T, b.s0)
    rows_high = -cum  # -dt * cumsum(p) <= s_max - s0   (s_t <= s_max)
    rhs_high = s_max - b.s0
    rows_final = rhs_final = None
    if b.s_final_min is not None and b.s_final_min > 0:
        rows_final = cum[-1:]
        rhs_final = np.array([b.s0 - b.s_final_min])
    return rows_low, rhs_low, rows_high, rhs_high, rows_final, rhs_final


def solve_centralized(sc: Scenario, canonical: bool = False) -> DispatchSolution:
    """Solve the ideal-battery welfare maximization and extract duals.

    The state of charge is substituted out, so the battery capacity limits
    become cumulative-power inequalities; their signed duals are reported
    per period. The price is the dual of the per-period power balance.
    """
    N, T = sc.num_agents, sc.T
    bat_idx = _battery_agents(sc)
    for n in bat_idx:
        if isinstance(sc.agents[n].battery, ExtendedBattery):
            raise ValueError("extended batteries require solve_centralized_ext")
    nb = len(bat_idx)
    nd = N * T
    nv = nd + N * T + nb * T

    cost = np.zeros(nv)
    utilities = {}
    lower = np.full(nv, -np.inf)
    upper = np.full(nv, np.inf)
    for n, agent in enumerate(sc.agents):
        for t in range(T):
            utilities[n * T + t] = agent.utilities[t]
            lower[n * T + t] = 0.0
        lower[nd + n * T : nd + (n + 1) * T] = 0.0
        upper[nd + n * T : nd + (n + 1) * T] = agent.solar

    a_eq = np.zeros((T, nv))
    for t in range(T):
        a_eq[t, t:nd:T] = 1.0
        a_eq[t, nd + t : nd + N * T : T] = -1.0
    a_ub_rows, b_ub_rows = [], []
    soc_slices = []
    for j, n in enumerate(bat_idx):
        b = sc.agents[n].battery
        base = nd + N * T + j * T
        lower[base : base + T] = -b.power_limits(T)
        upper[base : base + T] = b.power_limits(T)
        for t in range(T):
            a_eq[t, base + t] = -1.0
        rows_low, rhs_low, rows_high, rhs_high, rows_final, rhs_final = _soc_rows_ideal(b, T)
        start = sum(r.shape[0] for r in a_ub_rows)
        for rows, rhs in ((rows_low, rhs_low), (rows_high, rhs_high)):
            block = np.zeros((T, nv))
            block[:, base : base + T] = rows
            a_ub_rows.append(block)
            b_ub_rows.append(rhs)
        n_final = 0
        if rows_final is not None:
            block = np.zeros((1, nv))
            block[:, base : base + T] = rows_final
            a_ub_rows.append(block)
            b_ub_rows.append(rhs_final)
            n_final = 1
        soc_slices.append((start, n_final))

    prog = ConcaveProgram(
        num_vars=nv,
        cost=cost,
        utilities=utilities,
        a_eq=a_eq,
        b_eq=np.zeros(T),
        a_ub=np.vstack(a_ub_rows) if a_ub_rows else None,
        b_ub=np.concatenate(b_ub_rows) if b_ub_rows else None,
        lower=lower,
        upper=upper,
    )
    res = solve_concave_program(prog, canonical=canonical)
    if res.status != "optimal":
        raise SolverError(f"centralized dispatch did not reach optimality (status {res.status})")
    return _extract_ideal_solution(sc, bat_idx, soc_slices, res, nd)


def _extract_ideal_solution(sc, bat_idx, soc_slices, res, nd) -> DispatchSolution:
    N, T = sc.num_agents, sc.T
    x = res.x
    demand = x[:nd].reshape(N, T)
    solar = x[nd : nd + N * T].reshape(N, T)
    battery_power = np.zeros((N, T))
    soc = np.full((N, T), np.nan)
    lam_b = np.full((N, T), np.nan)
    lam_c = np.full((N, T), np.nan)
    for j, n in enumerate(bat_idx):
        base = nd + N * T + j * T
        p = x[base : base + T]
        battery_power[n] = p
        soc[n] = soc_trajectory(sc.agents[n].battery, p)
        start, n_final = soc_slices[j]
        z_low = res.ineq_duals[start : start + T]
        z_high = res.ineq_duals[start + T : start + 2 * T]
        lam_c[n] = z_high - z_low
        if n_final:
            # terminal floor acts as an extra lower-bound dual in the last period
            lam_c[n, -1] -= res.ineq_duals[start + 2 * T]
    lam_s = (res.upper_duals - res.lower_duals)[nd : nd + N * T].reshape(N, T)
    lam_d = res.lower_duals[:nd].reshape(N, T)
    for j, n in enumerate(bat_idx):
        base = nd + N * T + j * T
        lam_b[n] = (res.upper_duals - res.lower_duals)[base : base + T]
    price = res.eq_duals.copy()
    welfare = -res.objective
    balance = float(np.max(np.abs(demand.sum(axis=0) - solar.sum(axis=0) - battery_power.sum(axis=0))))
    return DispatchSolution(
        demand=demand,
        solar=solar,
        battery_power=battery_power,
        soc=soc,
        price=price,
        lambda_solar=lam_s,
        lambda_demand_lo=lam_d,
        lambda_battery=lam_b,
        lambda_soc=lam_c,
        objective=welfare,
        kkt_residual=res.kkt_residual,
        balance_residual=balance,
    )


def _theta_weights(b: ExtendedBattery, T: int) -> np.ndarray:
    idx = np.arange(T)
    return np.where(idx[:, None] >= idx[None, :], b.theta ** (idx[:, None] - idx[None, :]), 0.0)


def solve_centralized_ext(sc: Scenario, canonical: bool = False) -> DispatchSolution:
    """Extended-battery welfare maximization via complementarity relaxation.

    Solves the linear-constraint relaxation that allows simultaneous charge
    and discharge, then maps each battery's flows through the repair step so
    the returned dispatch never charges and discharges at once. Raises if
    any price comes out negative, which would void the relaxation argument.
    """
    N, T = sc.num_agents, sc.T
    bat_idx = _battery_agents(sc)
    for n in bat_idx:
        if not isinstance(sc.agents[n].battery, ExtendedBattery):
            raise ValueError("solve_centralized_ext expects extended batteries")
    nb = len(bat_idx)
    nd = N * T
    nv = nd + N * T + 2 * nb * T

    cost = np.zeros(nv)
    utilities = {}
    lower = np.full(nv, -np.inf)
    upper = np.full(nv, np.inf)
    for n, agent in enumerate(sc.agents):
        for t in range(T):
            utilities[n * T + t] = agent.utilities[t]
            lower[n * T + t] = 0.0
        lower[nd + n * T : nd + (n + 1) * T] = 0.0
        upper[nd + n * T : nd + (n + 1) * T] = agent.solar

    a_eq = np.zeros((T, nv))
    for t in range(T):
        a_eq[t, t:nd:T] = 1.0
        a_eq[t, nd + t : nd + N * T : T] = -1.0
    a_ub_rows, b_ub_rows = [], []
    soc_slices = []
    for j, n in enumerate(bat_idx):
        b = sc.agents[n].battery
        base_p = nd + N * T + 2 * j * T
        base_m = base_p + T
        lower[base_p : base_p + T] = 0.0
        upper[base_p : base_p + T] = b.discharge_limits(T)
        lower[base_m : base_m + T] = 0.0
        upper[base_m : base_m + T] = b.charge_limits(T)
        for t in range(T):
            a_eq[t, base_p + t] = -1.0
            a_eq[t, base_m + t] = 1.0
        W = _theta_weights(b, T) * b.dt
        decay = b.theta ** np.arange(1, T + 1) * b.s0
        s_max = b.energy_limits(T)
        start = sum(r.shape[0] for r in a_ub_rows)
        # s >= 0:  W @ (a p+ - sm p-) <= decay
        block = np.zeros((T, nv))
        block[:, base_p : base_p + T] = b.withdraw_rate * W
        block[:, base_m : base_m + T] = -b.sigma_minus * W
        a_ub_rows.append(block)
        b_ub_rows.append(decay)
        # s <= s_max: W @ (sm p- - a p+) <= s_max - decay
        a_ub_rows.append(-block)
        b_ub_rows.append(s_max - decay)
        n_final = 0
        if b.s_final_min is not None and b.s_final_min > 0:
            final = np.zeros((1, nv))
            final[:, base_p : base_p + T] = b.withdraw_rate * W[-1:]
            final[:, base_m : base_m + T] = -b.sigma_minus * W[-1:]
            a_ub_rows.append(final)
            b_ub_rows.append(np.array([decay[-1] - b.s_final_min]))
            n_final = 1
        soc_slices.append((start, n_final))

    prog = ConcaveProgram(
        num_vars=nv,
        cost=cost,
        utilities=utilities,
        a_eq=a_eq,
        b_eq=np.zeros(T),
        a_ub=np.vstack(a_ub_rows) if a_ub_rows else None,
        b_ub=np.concatenate(b_ub_rows) if b_ub_rows else None,
        lower=lower,
        upper=upper,
    )
    res = solve_concave_program(prog, canonical=canonical)
    if res.status != "optimal":
        raise SolverError(f"extended dispatch did not reach optimality (status {res.status})")
    price = res.eq_duals.copy()
    if np.any(price < -1e-9):
        raise SolverError(f"negative price {price.min()} voids the complementarity relaxation")

    x = res.x
    demand = x[:nd].reshape(N, T)
    solar = x[nd : nd + N * T].reshape(N, T)
    discharge = np.zeros((N, T))
    charge = np.zeros((N, T))
    soc = np.full((N, T), np.nan)
    lam_bp = np.full((N, T), np.nan)
    lam_bm = np.full((N, T), np.nan)
    lam_c = np.full((N, T), np.nan)
    for j, n in enumerate(bat_idx):
        b = sc.agents[n].battery
        base_p = nd + N * T + 2 * j * T
        base_m = base_p + T
        p_dis, p_chg = repair_complementarity(b, x[base_p : base_p + T], x[base_m : base_m + T])
        discharge[n] = p_dis
        charge[n] = p_chg
        soc[n] = soc_trajectory_ext(b, p_dis, p_chg)
        lam_bp[n] = (res.upper_duals - res.lower_duals)[base_p : base_p + T]
        lam_bm[n] = (res.upper_duals - res.lower_duals)[base_m : base_m + T]
        start, n_final = soc_slices[j]
        z_low = res.ineq_duals[start : start + T]
        z_high = res.ineq_duals[start + T : start + 2 * T]
        lam_c[n] = z_high - z_low
        if n_final:
            lam_c[n, -1] -= res.ineq_duals[start + 2 * T]
    lam_s = (res.upper_duals - res.lower_duals)[nd : nd + N * T].reshape(N, T)
    lam_d = res.lower_duals[:nd].reshape(N, T)
    net = discharge - charge
    balance = float(np.max(np.abs(demand.sum(axis=0) - solar.sum(axis=0) - net.sum(axis=0))))
    return DispatchSolution(
        demand=demand,
        solar=solar,
        battery_power=net,
        soc=soc,
        price=price,
        lambda_solar=lam_s,
        lambda_demand_lo=lam_d,
        lambda_battery=lam_bp,
        lambda_soc=lam_c,
        objective=-res.objective,
        kkt_residual=res.kkt_residual,
        balance_residual=balance,
        extended=True,
        discharge=discharge,
        charge=charge,
        lambda_battery_charge=lam_bm,
    )


def best_response_consumer(utilities, price) -> np.ndarray:
    """Utility-maximizing demand per period at the given positive prices."""
    price = np.asarray(price, dtype=float)
    if np.any(price <= 0):
        raise ValueError("consumer best response requires positive prices")
    if len(utilities) != price.size:
        raise ValueError("utility and price sequences differ in length")
    return np.array([u.inverse_demand(p) for u, p in zip(utilities, price)])


def best_response_battery(b: IdealBattery, price, canonical: bool = False) -> tuple[np.ndarray, float]:
    """One optimal dispatch of the battery profit LP and its exact value.

    The optimum is generally not unique; canonical mode picks the
    tie-broken point for reproducibility.
    """
    price = np.asarray(price, dtype=float)
    T = price.size
    rows_low, rhs_low, rows_high, rhs_high, rows_final, rhs_final = _soc_rows_ideal(b, T)
    a_ub = np.vstack([rows_low, rows_high] + ([rows_final] if rows_final is not None else []))
    b_ub = np.concatenate([rhs_low, rhs_high] + ([rhs_final] if rhs_final is not None else []))
    prog = ConcaveProgram(
        num_vars=T,
        cost=-price,
        a_ub=a_ub,
        b_ub=b_ub,
        lower=-b.power_limits(T),
        upper=b.power_limits(T),
    )
    res = solve_linear_program(prog, canonical=canonical)
    if res.status != "optimal":
        raise SolverError(f"battery best response failed (status {res.status})")
    return res.x, res.objective


def best_response_battery_ext(b: ExtendedBattery, price, canonical: bool = False) -> tuple[np.ndarray, np.ndarray, float]:
    """Extended-battery best response: relaxed LP then complementarity repair."""
    price = np.asarray(price, dtype=float)
    T = price.size
    W = _theta_weights(b, T) * b.dt
    decay = b.theta ** np.arange(1, T + 1) * b.s0
    s_max = b.energy_limits(T)
    block = np.hstack([b.withdraw_rate * W, -b.sigma_minus * W])
    rows = [block, -block]
    rhs = [decay, s_max - decay]
    if b.s_final_min is not None and b.s_final_min > 0:
        rows.append(block[-1:])
        rhs.append(np.array([decay[-1] - b.s_final_min]))
    prog = ConcaveProgram(
        num_vars=2 * T,
        cost=np.concatenate([-price, price]),
        a_ub=np.vstack(rows),
        b_ub=np.concatenate(rhs),
        lower=np.zeros(2 * T),
        upper=np.concatenate([b.discharge_limits(T), b.charge_limits(T)]),
    )
    res = solve_linear_program(prog, canonical=canonical)
    if res.status != "optimal":
        raise SolverError(f"extended battery best response failed (status {res.status})")
    p_dis, p_chg = repair_complementarity(b, np.clip(res.x[:T], 0, None), np.clip(res.x[T:], 0, None))
    return p_dis, p_chg, res.objective


def best_response_solar(cap, price) -> tuple[np.ndarray, list[int]]:
    """Profit-maximizing solar output; ties at zero price go to full output.

    Returns the output sequence and the (1-based) periods with negative
    prices, where the profit-maximizing output is zero.
    """
    cap = np.asarray(cap, dtype=float)
    price = np.asarray(price, dtype=float)
    out = np.where(price >= 0, cap, 0.0)
    flagged = [int(t + 1) for t in np.nonzero(price < 0)[0]]
    return out, flagged


def no_trade_solution(agent: AgentSpec, dt: float) -> DispatchSolution:
    """The agent's optimal self-supplied schedule (no trading at all)."""
    solo = Scenario(dt=dt, agents=(agent,))
    if isinstance(agent.battery, ExtendedBattery):
        return solve_centralized_ext(solo)
    return solve_centralized(solo)


@dataclass
class KKTReport:
    """Residuals of the optimality identities at a dispatch solution."""

    stationarity_demand: float
    stationarity_demand_interior: float
    stationarity_battery: float
    stationarity_solar: float
    price_dynamics: float
    duality_gap: float
    balance_residual: float
    full_solar_gap: float
    prices_positive: bool
    decomposition_consumers: float
    decomposition_solar: float
    decomposition_batteries: float
    best_response_imbalance: float

    @property
    def max_identity_residual(self) -> float:
        return max(
            self.stationarity_demand,
            self.stationarity_battery,
            self.stationarity_solar,
            self.price_dynamics,
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def verify_kkt(sc: Scenario, sol: DispatchSolution, interior_tol: float = 1e-6) -> KKTReport:
    """Check the stationarity, price-dynamics, and duality identities.

    Also evaluates each agent class's best response to the computed price:
    the summed best-response objectives must match the centralized optimum
    (the decomposition identity) even when the battery best-response primal
    does not balance power, whose worst-case imbalance is reported.
    """
    N, T = sc.num_agents, sc.T
    price = sol.price
    dt = sc.dt

    res_d = 0.0
    res_d_int = 0.0
    for n, agent in enumerate(sc.agents):
        g = np.array([u.marginal_utility(d) for u, d in zip(agent.utilities, np.maximum(sol.demand[n], 0.0))])
        res_d = max(res_d, float(np.max(np.abs(price - g - sol.lambda_demand_lo[n]))))
        mask = sol.demand[n] > interior_tol
        if mask.any():
            res_d_int = max(res_d_int, float(np.max(np.abs((price - g)[mask]))))

    res_b = 0.0
    res_dyn = 0.0
    for n, agent in enumerate(sc.agents):
        b = agent.battery
        if b is None:
            continue
        lam_c = sol.lambda_soc[n]
        if sol.extended:
            suffix = np.array([np.sum(b.theta ** (np.arange(t, T) - t) * lam_c[t:]) for t in range(T)])
            ident_p = sol.lambda_battery[n] - dt * b.withdraw_rate * suffix
            ident_m = -sol.lambda_battery_charge[n] - dt * b.sigma_minus * suffix
            res_b = max(res_b, float(np.max(np.abs(price - ident_p))), float(np.max(np.abs(price - ident_m))))
            if T > 1:
                lhs = b.theta * price[1:] - price[:-1]
                rhs_p = b.theta * sol.lambda_battery[n][1:] - sol.lambda_battery[n][:-1] + dt * b.withdraw_rate * lam_c[:-1]
                rhs_m = sol.lambda_battery_charge[n][:-1] - b.theta * sol.lambda_battery_charge[n][1:] + dt * b.sigma_minus * lam_c[:-1]
                res_dyn = max(res_dyn, float(np.max(np.abs(lhs - rhs_p))), float(np.max(np.abs(lhs - rhs_m))))
        else:
            suffix = np.cumsum(lam_c[::-1])[::-1]
            ident = sol.lambda_battery[n] - dt * suffix
            res_b = max(res_b, float(np.max(np.abs(price - ident))))
            if T > 1:
                lhs = price[1:] - price[:-1]
                rhs = sol.lambda_battery[n][1:] - sol.lambda_battery[n][:-1] + dt * lam_c[:-1]
                res_dyn = max(res_dyn, float(np.max(np.abs(lhs - rhs))))

    res_s = float(np.max(np.abs(price[None, :] - sol.lambda_solar)))

    # full-solar check: wherever the price is positive, output must be at cap
    gap = 0.0
    for n, agent in enumerate(sc.agents):
        mask = price > interior_tol
        if mask.any():
            gap = max(gap, float(np.max((agent.solar - sol.solar[n])[mask])))

    w_n = 0.0
    for agent in sc.agents:
        d = best_response_consumer(agent.utilities, np.maximum(price, 1e-12))
        w_n += float(np.sum(price * d) - sum(u.utility_value(di) for u, di in zip(agent.utilities, d)))
    w_g = -float(np.sum(np.maximum(price, 0.0)[None, :] * np.vstack([a.solar for a in sc.agents])))
    w_i = 0.0
    imbalance_demand = np.zeros(T)
    for agent in sc.agents:
        d = best_response_consumer(agent.utilities, np.maximum(price, 1e-12))
        imbalance_demand += d
    net_supply = np.vstack([a.solar for a in sc.agents]).sum(axis=0).astype(float)
    for agent in sc.agents:
        if agent.battery is None:
            continue
        if isinstance(agent.battery, ExtendedBattery):
            p_dis, p_chg, obj = best_response_battery_ext(agent.battery, price)
            net_supply += p_dis - p_chg
        else:
            p, obj = best_response_battery(agent.battery, price)
            net_supply += p
        w_i += obj
    duality_gap = abs(-sol.objective - (w_n + w_g + w_i))
    best_response_imbalance = float(np.max(np.abs(imbalance_demand - net_supply)))

    return KKTReport(
        stationarity_demand=res_d,
        stationarity_demand_interior=res_d_int,
        stationarity_battery=res_b,
        stationarity_solar=res_s,
        price_dynamics=res_dyn,
        duality_gap=duality_gap,
        balance_residual=sol.balance_residual,
        full_solar_gap=gap,
        prices_positive=bool(np.all(price > 0)),
        decomposition_consumers=w_n,
        decomposition_solar=w_g,
        decomposition_batteries=w_i,
        best_response_imbalance=best_response_imbalance,
    )
