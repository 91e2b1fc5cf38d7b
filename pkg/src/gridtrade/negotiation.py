"""Bounded cobweb negotiation between one pricing agent and many
quantity-proposing agents.

Each iteration the quantity proposals are projected onto the pricing agent's
feasible set along the line toward a known-feasible point, priced at that
agent's marginal utility, and answered by each proposer under a per-period
step limit that shrinks geometrically whenever the proposal oscillates.
Settlements only happen while every participant prefers the offer on the
table to not trading, which makes the settled trades weak Pareto
improvements over autarky.

Agents without a battery (and any agent over a single period, where a
battery is equivalent to extra solar) are handled by exact per-period closed
forms; battery-coupled agents solve small structure-cached conic programs.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import cvxpy as cp
import numpy as np

from .battery import ExtendedBattery, IdealBattery
from .dispatch import AgentSpec, Scenario
from .solver import TIE_BREAK_WEIGHT, SolverError, utility_atoms
from .utility import QuasiCPEUtility

__all__ = [
    "NegotiationConfig",
    "QAgentState",
    "IterationRecord",
    "FinalTrade",
    "TradeLedger",
    "update_oscillation",
    "update_delta",
    "closed_form_response",
    "pi_project",
    "pi_price",
    "q_respond",
    "run_negotiation",
    "PriceResponse",
]

ALPHA_SLACK = 1e-9
# conic primal accuracy goes with the square root of the duality gap, so the
# in-loop solves run well below the settle tolerance scale
_SOLVE_OPTS = dict(tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)


def _quiet_solve(problem: cp.Problem) -> None:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        try:
            problem.solve(solver=cp.CLARABEL, **_SOLVE_OPTS)
            return
        except cp.SolverError:
            pass
        try:
            # retry at the solver's stock tolerances
            problem.solve(solver=cp.CLARABEL)
            return
        except cp.SolverError:
            # last resort: the slower first-order solver
            problem.solve(solver=cp.SCS, eps=1e-9, max_iters=200_000)


@dataclass(frozen=True)
class NegotiationConfig:
    """Algorithm parameters: shrink rate, settle tolerance, initial step."""

    gamma: float
    epsilon: float
    delta0: float
    max_iters: int = 5000
    pi_agent_index: int = 0

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("shrink rate must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ValueError("settle tolerance must be positive")
        if not self.delta0 > self.gamma * self.epsilon:
            raise ValueError("initial step limit must exceed gamma * epsilon")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass
class QAgentState:
    """Mutable per-proposer negotiation state."""

    delta: np.ndarray
    q_hist: list[np.ndarray]
    alpha: bool = False
    eta: bool = False
    exited: bool = False
    settled_price: np.ndarray | None = None
    settled_quantity: np.ndarray | None = None
    osc_count: int = 0


@dataclass
class IterationRecord:
    """Everything exchanged in one round, for auditing and serialization."""

    iteration: int
    beta: float
    price: np.ndarray
    alpha_v: bool
    q: dict[str, np.ndarray]
    q_prime: dict[str, np.ndarray]
    q_next: dict[str, np.ndarray]
    alpha: dict[str, bool]
    eta: dict[str, bool]
    delta: dict[str, np.ndarray]
    oscillating: dict[str, np.ndarray]
    exited: list[str]


class FinalTrade(NamedTuple):
    price: np.ndarray
    quantity: np.ndarray
    payment: float
    consumption_utility: float
    exit_iteration: int


@dataclass
class TradeLedger:
    """Complete negotiation history plus the settled trades."""

    pi_agent: str
    records: list[IterationRecord] = field(default_factory=list)
    final_trades: dict[str, FinalTrade] = field(default_factory=dict)
    iterations: int = 0
    termination: str = ""
    pi_agent_revenue: float = 0.0
    pi_agent_consumption_utility: float = 0.0
    no_trade_utility: dict[str, float] = field(default_factory=dict)
    degenerate_price_periods: list[tuple[int, int]] = field(default_factory=list)
    pi_agent_schedule_feasible: bool = True

    @property
    def converged(self) -> bool:
        return self.termination == "all-exited"

    def realized_welfare(self) -> dict[str, float]:
        """Utility plus/minus payments at the settled trades.

        Proposers that never settled realize their no-trade optimum; the
        pricing agent realizes its schedule against all settled quantities.
        """
        out = {}
        for name, ref in self.no_trade_utility.items():
            if name == self.pi_agent:
                out[name] = self.pi_agent_consumption_utility + self.pi_agent_revenue
            elif name in self.final_trades:
                trade = self.final_trades[name]
                out[name] = trade.consumption_utility - trade.payment
            else:
                out[name] = ref
        return out


def update_oscillation(q_next, q_curr, q_prev) -> np.ndarray:
    """Per-period oscillation flag: 1 unless strictly monotone over 3 points."""
    q_next = np.asarray(q_next, dtype=float)
    q_curr = np.asarray(q_curr, dtype=float)
    q_prev = np.asarray(q_prev, dtype=float)
    monotone = ((q_next > q_curr) & (q_curr > q_prev)) | ((q_next < q_curr) & (q_curr < q_prev))
    return (~monotone).astype(int)


def update_delta(delta, o, eta: bool, gamma: float) -> np.ndarray:
    """Shrink the step limit by gamma where oscillating, unless settling."""
    delta = np.asarray(delta, dtype=float)
    if eta:
        return delta.copy()
    return delta * gamma ** np.asarray(o)


def closed_form_response(u: QuasiCPEUtility, solar: float, price: float, q_prime: float, delta: float) -> float:
    """Single-period, battery-free response: the clamped demand-curve map.

    The unconstrained trade takes the inverse marginal utility at the price,
    saturated where nonnegative consumption binds, and is then clamped to
    the step-limit interval around the standing offer.
    """
    mu_floor = u.marginal_utility(0.0)
    if price >= mu_floor:
        q_dag = -solar
    else:
        q_dag = u.inverse_demand(price) - solar
    if abs(q_dag - q_prime) <= delta:
        return float(q_dag)
    if q_dag > q_prime + delta:
        return float(q_prime + delta)
    return float(q_prime - delta)


def _ideal_battery_only(agent: AgentSpec):
    b = agent.battery
    if b is not None and isinstance(b, ExtendedBattery):
        raise SolverError(f"agent {agent.name}: negotiation supports ideal batteries only")
    return b


def _t1_discharge_cap(b: IdealBattery) -> float:
    cap = min(float(np.atleast_1d(np.asarray(b.p_max, dtype=float))[0]), b.s0 / b.dt)
    if b.s_final_min is not None:
        cap = min(cap, (b.s0 - b.s_final_min) / b.dt)
    return max(cap, 0.0)


class _QModel:
    """One proposer's decision problems, with a closed-form fast path."""

    def __init__(self, agent: AgentSpec, dt: float):
        self.agent = agent
        self.T = agent.horizon
        b = _ideal_battery_only(agent)
        self.closed_form = b is None or self.T == 1
        if self.closed_form:
            extra = _t1_discharge_cap(b) if b is not None else 0.0
            self.solar_eff = agent.solar.astype(float) + extra
        else:
            T = self.T
            self._d = cp.Variable(T)
            self._q = cp.Variable(T)
            self._pb = cp.Variable(T)
            self._pi = cp.Parameter(T)
            self._qlo = cp.Parameter(T)
            self._qhi = cp.Parameter(T)
            cons = [
                # microscopic slack absorbs feasibility noise in offers that
                # arrive from other agents' conic solves
                self._d >= -1e-7,
                self._d == agent.solar + self._pb + self._q,
                self._q >= self._qlo,
                self._q <= self._qhi,
                self._pb >= -b.power_limits(T),
                self._pb <= b.power_limits(T),
                dt * cp.cumsum(self._pb) <= b.s0,
                -dt * cp.cumsum(self._pb) <= b.energy_limits(T) - b.s0,
            ]
            if b.s_final_min is not None:
                cons.append(dt * cp.sum(self._pb) <= b.s0 - b.s_final_min)
            util = {t: agent.utilities[t] for t in range(T)}
            objective = (
                utility_atoms(self._d, util)
                - self._pi @ self._q
                - TIE_BREAK_WEIGHT * (cp.sum_squares(self._q) + cp.sum_squares(self._pb))
            )
            self._problem = cp.Problem(cp.Maximize(objective), cons)
        self._no_trade: float | None = None

    def respond(self, price: np.ndarray, qlo: np.ndarray, qhi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Optimal step-limited trade and the consumption that goes with it."""
        if self.closed_form:
            if np.any(qhi < -self.solar_eff - 1e-9):
                raise SolverError(f"agent {self.agent.name}: step window excludes all feasible trades")
            q_dag = np.array(
                [u.inverse_demand(max(p, 1e-12)) for u, p in zip(self.agent.utilities, price)]
            ) - self.solar_eff
            q = np.clip(q_dag, qlo, qhi)
            return q, np.maximum(self.solar_eff + q, 0.0)
        self._pi.value = price
        self._qlo.value = qlo
        self._qhi.value = qhi
        self._solve()
        return np.asarray(self._q.value, dtype=float), np.maximum(np.asarray(self._d.value, dtype=float), 0.0)

    def utility_of(self, d: np.ndarray) -> float:
        return float(sum(u.utility_value(v) for u, v in zip(self.agent.utilities, np.maximum(d, 0.0))))

    def consumption_value(self, q_fixed: np.ndarray) -> float:
        """Best achievable utility with the trade pinned at ``q_fixed``."""
        if self.closed_form:
            d = self.solar_eff + q_fixed
            if np.any(d < -1e-7):
                raise SolverError(f"agent {self.agent.name}: pinned trade is infeasible")
            d = np.maximum(d, 0.0)
            return float(sum(u.utility_value(v) for u, v in zip(self.agent.utilities, d)))
        self._pi.value = np.zeros(self.T)
        self._qlo.value = q_fixed
        self._qhi.value = q_fixed
        self._solve()
        d = np.maximum(np.asarray(self._d.value, dtype=float), 0.0)
        return float(sum(u.utility_value(v) for u, v in zip(self.agent.utilities, d)))

    def no_trade_value(self) -> float:
        if self._no_trade is None:
            self._no_trade = self.consumption_value(np.zeros(self.T))
        return self._no_trade

    def _solve(self):
        _quiet_solve(self._problem)
        if self._problem.status not in ("optimal", "optimal_inaccurate"):
            raise SolverError(f"agent {self.agent.name}: response solve failed ({self._problem.status})")


class _PiModel:
    """The pricing agent's projection and pricing problems."""

    def __init__(self, agent: AgentSpec, dt: float):
        self.agent = agent
        self.T = agent.horizon
        b = _ideal_battery_only(agent)
        self.closed_form = b is None or self.T == 1
        if self.closed_form:
            extra = _t1_discharge_cap(b) if b is not None else 0.0
            self.solar_eff = agent.solar.astype(float) + extra
        else:
            T = self.T
            bat_rows = lambda pb: [
                pb >= -b.power_limits(T),
                pb <= b.power_limits(T),
                dt * cp.cumsum(pb) <= b.s0,
                -dt * cp.cumsum(pb) <= b.energy_limits(T) - b.s0,
            ] + ([dt * cp.sum(pb) <= b.s0 - b.s_final_min] if b.s_final_min is not None else [])
            # projection: smallest move along the line toward the safe point
            self._beta = cp.Variable()
            self._pb_proj = cp.Variable(T)
            self._S = cp.Parameter(T)
            self._Shat = cp.Parameter(T)
            self._X = cp.Parameter(T)
            demand = agent.solar + self._pb_proj - self._X - self._S - self._beta * (self._Shat - self._S)
            self._proj_problem = cp.Problem(
                cp.Minimize(self._beta),
                [demand >= 0, self._beta >= 0, self._beta <= 1] + bat_rows(self._pb_proj),
            )
            # pricing: utility maximization against committed quantities;
            # the tiny demand floor absorbs projection-tolerance noise
            self._d = cp.Variable(T)
            self._pb = cp.Variable(T)
            self._Q = cp.Parameter(T)
            util = {t: agent.utilities[t] for t in range(T)}
            self._price_problem = cp.Problem(
                cp.Maximize(utility_atoms(self._d, util) - TIE_BREAK_WEIGHT * cp.sum_squares(self._pb)),
                [self._d >= -1e-7, self._d == agent.solar + self._pb - self._Q] + bat_rows(self._pb),
            )

    def project(self, S: np.ndarray, S_hat: np.ndarray, X: np.ndarray) -> float:
        """Minimal blend toward the safe point that admits a feasible schedule."""
        if self.closed_form:
            room = self.solar_eff - X
            beta = 0.0
            for t in range(self.T):
                if S[t] > room[t]:
                    span = S[t] - S_hat[t]
                    if span <= 0:
                        raise SolverError(f"agent {self.agent.name}: safe point is not feasible")
                    beta = max(beta, (S[t] - room[t]) / span)
            return min(beta, 1.0)
        self._S.value = S
        self._Shat.value = S_hat
        self._X.value = X
        _quiet_solve(self._proj_problem)
        if self._proj_problem.status not in ("optimal", "optimal_inaccurate"):
            raise SolverError(f"agent {self.agent.name}: projection failed ({self._proj_problem.status})")
        beta = float(self._beta.value)
        if beta < 1e-12:
            return 0.0
        # nudge toward the safe point so the priced schedule is strictly
        # feasible despite the conic solver's own feasibility tolerance
        return min(beta + 1e-7, 1.0)

    def price_and_value(self, Q: np.ndarray, d_tol: float = 1e-9):
        """Marginal-utility price, consumption utility, and zero-demand flags."""
        if self.closed_form:
            d = self.solar_eff - Q
            if np.any(d < -1e-7):
                raise SolverError(f"agent {self.agent.name}: committed quantities are infeasible")
            d = np.maximum(d, 0.0)
        else:
            self._Q.value = Q
            _quiet_solve(self._price_problem)
            if self._price_problem.status not in ("optimal", "optimal_inaccurate"):
                raise SolverError(f"agent {self.agent.name}: pricing failed ({self._price_problem.status})")
            d = np.maximum(np.asarray(self._d.value, dtype=float), 0.0)
        price = np.array([u.marginal_utility(v) for u, v in zip(self.agent.utilities, d)])
        value = float(sum(u.utility_value(v) for u, v in zip(self.agent.utilities, d)))
        degenerate = [int(t + 1) for t in np.nonzero(d <= d_tol)[0]]
        return price, value, degenerate


class PriceResponse(NamedTuple):
    price: np.ndarray
    alpha_v: bool
    degenerate_periods: list[int]


def pi_project(q: dict[str, np.ndarray], q_hat: dict[str, np.ndarray], v: AgentSpec, exited_quantities: dict[str, np.ndarray] | None = None, dt: float = 1.0):
    """Project proposals onto the pricing agent's feasible set.

    Returns the blended quantities and the minimal blend weight beta, where
    beta = 0 keeps the proposals and beta = 1 returns the safe point.
    """
    model = _PiModel(v, dt)
    T = v.horizon
    X = np.zeros(T)
    for arr in (exited_quantities or {}).values():
        X = X + np.asarray(arr, dtype=float)
    S = np.zeros(T)
    S_hat = np.zeros(T)
    for name in q:
        S = S + np.asarray(q[name], dtype=float)
        S_hat = S_hat + np.asarray(q_hat[name], dtype=float)
    beta = model.project(S, S_hat, X)
    q_prime = {name: beta * np.asarray(q_hat[name], float) + (1 - beta) * np.asarray(q[name], float) for name in q}
    return q_prime, beta


def pi_price(q_prime: dict[str, np.ndarray], v: AgentSpec, exited_quantities: dict[str, np.ndarray] | None = None, dt: float = 1.0) -> PriceResponse:
    """Price the offer at the agent's marginal utility and compare to no trade."""
    model = _PiModel(v, dt)
    T = v.horizon
    X = np.zeros(T)
    for arr in (exited_quantities or {}).values():
        X = X + np.asarray(arr, dtype=float)
    S = np.zeros(T)
    for arr in q_prime.values():
        S = S + np.asarray(arr, dtype=float)
    price, value, degenerate = model.price_and_value(X + S)
    try:
        _, ref_value, _ = model.price_and_value(X)
    except SolverError:
        ref_value = -np.inf
    alpha_v = value + float(price @ S) >= ref_value - ALPHA_SLACK
    return PriceResponse(price, alpha_v, degenerate)


def q_respond(k: AgentSpec, price, q_prime_k, delta_k, cfg: NegotiationConfig, dt: float = 1.0):
    """Step-limited best response of one proposer to a priced offer."""
    price = np.asarray(price, dtype=float)
    q_prime_k = np.asarray(q_prime_k, dtype=float)
    delta_k = np.asarray(delta_k, dtype=float)
    if np.any(delta_k <= 0):
        raise ValueError("step limits must be positive")
    model = _QModel(k, dt)
    q, _ = model.respond(price, q_prime_k - delta_k, q_prime_k + delta_k)
    offer_value = model.consumption_value(q_prime_k)
    alpha = offer_value - float(price @ q_prime_k) >= model.no_trade_value() - ALPHA_SLACK
    eta = bool(np.max(np.abs(q - q_prime_k)) <= cfg.gamma * cfg.epsilon)
    return q, alpha, eta


def _offer_alpha(model: _QModel, price, q_prime, q_next, d_next):
    """Offer utility, trade-preference flag, and whether the value is exact.

    Shifting the step-limited response's trade to the pinned offer while
    keeping the battery schedule gives a feasible point of the pinned
    problem, hence a lower bound on its value; when the bound already
    certifies the preference, the second solve is skipped. The bound can
    only certify acceptance, never rejection.
    """
    threshold = model.no_trade_value() - ALPHA_SLACK
    payment = float(price @ q_prime)
    if not model.closed_form:
        d_shift = d_next + (q_prime - q_next)
        if np.all(d_shift >= -1e-7):
            bound = model.utility_of(d_shift)
            if bound - payment >= threshold:
                return bound, True, False
    value = model.consumption_value(q_prime)
    return value, value - payment >= threshold, True


def run_negotiation(sc: Scenario, cfg: NegotiationConfig) -> TradeLedger:
    """Run the bounded cobweb iteration until everyone settles or M rounds.

    Proposals start at zero, which is feasible for every agent, and the
    safe point starts there too. Settlements require every remaining
    participant (including the pricing agent) to prefer the current offer
    to no trade; settled quantities are frozen into the pricing agent's
    constraints for the rest of the run.
    """
    T = sc.T
    v = sc.agents[cfg.pi_agent_index]
    names = [a.name for a in sc.agents]
    if len(set(names)) != len(names):
        raise ValueError("agent names must be unique")
    pi_model = _PiModel(v, sc.dt)
    q_models = {a.name: _QModel(a, sc.dt) for i, a in enumerate(sc.agents) if i != cfg.pi_agent_index}

    ledger = TradeLedger(pi_agent=v.name)
    states = {
        name: QAgentState(delta=np.full(T, float(cfg.delta0)), q_hist=[np.zeros(T)])
        for name in q_models
    }
    negotiating = list(q_models)
    q_hat = {name: np.zeros(T) for name in q_models}
    X_tot = np.zeros(T)
    ref_value: float | None = None

    for name, model in q_models.items():
        ledger.no_trade_utility[name] = model.no_trade_value()
    _, v_ref0, _ = pi_model.price_and_value(np.zeros(T))
    ledger.no_trade_utility[v.name] = v_ref0

    i = 1
    while negotiating and i <= cfg.max_iters:
        S = np.sum([states[k].q_hist[-1] for k in negotiating], axis=0)
        S_hat = np.sum([q_hat[k] for k in negotiating], axis=0)
        beta = pi_model.project(S, S_hat, X_tot)
        q_prime = {
            k: beta * q_hat[k] + (1 - beta) * states[k].q_hist[-1] for k in negotiating
        }
        total_prime = np.sum([q_prime[k] for k in negotiating], axis=0)
        price, v_value, degenerate = pi_model.price_and_value(X_tot + total_prime)
        for t in degenerate:
            ledger.degenerate_price_periods.append((i, t))
        if ref_value is None:
            # settled deliveries may only be servable with the remaining
            # agents' trades; refusing to trade is then not an option at all
            try:
                _, ref_value, _ = pi_model.price_and_value(X_tot)
            except SolverError:
                ref_value = -np.inf
        alpha_v = v_value + float(price @ total_prime) >= ref_value - ALPHA_SLACK

        record = IterationRecord(
            iteration=i,
            beta=beta,
            price=price.copy(),
            alpha_v=alpha_v,
            q={k: states[k].q_hist[-1].copy() for k in negotiating},
            q_prime={k: q_prime[k].copy() for k in negotiating},
            q_next={},
            alpha={},
            eta={},
            delta={k: states[k].delta.copy() for k in negotiating},
            oscillating={},
            exited=[],
        )

        offer_values = {}
        offer_exact = {}
        for k in negotiating:
            st = states[k]
            model = q_models[k]
            q_next, d_next = model.respond(price, q_prime[k] - st.delta, q_prime[k] + st.delta)
            value, st.alpha, exact = _offer_alpha(model, price, q_prime[k], q_next, d_next)
            offer_values[k] = value
            offer_exact[k] = exact
            st.eta = bool(np.max(np.abs(q_next - q_prime[k])) <= cfg.gamma * cfg.epsilon)
            if i <= 2:
                # no full proposal history yet; treat as oscillating
                o = np.ones(T, dtype=int)
            else:
                o = update_oscillation(q_next, st.q_hist[-1], st.q_hist[-2])
            st.osc_count += int(np.any(o))
            # floor at gamma^2 * eps: already-settled periods keep counting
            # as oscillating, and an unfloored limit would shrink into a
            # numerically degenerate window without affecting settlement
            st.delta = np.maximum(
                update_delta(st.delta, o, st.eta, cfg.gamma), cfg.gamma**2 * cfg.epsilon
            )
            st.q_hist.append(q_next)
            if len(st.q_hist) > 3:
                st.q_hist.pop(0)
            record.q_next[k] = q_next.copy()
            record.alpha[k] = st.alpha
            record.eta[k] = st.eta
            record.oscillating[k] = o

        if alpha_v and all(states[k].alpha for k in negotiating):
            for k in negotiating:
                q_hat[k] = q_prime[k].copy()
            for k in [k for k in negotiating if states[k].eta]:
                st = states[k]
                st.exited = True
                st.settled_price = price.copy()
                st.settled_quantity = q_prime[k].copy()
                payment = float(price @ q_prime[k])
                if not offer_exact[k]:
                    offer_values[k] = q_models[k].consumption_value(q_prime[k])
                ledger.final_trades[k] = FinalTrade(
                    price=price.copy(),
                    quantity=q_prime[k].copy(),
                    payment=payment,
                    consumption_utility=offer_values[k],
                    exit_iteration=i,
                )
                ledger.pi_agent_revenue += payment
                X_tot = X_tot + q_prime[k]
                negotiating.remove(k)
                record.exited.append(k)
            if record.exited:
                ref_value = None  # committed set changed; recompute the no-trade anchor
        ledger.records.append(record)
        i += 1

    ledger.iterations = len(ledger.records)
    ledger.termination = "all-exited" if not negotiating else "max-iters"
    try:
        _, final_value, _ = pi_model.price_and_value(X_tot)
    except SolverError:
        # only reachable at max-iters, when settled deliveries counted on
        # trades that never materialized
        final_value = -np.inf
        ledger.pi_agent_schedule_feasible = False
    ledger.pi_agent_consumption_utility = final_value
    return ledger
