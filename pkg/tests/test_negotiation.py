import numpy as np
import pytest

from gridtrade.battery import IdealBattery
from gridtrade.dispatch import AgentSpec, Scenario, solve_centralized
from gridtrade.negotiation import (
    NegotiationConfig,
    closed_form_response,
    pi_price,
    pi_project,
    q_respond,
    run_negotiation,
    update_delta,
    update_oscillation,
)
from gridtrade.scenario import random_pair_scenario
from gridtrade.utility import build_utility


CFG = NegotiationConfig(gamma=0.5, epsilon=1e-3, delta0=0.5)


def pair_scenario(solar_v=4.0, solar_k=0.5, pi_v=0.08, pi_k=0.30):
    uv = build_utility(pi_v, 1.0, -1.2)
    uk = build_utility(pi_k, 2.0, -2.0)
    return Scenario(dt=1.0, agents=(AgentSpec("v", (uv,), [solar_v]), AgentSpec("k", (uk,), [solar_k])))


def test_config_validation():
    with pytest.raises(ValueError):
        NegotiationConfig(gamma=1.2, epsilon=1e-3, delta0=0.5)
    with pytest.raises(ValueError):
        NegotiationConfig(gamma=0.5, epsilon=-1.0, delta0=0.5)
    with pytest.raises(ValueError):
        # initial step must exceed gamma * epsilon
        NegotiationConfig(gamma=0.5, epsilon=1.0, delta0=0.4)


def test_update_oscillation_cases():
    assert update_oscillation([3.0], [2.0], [1.0]) == np.array([0])
    assert update_oscillation([1.0], [2.0], [3.0]) == np.array([0])
    assert update_oscillation([2.0], [3.0], [1.0]) == np.array([1])
    assert update_oscillation([2.0], [2.0], [2.0]) == np.array([1])
    np.testing.assert_array_equal(
        update_oscillation([3.0, 1.0], [2.0, 2.0], [1.0, 3.0]), [0, 0]
    )


def test_update_delta_cases():
    np.testing.assert_allclose(update_delta([2.0], [1], eta=False, gamma=0.5), [1.0])
    np.testing.assert_allclose(update_delta([2.0], [0], eta=False, gamma=0.5), [2.0])
    np.testing.assert_allclose(update_delta([2.0], [1], eta=True, gamma=0.5), [2.0])


def test_closed_form_response_branches():
    u = build_utility(0.3, 2.0, -2.0)
    solar = 0.5
    # saturated branch: price above the marginal utility at zero consumption
    high = u.marginal_utility(0.0) * 2
    assert closed_form_response(u, solar, high, q_prime=0.0, delta=10.0) == pytest.approx(-solar)
    # interior branch
    q_dag = u.inverse_demand(0.2) - solar
    assert closed_form_response(u, solar, 0.2, q_prime=q_dag - 0.01, delta=1.0) == pytest.approx(q_dag)
    # clamp above and below
    assert closed_form_response(u, solar, 0.2, q_prime=q_dag - 1.0, delta=0.25) == pytest.approx(q_dag - 0.75)
    assert closed_form_response(u, solar, 0.2, q_prime=q_dag + 1.0, delta=0.25) == pytest.approx(q_dag + 0.75)


def test_closed_form_matches_q_respond_fast_path():
    rng = np.random.default_rng(3)
    u = build_utility(0.3, 2.0, -2.0)
    k = AgentSpec("k", (u,), [0.5])
    for _ in range(50):
        price = float(rng.uniform(0.02, 1.0))
        # offers handed to an agent are always feasible for it (q >= -solar)
        q_prime = float(rng.uniform(-0.5, 3.0))
        delta = float(rng.uniform(0.05, 1.0))
        expected = closed_form_response(u, 0.5, price, q_prime, delta)
        q, _, _ = q_respond(k, [price], [q_prime], [delta], CFG)
        assert q[0] == pytest.approx(expected, abs=1e-8)


def test_closed_form_matches_solver_path():
    # pinned zero-capacity battery forces the generic conic path at T=2
    rng = np.random.default_rng(4)
    u = build_utility(0.3, 2.0, -2.0)
    bat = IdealBattery(p_max=0.0, s_max=0.0, s0=0.0, dt=1.0)
    k = AgentSpec("k", (u, u), [0.5, 0.5], battery=bat)
    for _ in range(10):
        price = rng.uniform(0.05, 0.6, 2)
        q_prime = rng.uniform(-0.5, 2.0, 2)
        delta = rng.uniform(0.1, 1.0, 2)
        q, _, _ = q_respond(k, price, q_prime, delta, CFG)
        for t in range(2):
            expected = closed_form_response(u, 0.5, float(price[t]), float(q_prime[t]), float(delta[t]))
            # structural equivalence; conic primal accuracy ~ sqrt(gap)
            assert q[t] == pytest.approx(expected, abs=1e-4)


def test_pi_project_feasible_passthrough():
    sc = pair_scenario()
    q = {"k": np.array([1.0])}
    q_hat = {"k": np.array([0.0])}
    q_prime, beta = pi_project(q, q_hat, sc.agents[0])
    assert beta == 0.0
    np.testing.assert_array_equal(q_prime["k"], q["k"])


def test_pi_project_scales_back_excess_demand():
    sc = pair_scenario(solar_v=2.0)
    q = {"k": np.array([5.0])}
    q_hat = {"k": np.array([0.0])}
    q_prime, beta = pi_project(q, q_hat, sc.agents[0])
    # beta-grid oracle: smallest beta on a fine grid admitting d >= 0
    grid = np.arange(0.0, 1.0 + 1e-9, 1e-4)
    feasible = grid[(1 - grid) * 5.0 <= 2.0]
    assert beta == pytest.approx(feasible[0], abs=1e-4)
    assert q_prime["k"][0] == pytest.approx(2.0, abs=1e-9)


def test_pi_project_at_safe_point_returns_zero():
    sc = pair_scenario()
    q = {"k": np.array([0.7])}
    q_prime, beta = pi_project(q, {"k": np.array([0.7])}, sc.agents[0])
    assert beta == 0.0


def test_pi_project_battery_matches_grid_oracle():
    u = build_utility(0.1, 1.0, -2.0)
    bat = IdealBattery(p_max=1.0, s_max=2.0, s0=1.0, dt=1.0)
    v = AgentSpec("v", (u, u), [1.0, 1.0], battery=bat)
    q = {"k": np.array([3.0, 0.5])}
    q_hat = {"k": np.zeros(2)}
    _, beta = pi_project(q, q_hat, v)
    # battery can add at most 1 kW per period within the energy budget
    grid = np.arange(0.0, 1.0 + 1e-9, 1e-4)
    ok = []
    for b in grid:
        qp = (1 - b) * q["k"]
        # max supportable draw: solar + battery discharge (power-limited,
        # energy-limited by s0 across both periods)
        d1 = 1.0 + 1.0 - qp[0]
        d2_energy = 1.0 + (1.0 - min(1.0, qp[0] - 1.0 if qp[0] > 1.0 else max(qp[0] - 1.0, 0.0))) - qp[1]
        ok.append(d1 >= -1e-12 and qp[0] + qp[1] <= 2.0 + 1.0 + 1e-12)
    first = grid[np.argmax(ok)]
    assert beta == pytest.approx(first, abs=2e-4)


def test_pi_price_no_trade_identity():
    sc = pair_scenario()
    v = sc.agents[0]
    price, alpha_v, degenerate = pi_price({"k": np.zeros(1)}, v)
    assert alpha_v
    assert degenerate == []
    assert price[0] == pytest.approx(v.utilities[0].marginal_utility(4.0), abs=1e-12)


def test_pi_price_single_period_formula():
    sc = pair_scenario()
    v = sc.agents[0]
    price, alpha_v, _ = pi_price({"k": np.array([1.5])}, v)
    assert price[0] == pytest.approx(v.utilities[0].marginal_utility(4.0 - 1.5), abs=1e-12)
    assert alpha_v  # paid at marginal utility, weakly better than no trade


def test_pi_price_free_energy_preferred():
    sc = pair_scenario()
    v = sc.agents[0]
    price, alpha_v, _ = pi_price({"k": np.array([-1.0])}, v)
    assert alpha_v
    assert price[0] < v.utilities[0].marginal_utility(4.0)


def test_pi_price_degenerate_flag_at_zero_demand():
    sc = pair_scenario(solar_v=2.0)
    v = sc.agents[0]
    price, _, degenerate = pi_price({"k": np.array([2.0])}, v)
    assert degenerate == [1]
    assert price[0] == pytest.approx(v.utilities[0].marginal_utility(0.0), abs=1e-12)


def test_q_respond_examples():
    u = build_utility(0.3, 2.0, -2.0)
    k = AgentSpec("k", (u,), [0.5])
    # fixed point: price at the no-trade marginal utility with zero offer
    fixed_price = u.marginal_utility(0.5)
    q, alpha, eta = q_respond(k, [fixed_price], [0.0], [0.5], CFG)
    assert q[0] == pytest.approx(0.0, abs=1e-12)
    assert alpha and eta
    # step-limit clamp from above
    q, _, eta = q_respond(k, [0.05], [0.0], [0.25], CFG)
    assert q[0] == pytest.approx(0.25)
    assert not eta
    with pytest.raises(ValueError):
        q_respond(k, [0.1], [0.0], [0.0], CFG)


def test_negotiation_settles_within_tolerance_of_centralized():
    sc = pair_scenario()
    sol = solve_centralized(sc)
    q_star = sol.demand[1, 0] - 0.5
    ledger = run_negotiation(sc, CFG)
    assert ledger.converged
    settled = ledger.final_trades["k"].quantity[0]
    assert abs(settled - q_star) <= CFG.epsilon


def test_empty_handed_pi_agent_settles_at_zero():
    # the pricing agent owns nothing; its scarcity price still sits below
    # the proposer's willingness to sell, so the only trade is zero
    uv = build_utility(0.02, 1.0, -1.5)
    uk = build_utility(0.30, 2.0, -2.0)
    sc = Scenario(dt=1.0, agents=(AgentSpec("v", (uv,), [0.0]), AgentSpec("k", (uk,), [1.0])))
    ledger = run_negotiation(sc, CFG)
    assert ledger.converged
    assert ledger.final_trades["k"].quantity[0] == pytest.approx(0.0, abs=CFG.epsilon)


def test_boundary_equilibrium_sells_all_solar():
    rng = np.random.default_rng(0)
    sc = random_pair_scenario(rng, boundary=True)
    sol = solve_centralized(sc)
    q_star = sol.demand[1, 0] - sc.agents[1].solar[0]
    assert q_star == pytest.approx(sc.agents[0].solar[0], abs=1e-6)
    ledger = run_negotiation(sc, CFG)
    assert ledger.converged
    assert abs(ledger.final_trades["k"].quantity[0] - q_star) <= CFG.epsilon


def test_ledger_trace_invariants():
    sc = pair_scenario()
    ledger = run_negotiation(sc, CFG)
    # settled trades appear in some iteration's (price, offer)
    for name, trade in ledger.final_trades.items():
        hit = False
        for rec in ledger.records:
            if name in rec.q_prime and np.array_equal(rec.q_prime[name], trade.quantity) and np.array_equal(
                rec.price, trade.price
            ):
                hit = True
        assert hit
    # step limits never increase
    for name in ("k",):
        deltas = [rec.delta[name] for rec in ledger.records if name in rec.delta]
        for a, b in zip(deltas, deltas[1:]):
            assert np.all(b <= a + 1e-15)
        # delta stays above gamma^2 * epsilon
        assert np.all(deltas[-1] > CFG.gamma * CFG.gamma * CFG.epsilon - 1e-15)
    # exits only at rounds where everyone prefers the offer
    for rec in ledger.records:
        if rec.exited:
            assert rec.alpha_v and all(rec.alpha.values())
    # payment conservation is exact ledger arithmetic
    assert ledger.pi_agent_revenue == sum(t.payment for t in ledger.final_trades.values())


def test_safe_point_stays_feasible_through_negotiation():
    sc = pair_scenario()
    ledger = run_negotiation(sc, CFG)
    v = sc.agents[0]
    for rec in ledger.records[:: max(1, len(ledger.records) // 5)]:
        q_hat_probe = {name: rec.q_prime[name] for name in rec.q_prime}
        _, beta = pi_project(q_hat_probe, q_hat_probe, v)
        assert beta == pytest.approx(0.0, abs=1e-9)


def test_weak_pareto_at_termination():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        sc = random_pair_scenario(rng)
        ledger = run_negotiation(sc, CFG)
        realized = ledger.realized_welfare()
        for name, base in ledger.no_trade_utility.items():
            assert realized[name] >= base - 1e-6


def lemma_traces(seed=123):
    rng = np.random.default_rng(seed)
    sc = random_pair_scenario(rng)
    sol = solve_centralized(sc)
    q_star = sol.demand[1, 0] - sc.agents[1].solar[0]
    ledger = run_negotiation(sc, CFG)
    return sc, q_star, ledger


def test_lemma_movement_towards_equilibrium():
    # direction of movement flips exactly at the equilibrium side
    sc, q_star, ledger = lemma_traces()
    if q_star >= sc.agents[0].solar[0] - 1e-9:
        pytest.skip("interior equilibrium required")
    for rec in ledger.records:
        if "k" not in rec.q_next:
            continue
        q_prime = rec.q_prime["k"][0]
        q_curr = rec.q["k"][0]
        q_next = rec.q_next["k"][0]
        if q_prime < q_star - 1e-9:
            assert q_next >= q_prime - 1e-9
            assert q_next >= q_curr - 1e-9
        elif q_prime > q_star + 1e-9:
            assert q_next <= q_prime + 1e-9
            assert q_next <= q_curr + 1e-9


def test_lemma_bounded_distance_when_oscillating():
    sc, q_star, ledger = lemma_traces()
    if q_star >= sc.agents[0].solar[0] - 1e-9:
        pytest.skip("interior equilibrium required")
    for rec in ledger.records:
        if rec.iteration <= 2 or "k" not in rec.oscillating:
            continue
        if rec.oscillating["k"][0]:
            bound = rec.delta["k"][0] / CFG.gamma
            assert abs(rec.q_prime["k"][0] - q_star) < bound + 1e-9


def test_lemma_delta_shrinks_to_settle_scale():
    # when settlement is forced by the shrinking step, the final step limit
    # is at or below the settle threshold (unless the response landed on
    # the offer naturally)
    sc, q_star, ledger = lemma_traces()
    last = ledger.records[-1]
    if not last.exited:
        pytest.skip("run did not settle")
    name = last.exited[0]
    delta_T = last.delta[name][0]
    gap = abs(last.q_next[name][0] - last.q_prime[name][0])
    assert delta_T <= CFG.gamma * CFG.epsilon + 1e-12 or gap <= CFG.gamma * CFG.epsilon


def test_multiagent_battery_negotiation_close_to_centralized():
    rng = np.random.default_rng(7)
    T = 6
    agents = []
    for i, name in enumerate(("v", "k1", "k2")):
        loads = rng.uniform(0.5, 2.0, T)
        uts = tuple(build_utility(0.15, l, float(rng.uniform(-2.5, -1.2))) for l in loads)
        solar = rng.uniform(0.0, 2.5, T)
        battery = IdealBattery(p_max=1.0, s_max=1.5, s0=0.75, dt=1.0)
        agents.append(AgentSpec(name, uts, solar, battery=battery))
    sc = Scenario(dt=1.0, agents=tuple(agents))
    sol = solve_centralized(sc)
    ledger = run_negotiation(sc, CFG)
    assert ledger.converged
    w_p2p = sum(ledger.realized_welfare().values())
    assert abs(sol.objective - w_p2p) / sol.objective < 0.01
    realized = ledger.realized_welfare()
    for name, base in ledger.no_trade_utility.items():
        assert realized[name] >= base - 1e-6


def test_max_iters_is_reported_not_raised():
    sc = pair_scenario()
    ledger = run_negotiation(sc, NegotiationConfig(gamma=0.5, epsilon=1e-3, delta0=0.5, max_iters=2))
    assert ledger.termination == "max-iters"
    assert ledger.iterations == 2
    assert ledger.final_trades == {}
    # unsettled proposers realize their no-trade optimum
    realized = ledger.realized_welfare()
    assert realized["k"] == ledger.no_trade_utility["k"]
