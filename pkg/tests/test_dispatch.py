import numpy as np
import pytest

from gridtrade.battery import ExtendedBattery, IdealBattery, check_feasible, check_feasible_ext
from gridtrade.dispatch import (
    AgentSpec,
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
from gridtrade.utility import build_utility


def flat_utility(pi0=0.15, d0=2.0, r_hat=-2.0, T=3):
    return tuple(build_utility(pi0, d0, r_hat) for _ in range(T))


def test_single_consumer_full_solar_price_is_marginal_utility():
    T = 3
    cap = 1.2
    uts = flat_utility(T=T)
    sc = Scenario(dt=1.0, agents=(AgentSpec("a", uts, [cap] * T),))
    sol = solve_centralized(sc)
    np.testing.assert_allclose(sol.demand[0], cap, atol=1e-8)
    expected_price = uts[0].marginal_utility(cap)
    np.testing.assert_allclose(sol.price, expected_price, atol=1e-8)


def test_two_identical_consumers_split_equally():
    T = 2
    uts = flat_utility(T=T)
    generator = AgentSpec("g", flat_utility(T=T), [3.0, 1.0])
    consumer = AgentSpec("c", uts, [0.0, 0.0])
    sc = Scenario(dt=1.0, agents=(generator, consumer))
    sol = solve_centralized(sc)
    # identical utilities: both agents consume the same amount each period
    np.testing.assert_allclose(sol.demand[0], sol.demand[1], atol=1e-7)


def test_centralized_matches_grid_oracle():
    from oracles import centralized_grid_oracle_t2

    u1 = (build_utility(0.15, 1.0, -2.0), build_utility(0.10, 0.8, -2.0))
    u2 = (build_utility(0.25, 1.5, -1.5), build_utility(0.30, 1.0, -1.2))
    caps = np.array([1.4, 0.6])
    p_max, s_cap, s0 = 0.5, 1.0, 0.5
    expected = centralized_grid_oracle_t2(u1, u2, caps, p_max, s_cap, s0)
    bat = IdealBattery(p_max=p_max, s_max=s_cap, s0=s0, dt=1.0)
    sc = Scenario(
        dt=1.0,
        agents=(
            AgentSpec("a1", u1, [1.0, 0.3], battery=bat),
            AgentSpec("a2", u2, [0.4, 0.3]),
        ),
    )
    sol = solve_centralized(sc)
    assert sol.objective == pytest.approx(expected, abs=1e-4)


def test_best_response_consumer():
    uts = flat_utility(T=4)
    d = best_response_consumer(uts, [0.15, 0.15, 0.15, 0.15])
    np.testing.assert_allclose(d, 2.0, atol=1e-12)
    d = best_response_consumer(uts, [50.0, 50.0, 50.0, 50.0])
    np.testing.assert_allclose(d, 0.0)
    with pytest.raises(ValueError):
        best_response_consumer(uts, [0.1, -0.2, 0.1, 0.1])


def test_best_response_consumer_matches_solver():
    from gridtrade.solver import ConcaveProgram, solve_concave_program

    uts = flat_utility(T=1)
    for price in (0.07, 0.2, 0.31):
        d = best_response_consumer(uts[:1], [price])
        prog = ConcaveProgram(num_vars=1, cost=np.array([price]), utilities={0: uts[0]}, lower=np.zeros(1))
        res = solve_concave_program(prog)
        assert res.x[0] == pytest.approx(d[0], abs=1e-7)


def test_battery_best_response_reference_case():
    b = IdealBattery(p_max=3.0, s_max=10.0, s0=5.0, dt=1.0)
    price = [1.0, 1.0, 2.0, 3.0, 1.0]
    p, obj = best_response_battery(b, price)
    assert obj == pytest.approx(-14.0, abs=1e-9)
    assert check_feasible(b, p) == []
    # all three hand dispatches are optimal and feasible
    for cand in ([-0.5, -0.5, 3, 3, 0], [0, -1, 3, 3, 0], [-1, -1, 3, 3, 1]):
        cand = np.asarray(cand, dtype=float)
        assert check_feasible(b, cand) == []
        assert -np.dot(price, cand) == pytest.approx(-14.0, abs=1e-12)


def test_battery_best_response_sells_everything_at_flat_price():
    b = IdealBattery(p_max=100.0, s_max=10.0, s0=4.0, dt=1.0)
    p, obj = best_response_battery(b, [0.2, 0.2, 0.2])
    assert obj == pytest.approx(-0.2 * 4.0, abs=1e-9)


def test_battery_best_response_zero_price():
    b = IdealBattery(p_max=3.0, s_max=10.0, s0=5.0, dt=1.0)
    _, obj = best_response_battery(b, [0.0, 0.0])
    assert obj == pytest.approx(0.0, abs=1e-12)


def test_extended_battery_reference_case():
    b = ExtendedBattery(
        p_max_discharge=3.0,
        p_max_charge=2.0,
        sigma_plus=0.95,
        sigma_minus=0.9,
        theta=0.98,
        s_max=10.0,
        s0=5.0,
        dt=1.0,
    )
    price = np.array([1.0, 1 / 0.98, 2.0, 3.0, 1 / (0.95 * 0.9 * 0.98**4)])
    p_dis, p_chg, obj = best_response_battery_ext(b, price)
    assert obj == pytest.approx(-13.063, abs=1e-3)
    assert np.all(p_dis * p_chg == 0.0)
    assert check_feasible_ext(b, p_dis, p_chg) == []
    for cand in ([-0.9587, -0.9587, 3, 3, 0], [0, -1.8983, 3, 3, 0], [-1.5863, -1.5863, 3, 3, 1]):
        cand = np.asarray(cand, dtype=float)
        value = -float(price @ cand)
        assert value == pytest.approx(-13.063, abs=1e-3)
        assert check_feasible_ext(b, np.maximum(cand, 0), np.maximum(-cand, 0), tol=1e-4) == []


def test_best_response_solar():
    out, flagged = best_response_solar([2.0, 3.0], [0.1, 0.2])
    np.testing.assert_allclose(out, [2.0, 3.0])
    assert flagged == []
    out, flagged = best_response_solar([2.0, 3.0], [0.0, 0.0])
    np.testing.assert_allclose(out, [2.0, 3.0])
    out, flagged = best_response_solar([2.0, 3.0, 1.0], [0.1, -0.2, 0.0])
    np.testing.assert_allclose(out, [2.0, 0.0, 1.0])
    assert flagged == [2]


@pytest.fixture
def battery_scenario():
    rng = np.random.default_rng(11)
    T = 6
    agents = []
    for i in range(3):
        loads = rng.uniform(0.5, 2.5, T)
        uts = tuple(build_utility(0.15, l, float(rng.uniform(-2.8, -1.2))) for l in loads)
        solar = rng.uniform(0, 2.0, T)
        battery = IdealBattery(p_max=1.0, s_max=2.0, s0=1.0, dt=1.0) if i < 2 else None
        agents.append(AgentSpec(f"a{i}", uts, solar, battery=battery))
    return Scenario(dt=1.0, agents=tuple(agents))


def test_verify_kkt_on_optimal_solution(battery_scenario):
    sol = solve_centralized(battery_scenario)
    rep = verify_kkt(battery_scenario, sol)
    assert rep.stationarity_demand <= 1e-6
    assert rep.stationarity_battery <= 1e-6
    assert rep.stationarity_solar <= 1e-6
    assert rep.price_dynamics <= 1e-5
    assert rep.duality_gap <= 1e-6
    assert rep.balance_residual <= 1e-6
    assert rep.prices_positive
    assert rep.full_solar_gap <= 1e-6


def test_verify_kkt_detects_perturbation(battery_scenario):
    sol = solve_centralized(battery_scenario)
    sol.demand[0, 0] += 1e-2
    rep = verify_kkt(battery_scenario, sol)
    assert rep.stationarity_demand > 1e-3


def test_decomposition_identity_with_infeasible_battery_primal(battery_scenario):
    # the summed best responses hit the centralized welfare even though the
    # battery primal needn't balance power
    sol = solve_centralized(battery_scenario)
    rep = verify_kkt(battery_scenario, sol)
    total = rep.decomposition_consumers + rep.decomposition_solar + rep.decomposition_batteries
    assert total == pytest.approx(-sol.objective, abs=1e-5)


def test_remark_price_constant_interior():
    # one battery, flat optimal price: many optimal dispatches, one welfare
    b = IdealBattery(p_max=3.0, s_max=10.0, s0=5.0, dt=1.0)
    price = [1.0, 1.0, 2.0, 3.0, 1.0]
    d1, o1 = best_response_battery(b, price)
    d2, o2 = best_response_battery(b, price, canonical=True)
    assert o1 == pytest.approx(o2, abs=1e-6)
    assert check_feasible(b, d1) == [] and check_feasible(b, d2) == []
    # the two optimizers genuinely differ: non-uniqueness demonstrated
    assert np.max(np.abs(d1 - d2)) > 1e-3


def test_extended_limit_reproduces_ideal():
    T = 4
    uts = flat_utility(T=T)
    ideal = IdealBattery(p_max=1.0, s_max=3.0, s0=1.5, dt=1.0)
    ext = ExtendedBattery(
        p_max_discharge=1.0,
        p_max_charge=1.0,
        sigma_plus=1.0,
        sigma_minus=1.0,
        theta=1 - 1e-9,
        s_max=3.0,
        s0=1.5,
        dt=1.0,
    )
    solar = [2.5, 0.5, 2.0, 0.3]
    sc_ideal = Scenario(dt=1.0, agents=(AgentSpec("a", uts, solar, battery=ideal),))
    sc_ext = Scenario(dt=1.0, agents=(AgentSpec("a", uts, solar, battery=ext),))
    sol_i = solve_centralized(sc_ideal)
    sol_e = solve_centralized_ext(sc_ext)
    assert sol_e.objective == pytest.approx(sol_i.objective, abs=1e-6)
    np.testing.assert_allclose(sol_e.price, sol_i.price, atol=1e-5)


def test_extended_centralized_properties():
    rng = np.random.default_rng(5)
    T = 5
    agents = []
    for i in range(2):
        loads = rng.uniform(0.5, 2.0, T)
        uts = tuple(build_utility(0.2, l, -1.8) for l in loads)
        solar = rng.uniform(0, 2.0, T)
        bat = ExtendedBattery(
            p_max_discharge=1.0,
            p_max_charge=0.8,
            sigma_plus=0.95,
            sigma_minus=0.9,
            theta=0.98,
            s_max=2.0,
            s0=1.0,
            dt=1.0,
        )
        agents.append(AgentSpec(f"e{i}", uts, solar, battery=bat))
    sc = Scenario(dt=1.0, agents=tuple(agents))
    sol = solve_centralized_ext(sc)
    # complementarity holds exactly after repair, balance re-verified
    assert np.nanmax(sol.discharge * sol.charge) == 0.0
    assert sol.balance_residual <= 1e-6
    rep = verify_kkt(sc, sol)
    assert rep.stationarity_demand <= 1e-6
    assert rep.stationarity_battery <= 1e-5
    assert rep.price_dynamics <= 1e-5
    assert rep.duality_gap <= 1e-5


def test_no_trade_solution_consumer_only():
    uts = flat_utility(T=2)
    agent = AgentSpec("solo", uts, [1.0, 0.5])
    sol = no_trade_solution(agent, dt=1.0)
    expected = uts[0].utility_value(1.0) + uts[1].utility_value(0.5)
    assert sol.objective == pytest.approx(expected, abs=1e-8)


def test_scenario_serialization_round_trip(battery_scenario):
    text = battery_scenario.to_json()
    again = Scenario.from_json(text)
    assert again.to_json() == text
    assert again.T == battery_scenario.T
