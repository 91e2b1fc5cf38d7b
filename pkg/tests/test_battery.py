import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridtrade.battery import (
    ExtendedBattery,
    IdealBattery,
    check_feasible,
    check_feasible_ext,
    repair_complementarity,
    soc_trajectory,
    soc_trajectory_ext,
)


@pytest.fixture
def reference_battery():
    return IdealBattery(p_max=3.0, s_max=10.0, s0=5.0, dt=1.0)


def test_zero_power_holds_charge(reference_battery):
    s = soc_trajectory(reference_battery, np.zeros(5))
    np.testing.assert_allclose(s, 5.0)


def test_trajectory_hand_recursion(reference_battery):
    np.testing.assert_allclose(
        soc_trajectory(reference_battery, [-0.5, -0.5, 3, 3, 0]), [5.5, 6.0, 3.0, 0.0, 0.0]
    )
    np.testing.assert_allclose(soc_trajectory(reference_battery, [0, -1, 3, 3, 0]), [5.0, 6.0, 3.0, 0.0, 0.0])


def test_reference_dispatches_feasible(reference_battery):
    for p in ([-0.5, -0.5, 3, 3, 0], [0, -1, 3, 3, 0], [-1, -1, 3, 3, 1]):
        assert check_feasible(reference_battery, p) == []


def test_power_violation_reported(reference_battery):
    report = check_feasible(reference_battery, [4, 0, 0, 0, 0])
    assert len(report) == 1
    assert report[0].t == 1 and report[0].constraint == "power"
    assert report[0].magnitude == pytest.approx(1.0)


def test_energy_violation_reported(reference_battery):
    # s = [2, -1, ...]: the store runs dry in period 2
    report = check_feasible(reference_battery, [3, 3, 0, 0, 0])
    assert any(v.constraint == "soc_low" and v.t == 2 for v in report)


def test_terminal_floor_violation():
    b = IdealBattery(p_max=3.0, s_max=10.0, s0=5.0, dt=1.0, s_final_min=4.0)
    assert any(v.constraint == "soc_final" for v in check_feasible(b, [2.0, 0.0]))
    assert check_feasible(b, [0.5, 0.5]) == []


def test_invalid_parameters():
    with pytest.raises(ValueError):
        IdealBattery(p_max=-1.0, s_max=10.0, s0=5.0)
    with pytest.raises(ValueError):
        IdealBattery(p_max=1.0, s_max=10.0, s0=11.0)
    with pytest.raises(ValueError):
        ExtendedBattery(3, 2, sigma_plus=1.2, sigma_minus=0.9, theta=0.98, s_max=10, s0=5)
    with pytest.raises(ValueError):
        ExtendedBattery(3, 2, sigma_plus=0.9, sigma_minus=0.9, theta=1.0, s_max=10, s0=5)


@pytest.fixture
def ext_battery():
    return ExtendedBattery(
        p_max_discharge=3.0,
        p_max_charge=2.0,
        sigma_plus=0.95,
        sigma_minus=0.9,
        theta=0.98,
        s_max=10.0,
        s0=5.0,
        dt=1.0,
    )


def test_ext_pure_self_discharge(ext_battery):
    s = soc_trajectory_ext(ext_battery, np.zeros(4), np.zeros(4))
    np.testing.assert_allclose(s, 5.0 * 0.98 ** np.arange(1, 5))


def test_ext_one_step_charge():
    b = ExtendedBattery(3, 2, sigma_plus=0.95, sigma_minus=0.9, theta=0.98, s_max=10, s0=0, dt=1.0)
    np.testing.assert_allclose(soc_trajectory_ext(b, [0.0], [1.0]), [0.9])


def test_ext_one_step_discharge():
    b = ExtendedBattery(3, 2, sigma_plus=0.95, sigma_minus=0.9, theta=0.9999999999, s_max=10, s0=1, dt=1.0)
    # withdrawing 0.95/0.95 = 1 empties the store (retention ~ 1)
    np.testing.assert_allclose(soc_trajectory_ext(b, [0.95], [0.0]), [0.0], atol=1e-9)


def test_ext_negative_flow_rejected(ext_battery):
    with pytest.raises(ValueError):
        soc_trajectory_ext(ext_battery, [-0.1], [0.0])


def test_repair_examples(ext_battery):
    p_dis, p_chg = repair_complementarity(ext_battery, np.zeros(3), np.zeros(3))
    np.testing.assert_allclose(p_dis, 0.0)
    np.testing.assert_allclose(p_chg, 0.0)

    # hand evaluation: 0.95 * (0.95/0.95 - 0.9*0.5) = 0.5225
    p_dis, p_chg = repair_complementarity(ext_battery, np.array([0.95]), np.array([0.5]))
    assert p_dis[0] == pytest.approx(0.5225, abs=1e-12)
    assert p_chg[0] == pytest.approx(0.0)

    # exact cancellation: withdraw rate * dis == charge eff * chg
    dis = 0.95 * 0.9 * 1.2
    p_dis, p_chg = repair_complementarity(ext_battery, np.array([dis]), np.array([1.2]))
    np.testing.assert_allclose([p_dis[0], p_chg[0]], 0.0, atol=1e-15)


def test_repair_rejects_out_of_box(ext_battery):
    with pytest.raises(ValueError):
        repair_complementarity(ext_battery, np.array([5.0]), np.array([0.0]))


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_repair_properties_random(seed):
    rng = np.random.default_rng(seed)
    b = ExtendedBattery(
        p_max_discharge=3.0,
        p_max_charge=2.0,
        sigma_plus=float(rng.uniform(0.5, 1.0)),
        sigma_minus=float(rng.uniform(0.5, 1.0)),
        theta=float(rng.uniform(0.8, 0.999)),
        s_max=50.0,
        s0=25.0,
        dt=1.0,
    )
    T = int(rng.integers(1, 8))
    p_dis = rng.uniform(0, 3, T)
    p_chg = rng.uniform(0, 2, T)
    r_dis, r_chg = repair_complementarity(b, p_dis, p_chg)
    # complementarity is exact, flows stay within the originals
    assert np.all(r_dis * r_chg == 0.0)
    assert np.all(r_dis <= p_dis + 1e-12) and np.all(r_dis >= -1e-15)
    assert np.all(r_chg <= p_chg + 1e-12) and np.all(r_chg >= -1e-15)
    # the stored-energy path is unchanged and net injection never drops
    np.testing.assert_allclose(
        soc_trajectory_ext(b, r_dis, r_chg), soc_trajectory_ext(b, p_dis, p_chg), atol=1e-9
    )
    assert np.all(r_dis - r_chg >= p_dis - p_chg - 1e-12)


def test_ideal_limit_consistency():
    # sigma -> 1, theta -> 1 reproduces the ideal recursion on net power
    b = ExtendedBattery(3, 3, sigma_plus=1.0, sigma_minus=1.0, theta=1 - 1e-12, s_max=10, s0=5, dt=1.0)
    ideal = IdealBattery(p_max=3.0, s_max=10.0, s0=5.0, dt=1.0)
    p = np.array([-0.5, -0.5, 3.0, 1.5, 0.0])
    s_ext = soc_trajectory_ext(b, np.maximum(p, 0), np.maximum(-p, 0))
    np.testing.assert_allclose(s_ext, soc_trajectory(ideal, p), atol=1e-9)


def test_alternate_discharge_bookkeeping_is_flagged():
    base = dict(p_max_discharge=3.0, p_max_charge=2.0, sigma_plus=0.95, sigma_minus=0.9, theta=0.98, s_max=10.0, s0=5.0)
    literal = ExtendedBattery(**base, use_charge_eff_for_discharge=True)
    standard = ExtendedBattery(**base)
    s_literal = soc_trajectory_ext(literal, [1.0], [0.0])
    s_standard = soc_trajectory_ext(standard, [1.0], [0.0])
    assert s_literal[0] == pytest.approx(0.98 * 5 - 1 / 0.9)
    assert s_standard[0] == pytest.approx(0.98 * 5 - 1 / 0.95)
    # repair still preserves the trajectory under the alternate reading
    p_dis, p_chg = np.array([0.9]), np.array([0.7])
    r_dis, r_chg = repair_complementarity(literal, p_dis, p_chg)
    np.testing.assert_allclose(
        soc_trajectory_ext(literal, r_dis, r_chg), soc_trajectory_ext(literal, p_dis, p_chg), atol=1e-12
    )


def test_check_feasible_ext_limits(ext_battery):
    report = check_feasible_ext(ext_battery, [3.5, 0], [0, 2.5])
    kinds = {v.constraint for v in report}
    assert "discharge_power" in kinds and "charge_power" in kinds
