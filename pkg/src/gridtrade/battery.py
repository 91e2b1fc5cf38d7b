"""Battery models: state-of-charge dynamics, feasibility checks, and the
complementarity repair map for the non-ideal model.

The ideal model tracks a single signed discharge power. The extended model
splits charge and discharge, applies constant conversion efficiencies, and
self-discharges at a constant retention rate per period.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "IdealBattery",
    "ExtendedBattery",
    "Violation",
    "soc_trajectory",
    "check_feasible",
    "soc_trajectory_ext",
    "check_feasible_ext",
    "repair_complementarity",
]

FEASIBILITY_TOL = 1e-7


class Violation(NamedTuple):
    """One violated constraint: period (1-based), constraint name, magnitude."""

    t: int
    constraint: str
    magnitude: float


def _per_period(value, T: int, name: str) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(value, dtype=float), (T,)).copy()
    if np.any(arr < 0):
        raise ValueError(f"{name} must be nonnegative")
    return arr


@dataclass(frozen=True)
class IdealBattery:
    """Lossless battery with symmetric power limit and energy capacity.

    ``p_max`` and ``s_max`` may be scalars or per-period sequences. Positive
    power is discharge. ``s_final_min`` optionally enforces a terminal
    state-of-charge floor (unconstrained by default).
    """

    p_max: float | np.ndarray
    s_max: float | np.ndarray
    s0: float
    dt: float = 1.0
    s_final_min: float | None = None

    def __post_init__(self):
        if np.any(np.asarray(self.p_max, dtype=float) < 0):
            raise ValueError("power limit must be nonnegative")
        if np.any(np.asarray(self.s_max, dtype=float) < 0):
            raise ValueError("energy capacity must be nonnegative")
        s_max0 = np.atleast_1d(np.asarray(self.s_max, dtype=float))[0]
        if not 0 <= self.s0 <= s_max0:
            raise ValueError(f"initial state of charge {self.s0} outside [0, {s_max0}]")
        if not self.dt > 0:
            raise ValueError("time step must be positive")

    def power_limits(self, T: int) -> np.ndarray:
        return _per_period(self.p_max, T, "power limit")

    def energy_limits(self, T: int) -> np.ndarray:
        return _per_period(self.s_max, T, "energy capacity")

    def to_dict(self) -> dict:
        return {
            "kind": "ideal",
            "p_max": np.asarray(self.p_max, dtype=float).tolist(),
            "s_max": np.asarray(self.s_max, dtype=float).tolist(),
            "s0": self.s0,
            "dt": self.dt,
            "s_final_min": self.s_final_min,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "IdealBattery":
        return cls(
            p_max=_scalar_or_array(data["p_max"]),
            s_max=_scalar_or_array(data["s_max"]),
            s0=float(data["s0"]),
            dt=float(data.get("dt", 1.0)),
            s_final_min=data.get("s_final_min"),
        )


@dataclass(frozen=True)
class ExtendedBattery:
    """Battery with asymmetric limits, conversion losses, and self-discharge.

    Discharging delivers ``p_dis`` to the grid while withdrawing
    ``p_dis / sigma_plus`` from storage; charging at ``p_chg`` stores
    ``sigma_minus * p_chg``. Stored energy retains a fraction ``theta`` each
    period. ``use_charge_eff_for_discharge`` switches to an alternate
    bookkeeping where the discharge withdrawal is scaled by the charge
    efficiency instead (kept only for sensitivity checks).
    """

    p_max_discharge: float | np.ndarray
    p_max_charge: float | np.ndarray
    sigma_plus: float
    sigma_minus: float
    theta: float
    s_max: float | np.ndarray
    s0: float
    dt: float = 1.0
    s_final_min: float | None = None
    use_charge_eff_for_discharge: bool = False

    def __post_init__(self):
        if not 0 < self.sigma_plus <= 1:
            raise ValueError("discharge efficiency must lie in (0, 1]")
        if not 0 < self.sigma_minus <= 1:
            raise ValueError("charge efficiency must lie in (0, 1]")
        if not 0 <= self.theta < 1:
            raise ValueError("retention must lie in [0, 1)")
        for name in ("p_max_discharge", "p_max_charge", "s_max"):
            if np.any(np.asarray(getattr(self, name), dtype=float) < 0):
                raise ValueError(f"{name} must be nonnegative")
        s_max0 = np.atleast_1d(np.asarray(self.s_max, dtype=float))[0]
        if not 0 <= self.s0 <= s_max0:
            raise ValueError(f"initial state of charge {self.s0} outside [0, {s_max0}]")
        if not self.dt > 0:
            raise ValueError("time step must be positive")

    @property
    def withdraw_rate(self) -> float:
        """Stored energy withdrawn per unit of delivered discharge power."""
        sigma = self.sigma_minus if self.use_charge_eff_for_discharge else self.sigma_plus
        return 1.0 / sigma

    def discharge_limits(self, T: int) -> np.ndarray:
        return _per_period(self.p_max_discharge, T, "discharge limit")

    def charge_limits(self, T: int) -> np.ndarray:
        return _per_period(self.p_max_charge, T, "charge limit")

    def energy_limits(self, T: int) -> np.ndarray:
        return _per_period(self.s_max, T, "energy capacity")

    def to_dict(self) -> dict:
        return {
            "kind": "extended",
            "p_max_discharge": np.asarray(self.p_max_discharge, dtype=float).tolist(),
            "p_max_charge": np.asarray(self.p_max_charge, dtype=float).tolist(),
            "sigma_plus": self.sigma_plus,
            "sigma_minus": self.sigma_minus,
            "theta": self.theta,
            "s_max": np.asarray(self.s_max, dtype=float).tolist(),
            "s0": self.s0,
            "dt": self.dt,
            "s_final_min": self.s_final_min,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExtendedBattery":
        return cls(
            p_max_discharge=_scalar_or_array(data["p_max_discharge"]),
            p_max_charge=_scalar_or_array(data["p_max_charge"]),
            sigma_plus=float(data["sigma_plus"]),
            sigma_minus=float(data["sigma_minus"]),
            theta=float(data["theta"]),
            s_max=_scalar_or_array(data["s_max"]),
            s0=float(data["s0"]),
            dt=float(data.get("dt", 1.0)),
            s_final_min=data.get("s_final_min"),
        )


def _scalar_or_array(value):
    if isinstance(value, (list, tuple)):
        return np.asarray(value, dtype=float)
    return float(value)


def soc_trajectory(b: IdealBattery, p) -> np.ndarray:
    """State of charge after each period for signed discharge sequence ``p``.

    Pure recursion s_t = s_{t-1} - p_t * dt; no feasibility enforcement.
    """
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size < 1:
        raise ValueError("power sequence must be one-dimensional and non-empty")
    return b.s0 - b.dt * np.cumsum(p)


def check_feasible(b: IdealBattery, p, tol: float = FEASIBILITY_TOL) -> list[Violation]:
    """Every power or energy limit violated by ``p``, or an empty list."""
    p = np.asarray(p, dtype=float)
    T = p.size
    p_max = b.power_limits(T)
    s_max = b.energy_limits(T)
    s = soc_trajectory(b, p)
    out = []
    for t in range(T):
        excess = abs(p[t]) - p_max[t]
        if excess > tol:
            out.append(Violation(t + 1, "power", float(excess)))
        if s[t] < -tol:
            out.append(Violation(t + 1, "soc_low", float(-s[t])))
        if s[t] - s_max[t] > tol:
            out.append(Violation(t + 1, "soc_high", float(s[t] - s_max[t])))
    if b.s_final_min is not None and s[-1] < b.s_final_min - tol:
        out.append(Violation(T, "soc_final", float(b.s_final_min - s[-1])))
    return out


def soc_trajectory_ext(b: ExtendedBattery, p_dis, p_chg) -> np.ndarray:
    """State of charge under the extended model for nonnegative flows."""
    p_dis = np.asarray(p_dis, dtype=float)
    p_chg = np.asarray(p_chg, dtype=float)
    if p_dis.shape != p_chg.shape or p_dis.ndim != 1 or p_dis.size < 1:
        raise ValueError("flow sequences must be one-dimensional with equal length")
    if np.any(p_dis < 0) or np.any(p_chg < 0):
        raise ValueError("flow components must be nonnegative")
    flow = (b.sigma_minus * p_chg - b.withdraw_rate * p_dis) * b.dt
    s = np.empty(p_dis.size)
    prev = b.s0
    for t in range(p_dis.size):
        prev = b.theta * prev + flow[t]
        s[t] = prev
    return s


def check_feasible_ext(b: ExtendedBattery, p_dis, p_chg, tol: float = FEASIBILITY_TOL) -> list[Violation]:
    """Violations of the extended model's limits, complementarity excluded."""
    p_dis = np.asarray(p_dis, dtype=float)
    p_chg = np.asarray(p_chg, dtype=float)
    T = p_dis.size
    dis_max = b.discharge_limits(T)
    chg_max = b.charge_limits(T)
    s_max = b.energy_limits(T)
    s = soc_trajectory_ext(b, np.maximum(p_dis, 0), np.maximum(p_chg, 0))
    out = []
    for t in range(T):
        if p_dis[t] - dis_max[t] > tol or p_dis[t] < -tol:
            out.append(Violation(t + 1, "discharge_power", float(max(p_dis[t] - dis_max[t], -p_dis[t]))))
        if p_chg[t] - chg_max[t] > tol or p_chg[t] < -tol:
            out.append(Violation(t + 1, "charge_power", float(max(p_chg[t] - chg_max[t], -p_chg[t]))))
        if s[t] < -tol:
            out.append(Violation(t + 1, "soc_low", float(-s[t])))
        if s[t] - s_max[t] > tol:
            out.append(Violation(t + 1, "soc_high", float(s[t] - s_max[t])))
    if b.s_final_min is not None and s[-1] < b.s_final_min - tol:
        out.append(Violation(T, "soc_final", float(b.s_final_min - s[-1])))
    return out


def repair_complementarity(b: ExtendedBattery, p_dis, p_chg) -> tuple[np.ndarray, np.ndarray]:
    """Map flows to an equivalent pair that never charges and discharges at once.

    The output withdraws the same net energy from storage each period (the
    state-of-charge trajectory is unchanged), stays within the original
    flows component-wise, and weakly increases the net grid injection.
    """
    p_dis = np.asarray(p_dis, dtype=float)
    p_chg = np.asarray(p_chg, dtype=float)
    T = p_dis.size
    bad = [v for v in (
        _box_violations(p_dis, b.discharge_limits(T), "discharge")
        + _box_violations(p_chg, b.charge_limits(T), "charge")
    )]
    if bad:
        raise ValueError(f"flows violate box limits: {bad}")
    a = b.withdraw_rate
    c = b.sigma_minus
    out_dis = (1.0 / a) * np.maximum(a * p_dis - c * p_chg, 0.0)
    out_chg = (1.0 / c) * np.maximum(c * p_chg - a * p_dis, 0.0)
    return out_dis, out_chg


def _box_violations(x: np.ndarray, hi: np.ndarray, name: str, tol: float = FEASIBILITY_TOL):
    out = []
    for t in range(x.size):
        if x[t] < -tol or x[t] - hi[t] > tol:
            out.append((t + 1, name))
    return out
