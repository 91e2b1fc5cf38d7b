"""Quasi-constant price-elasticity utility functions.

Each agent's benefit from consuming energy in one period is described by a
strictly concave utility anchored at an observed (price, demand) pair. A pure
constant-elasticity demand curve has infinite marginal utility at zero
consumption, so the marginal utility curve is shifted left by a small demand
offset and the exponent is compensated so the elasticity at the anchor price
still equals the requested value.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["QuasiCPEUtility", "build_utility"]

# Fraction of the anchor demand used for the shift when a scenario does not
# specify one.
DEFAULT_SHIFT_FRACTION = 0.01


@dataclass(frozen=True)
class QuasiCPEUtility:
    """Strictly concave utility with quasi-constant price elasticity.

    Attributes:
        pi0: anchor price in $/kWh, > 0.
        d0: anchor demand in kWh, > 0. The marginal utility at ``d0`` is ``pi0``.
        r_hat: target price elasticity of demand at the anchor, < 0 and != -1.
        delta_shift: leftward shift of the marginal utility curve, > 0.
        r_prime: effective exponent after compensating for the shift (derived).
    """

    pi0: float
    d0: float
    r_hat: float
    delta_shift: float
    r_prime: float = field(init=False)

    def __post_init__(self):
        if not self.pi0 > 0:
            raise ValueError(f"anchor price must be positive, got {self.pi0}")
        if not self.d0 > 0:
            raise ValueError(f"anchor demand must be positive, got {self.d0}")
        if not self.r_hat < 0:
            raise ValueError(f"elasticity must be negative, got {self.r_hat}")
        if self.r_hat == -1:
            raise ValueError("elasticity -1 is excluded (singular utility form)")
        if not self.delta_shift > 0:
            raise ValueError(f"demand shift must be positive, got {self.delta_shift}")
        r_prime = self.r_hat / (1.0 + self.delta_shift / self.d0)
        if r_prime == -1:
            # Reachable when r_hat = -(1 + shift/d0); the antiderivative below
            # degenerates to a logarithm which this family does not model.
            raise ValueError("effective exponent -1 is excluded (singular utility form)")
        object.__setattr__(self, "r_prime", r_prime)

    @property
    def power_exponent(self) -> float:
        """Exponent of the (d + shift) power term in the utility value."""
        return 1.0 / self.r_prime + 1.0

    @property
    def power_coefficient(self) -> float:
        """Coefficient of the (d + shift) power term in the utility value."""
        rp = self.r_prime
        return rp * self.pi0 / ((rp + 1.0) * (self.d0 + self.delta_shift) ** (1.0 / rp))

    def marginal_utility(self, d):
        """Marginal utility at demand ``d`` (scalar or array), in $/kWh."""
        d = _check_demand(d)
        ratio = (d + self.delta_shift) / (self.d0 + self.delta_shift)
        out = self.pi0 * ratio ** (1.0 / self.r_prime)
        return float(out) if np.isscalar(d) or np.ndim(out) == 0 else out

    def utility_value(self, d):
        """Utility of consuming ``d`` kWh, normalized so the value at 0 is 0.

        Evaluated as shift^e * expm1(e * log1p(d/shift)), which stays accurate
        when the exponent is close to zero (elasticities just past -1).
        """
        d = _check_demand(d)
        e = self.power_exponent
        out = self.power_coefficient * self.delta_shift**e * np.expm1(e * np.log1p(d / self.delta_shift))
        return float(out) if np.isscalar(d) or np.ndim(out) == 0 else out

    def inverse_demand(self, pi):
        """Demand at price ``pi`` (> 0): inverse of the marginal utility, clamped at 0.

        The clamp realizes the nonnegative-consumption constraint inside the
        demand map: for prices above the marginal utility at zero the agent
        consumes nothing.
        """
        pi = np.asarray(pi, dtype=float)
        if np.any(pi <= 0):
            raise ValueError("price must be positive")
        raw = (self.d0 + self.delta_shift) * (pi / self.pi0) ** self.r_prime - self.delta_shift
        out = np.maximum(raw, 0.0)
        return float(out) if np.ndim(out) == 0 else out

    def curvature(self, d):
        """Second derivative of the utility at ``d`` (negative everywhere)."""
        d = _check_demand(d)
        rp = self.r_prime
        ratio = (d + self.delta_shift) / (self.d0 + self.delta_shift)
        out = self.pi0 / (rp * (self.d0 + self.delta_shift)) * ratio ** (1.0 / rp - 1.0)
        return float(out) if np.ndim(out) == 0 else out

    def to_dict(self) -> dict:
        return {
            "pi0": self.pi0,
            "d0": self.d0,
            "r_hat": self.r_hat,
            "delta_shift": self.delta_shift,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "QuasiCPEUtility":
        return build_utility(
            pi0=data["pi0"],
            d0=data["d0"],
            r_hat=data["r_hat"],
            delta_shift=data.get("delta_shift"),
        )


def build_utility(pi0: float, d0: float, r_hat: float, delta_shift: float | None = None) -> QuasiCPEUtility:
    """Construct a utility anchored at (``pi0``, ``d0``) with elasticity ``r_hat``.

    When ``delta_shift`` is omitted it defaults to ``0.01 * d0``. Raises
    ValueError on any out-of-domain parameter (malformed agent spec).
    """
    if delta_shift is None:
        if not np.isreal(d0) or not d0 > 0:
            raise ValueError(f"anchor demand must be positive, got {d0}")
        delta_shift = DEFAULT_SHIFT_FRACTION * d0
    return QuasiCPEUtility(pi0=float(pi0), d0=float(d0), r_hat=float(r_hat), delta_shift=float(delta_shift))


def _check_demand(d):
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("demand must be nonnegative")
    return d
