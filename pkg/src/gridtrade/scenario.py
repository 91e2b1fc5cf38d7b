"""Profile ingestion, synthetic profile generation, and randomized scenario
construction for the simulation experiments.

Profiles use a flat CSV schema (header ``timestamp,agent_id,load_kwh,pv_kw``,
ISO-8601 timestamps, rows sorted by timestamp then agent) so real metered
data can be dropped in; the bundled generator produces schema-compatible
synthetic households with a midday solar bell and a two-peak load shape.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np

from .battery import IdealBattery
from .dispatch import AgentSpec, Scenario
from .utility import build_utility

__all__ = [
    "ProfileSet",
    "ScenarioRecipe",
    "ProfileFormatError",
    "load_profiles",
    "write_profiles",
    "generate_profiles",
    "anchor_prices",
    "generate_scenario",
    "random_pair_scenario",
]

CSV_HEADER = ["timestamp", "agent_id", "load_kwh", "pv_kw"]
# Anchor price bands in $/kWh by hour of day: cheap overnight, moderate
# midday, expensive evening peak.
BAND_EVENING = (16, 21, 0.30)
BAND_MIDDAY = (11, 16, 0.15)
BAND_BASE = 0.10
MIN_ANCHOR_DEMAND = 0.01


class ProfileFormatError(ValueError):
    """Malformed profile file; message carries the offending line."""


@dataclass(frozen=True)
class ProfileSet:
    """Per-agent hourly load (kWh) and PV capacity (kW) series."""

    timestamps: tuple[datetime, ...]
    agent_ids: tuple[str, ...]
    load: np.ndarray  # shape (agents, hours)
    pv: np.ndarray  # shape (agents, hours)

    def __post_init__(self):
        n, h = len(self.agent_ids), len(self.timestamps)
        if self.load.shape != (n, h) or self.pv.shape != (n, h):
            raise ValueError("profile arrays must be (agents, hours)")
        if np.any(self.load < 0) or np.any(self.pv < 0):
            raise ValueError("profiles must be nonnegative")
        step = timedelta(hours=1)
        for a, b in zip(self.timestamps, self.timestamps[1:]):
            if b - a != step:
                raise ValueError(f"timestamps not hourly between {a} and {b}")

    @property
    def hours(self) -> int:
        return len(self.timestamps)


def load_profiles(path) -> ProfileSet:
    """Parse and validate a profile CSV; errors carry 1-based line numbers."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ProfileFormatError(f"line 1: expected header {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ProfileFormatError(f"line {lineno}: expected 4 fields, got {len(row)}")
            try:
                ts = datetime.fromisoformat(row[0])
            except ValueError as exc:
                raise ProfileFormatError(f"line {lineno}: bad timestamp {row[0]!r}") from exc
            try:
                load = float(row[2])
                pv = float(row[3])
            except ValueError as exc:
                raise ProfileFormatError(f"line {lineno}: bad number") from exc
            if load < 0:
                raise ProfileFormatError(f"line {lineno}: negative load {load}")
            if pv < 0:
                raise ProfileFormatError(f"line {lineno}: negative pv {pv}")
            rows.append((lineno, ts, row[1], load, pv))
    if not rows:
        raise ProfileFormatError("file has no data rows")

    keys = [(ts, aid) for _, ts, aid, _, _ in rows]
    if keys != sorted(keys):
        raise ProfileFormatError("rows are not sorted by (timestamp, agent_id)")
    timestamps = sorted({ts for _, ts, _, _, _ in rows})
    step = timedelta(hours=1)
    for a, b in zip(timestamps, timestamps[1:]):
        if b - a != step:
            raise ProfileFormatError(f"gap in timestamps between {a.isoformat()} and {b.isoformat()}")
    agent_ids = sorted({aid for _, _, aid, _, _ in rows})
    index = {(ts, aid): None for ts in timestamps for aid in agent_ids}
    for lineno, ts, aid, load, pv in rows:
        if index[(ts, aid)] is not None:
            raise ProfileFormatError(f"line {lineno}: duplicate row for {aid} at {ts.isoformat()}")
        index[(ts, aid)] = (load, pv)
    missing = [k for k, vals in index.items() if vals is None]
    if missing:
        ts, aid = missing[0]
        raise ProfileFormatError(f"missing row for agent {aid} at {ts.isoformat()}")

    n, h = len(agent_ids), len(timestamps)
    load = np.zeros((n, h))
    pv = np.zeros((n, h))
    for i, aid in enumerate(agent_ids):
        for j, ts in enumerate(timestamps):
            load[i, j], pv[i, j] = index[(ts, aid)]
    return ProfileSet(tuple(timestamps), tuple(agent_ids), load, pv)


def write_profiles(path, profiles: ProfileSet) -> None:
    """Write a ProfileSet in the canonical CSV schema."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for j, ts in enumerate(profiles.timestamps):
            for i, aid in enumerate(profiles.agent_ids):
                writer.writerow([ts.isoformat(), aid, repr(float(profiles.load[i, j])), repr(float(profiles.pv[i, j]))])


def generate_profiles(num_agents: int, hours: int, seed: int, start: datetime | None = None) -> ProfileSet:
    """Synthetic hourly household profiles: midday PV bell, two-peak load."""
    if num_agents < 1 or hours < 1:
        raise ValueError("need at least one agent and one hour")
    rng = np.random.default_rng(seed)
    start = start or datetime(2021, 6, 1)
    timestamps = tuple(start + timedelta(hours=j) for j in range(hours))
    hod = np.array([ts.hour for ts in timestamps], dtype=float)

    pv_shape = np.maximum(0.0, np.sin((hod - 6.0) / 12.0 * np.pi))
    load = np.zeros((num_agents, hours))
    pv = np.zeros((num_agents, hours))
    for i in range(num_agents):
        base = rng.uniform(0.2, 0.6)
        morning = rng.uniform(0.3, 1.2) * np.exp(-0.5 * ((hod - 8.0) / 1.8) ** 2)
        evening = rng.uniform(0.8, 2.2) * np.exp(-0.5 * ((hod - 19.5) / 2.2) ** 2)
        noise = rng.normal(0.0, 0.05, hours)
        load[i] = np.maximum(base + morning + evening + noise, 0.05)
        pv[i] = rng.uniform(0.5, 4.0) * pv_shape * rng.uniform(0.85, 1.0, hours)
    return ProfileSet(timestamps, tuple(f"agent{i + 1:02d}" for i in range(num_agents)), load, pv)


def anchor_prices(timestamps, mode: str = "bands", constant: float = 0.15) -> np.ndarray:
    """Anchor price per period: banded by hour of day, or constant."""
    if mode == "constant":
        return np.full(len(timestamps), float(constant))
    if mode != "bands":
        raise ValueError(f"unknown anchor price mode {mode!r}")
    out = np.empty(len(timestamps))
    for j, ts in enumerate(timestamps):
        h = ts.hour
        if BAND_EVENING[0] <= h < BAND_EVENING[1]:
            out[j] = BAND_EVENING[2]
        elif BAND_MIDDAY[0] <= h < BAND_MIDDAY[1]:
            out[j] = BAND_MIDDAY[2]
        else:
            out[j] = BAND_BASE
    return out


@dataclass(frozen=True)
class ScenarioRecipe:
    """How to turn profiles into a dispatch scenario.

    Elasticities are drawn uniformly per agent from ``elasticity_range``;
    each agent receives a normalized-uniform share of the total battery
    capacity; PV is rescaled so its energy over the window matches the
    total baseline load when ``pv_scaling`` is "match-load".
    """

    num_agents: int
    horizon: int
    elasticity_range: tuple[float, float]
    battery_capacity_total: float
    battery_power: float
    seed: int
    pv_scaling: str = "match-load"
    anchor_price_mode: str = "bands"
    anchor_price_value: float = 0.15
    shift_fraction: float = 0.01
    initial_soc_fraction: float = 0.5
    window_start: int | None = None

    def __post_init__(self):
        lo, hi = self.elasticity_range
        if not (lo <= hi < 0):
            raise ValueError("elasticity range must satisfy lo <= hi < 0")
        if self.num_agents < 2:
            raise ValueError("need at least two agents")
        if self.horizon < 1:
            raise ValueError("horizon must be at least one period")
        if self.battery_capacity_total < 0 or self.battery_power < 0:
            raise ValueError("battery parameters must be nonnegative")
        if self.pv_scaling not in ("match-load", "none"):
            raise ValueError(f"unknown pv scaling mode {self.pv_scaling!r}")

    def to_json(self, indent: int | None = None) -> str:
        data = dict(self.__dict__)
        data["elasticity_range"] = list(self.elasticity_range)
        return json.dumps(data, indent=indent, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioRecipe":
        data = dict(data)
        data["elasticity_range"] = tuple(data["elasticity_range"])
        return cls(**data)


def generate_scenario(profiles: ProfileSet, recipe: ScenarioRecipe) -> Scenario:
    """Build a scenario from profiles, deterministic given the recipe seed."""
    rng = np.random.default_rng(recipe.seed)
    T = recipe.horizon
    if recipe.num_agents > len(profiles.agent_ids):
        raise ValueError(
            f"recipe wants {recipe.num_agents} agents, profiles have {len(profiles.agent_ids)}"
        )
    max_start = profiles.hours - T
    if max_start < 0:
        raise ValueError(f"window of {T} hours exceeds the {profiles.hours}-hour profiles")
    if recipe.window_start is None:
        start = int(rng.integers(0, max_start + 1))
    else:
        start = int(recipe.window_start)
        if not 0 <= start <= max_start:
            raise ValueError(f"window start {start} out of range [0, {max_start}]")
    chosen = sorted(rng.choice(len(profiles.agent_ids), size=recipe.num_agents, replace=False).tolist())

    window = slice(start, start + T)
    timestamps = profiles.timestamps[window]
    prices = anchor_prices(timestamps, recipe.anchor_price_mode, recipe.anchor_price_value)
    load = np.maximum(profiles.load[chosen, window], MIN_ANCHOR_DEMAND)
    pv = profiles.pv[chosen, window].astype(float)

    if recipe.pv_scaling == "match-load":
        pv_energy = float(pv.sum())
        if pv_energy <= 0:
            raise ValueError("cannot scale PV: no PV energy in the window")
        pv = pv * (float(load.sum()) / pv_energy)

    elasticities = rng.uniform(recipe.elasticity_range[0], recipe.elasticity_range[1], recipe.num_agents)
    fractions = rng.uniform(0.0, 1.0, recipe.num_agents)
    total = fractions.sum()
    fractions = fractions / total if total > 0 else np.full(recipe.num_agents, 1.0 / recipe.num_agents)

    agents = []
    for i in range(recipe.num_agents):
        utilities = tuple(
            build_utility(prices[t], load[i, t], elasticities[i], recipe.shift_fraction * load[i, t])
            for t in range(T)
        )
        cap = recipe.battery_capacity_total * fractions[i]
        battery = None
        if cap > 0 and recipe.battery_power > 0:
            battery = IdealBattery(
                p_max=recipe.battery_power,
                s_max=cap,
                s0=recipe.initial_soc_fraction * cap,
                dt=1.0,
            )
        agents.append(
            AgentSpec(
                name=profiles.agent_ids[chosen[i]],
                utilities=utilities,
                solar=pv[i],
                battery=battery,
            )
        )
    return Scenario(dt=1.0, agents=tuple(agents))


def random_pair_scenario(rng: np.random.Generator, elasticity_range=(-1.5, -0.5), boundary: bool = False) -> Scenario:
    """A random two-agent single-period instance for convergence studies.

    Loads, hour of day, elasticities, and solar (between zero and twice the
    load) are the randomized confounders. With ``boundary`` the proposer
    values energy far above the pricing agent's marginal utility at zero,
    so the equilibrium trade equals the pricing agent's entire solar output.
    """
    hour = int(rng.integers(0, 24))
    ts = datetime(2021, 6, 1) + timedelta(hours=hour)
    price0 = float(anchor_prices([ts])[0])
    lo, hi = elasticity_range
    agents = []
    for name in ("v", "k"):
        load = float(rng.uniform(0.2, 3.0))
        elast = float(rng.uniform(lo, hi))
        solar = float(rng.uniform(0.0, 2.0 * load))
        agents.append((name, load, elast, solar))
    if boundary:
        # make the pricing agent nearly indifferent to its own consumption
        v = agents[0]
        agents[0] = (v[0], v[1], v[2], max(v[3], 0.5))
        uv = build_utility(1e-4 * price0, agents[0][1], agents[0][2])
        uk = build_utility(10.0 * price0, agents[1][1], agents[1][2])
        specs = (
            AgentSpec("v", (uv,), [agents[0][3]]),
            AgentSpec("k", (uk,), [agents[1][3]]),
        )
        return Scenario(dt=1.0, agents=specs)
    specs = tuple(
        AgentSpec(name, (build_utility(price0, load, elast),), [solar])
        for name, load, elast, solar in agents
    )
    return Scenario(dt=1.0, agents=specs)
