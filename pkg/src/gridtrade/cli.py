"""Command-line interface.

Subcommands mirror the experiment surface: solve one dispatch, run one
negotiation, sweep the step-shrink parameters, run the multi-agent welfare
study, or generate synthetic profiles. Every command reads a JSON config,
writes delimited tables plus JSON summaries and rendered figures into the
output directory, and is deterministic given the seed.

Exit codes: 0 success, 1 computation failure, 2 config error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import sys
from datetime import datetime
from pathlib import Path

from .dispatch import Scenario, solve_centralized, solve_centralized_ext, verify_kkt
from .experiments import GammaSweepConfig, MultiAgentConfig, run_gamma_sweep, run_multiagent_experiment
from .negotiation import NegotiationConfig, run_negotiation
from .report import (
    emit_dispatch_report,
    emit_multiagent_report,
    emit_negotiation_report,
    emit_sweep_report,
)
from .scenario import (
    ProfileFormatError,
    ScenarioRecipe,
    generate_profiles,
    generate_scenario,
    load_profiles,
    write_profiles,
)
from .solver import SolverError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3


class ConfigError(ValueError):
    pass


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data


def _resolve_scenario(config: dict) -> Scenario:
    if "scenario" in config:
        return Scenario.from_json(json.dumps(config["scenario"]))
    if "scenario_file" in config:
        with open(config["scenario_file"], encoding="utf-8") as fh:
            return Scenario.from_json(fh.read())
    if "profiles_csv" in config and "recipe" in config:
        profiles = load_profiles(config["profiles_csv"])
        recipe = ScenarioRecipe.from_dict(config["recipe"])
        return generate_scenario(profiles, recipe)
    raise ConfigError("config needs 'scenario', 'scenario_file', or 'profiles_csv' + 'recipe'")


def _cmd_gen_profiles(config: dict, out: Path, fmt: str, seed: int | None) -> int:
    agents = int(config.get("agents", 4))
    hours = int(config.get("hours", 72))
    use_seed = seed if seed is not None else int(config.get("seed", 0))
    start = datetime.fromisoformat(config["start"]) if "start" in config else None
    profiles = generate_profiles(agents, hours, seed=use_seed, start=start)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "profiles.csv"
    write_profiles(path, profiles)
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_dispatch(config: dict, out: Path, fmt: str, seed: int | None) -> int:
    if seed is not None and "recipe" in config:
        config = {**config, "recipe": {**config["recipe"], "seed": seed}}
    sc = _resolve_scenario(config)
    if config.get("extended", False):
        sol = solve_centralized_ext(sc)
    else:
        sol = solve_centralized(sc)
    report = verify_kkt(sc, sol)
    files = emit_dispatch_report(sc, sol, report, out, fmt)
    for f in files:
        print(f"wrote {f}")
    print(f"welfare {sol.objective:.6f}  kkt residual {sol.kkt_residual:.2e}")
    return EXIT_OK


def _cmd_negotiate(config: dict, out: Path, fmt: str, seed: int | None) -> int:
    if seed is not None and "recipe" in config:
        config = {**config, "recipe": {**config["recipe"], "seed": seed}}
    sc = _resolve_scenario(config)
    ncfg_data = config.get("negotiation", {})
    ncfg = NegotiationConfig(
        gamma=float(ncfg_data.get("gamma", 0.5)),
        epsilon=float(ncfg_data.get("epsilon", 1e-3)),
        delta0=float(ncfg_data.get("delta0", 0.5)),
        max_iters=int(ncfg_data.get("max_iters", 5000)),
        pi_agent_index=int(ncfg_data.get("pi_agent_index", 0)),
    )
    ledger = run_negotiation(sc, ncfg)
    files = emit_negotiation_report(sc, ledger, out, fmt)
    for f in files:
        print(f"wrote {f}")
    print(f"termination {ledger.termination} after {ledger.iterations} iterations")
    return EXIT_OK


def _cmd_sweep(config: dict, out: Path, fmt: str, seed: int | None) -> int:
    data = dict(config)
    if seed is not None:
        data["seed"] = seed
    data.setdefault("seed", 0)
    try:
        cfg = GammaSweepConfig.from_dict(data)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad sweep config: {exc}") from exc
    result = run_gamma_sweep(cfg)
    files = emit_sweep_report(result, out, fmt)
    for f in files:
        print(f"wrote {f}")
    return EXIT_OK


def _cmd_multiagent(config: dict, out: Path, fmt: str, seed: int | None) -> int:
    data = dict(config)
    if seed is not None:
        data["seed"] = seed
    data.setdefault("seed", 0)
    try:
        cfg = MultiAgentConfig.from_dict(data)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad experiment config: {exc}") from exc
    result = run_multiagent_experiment(cfg)
    files = emit_multiagent_report(result, out, fmt)
    for f in files:
        print(f"wrote {f}")
    conv = sum(t.converged for t in result.trials)
    print(f"{conv}/{len(result.trials)} trials converged")
    return EXIT_OK


_COMMANDS = {
    "gen-profiles": _cmd_gen_profiles,
    "dispatch": _cmd_dispatch,
    "negotiate": _cmd_negotiate,
    "sweep-gamma": _cmd_sweep,
    "experiment-multiagent": _cmd_multiagent,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridtrade", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--format", choices=["csv", "json"], default="csv", help="table format")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args.config)
        return _COMMANDS[args.command](config, Path(args.out), args.format, args.seed)
    except (ConfigError, ProfileFormatError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SolverError as exc:
        print(f"computation failed: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
