"""Report emission: delimited plot data, JSON machine summaries, and rendered
figures.

Every table is written with deterministic row ordering and shortest
round-trip float formatting, so identical runs produce byte-identical CSVs.
Figures are rendered to PNG next to the data they visualize.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .dispatch import DispatchSolution, KKTReport, Scenario
from .experiments import ExperimentResult, SweepResult
from .negotiation import TradeLedger

__all__ = [
    "emit_report",
    "emit_sweep_report",
    "emit_multiagent_report",
    "emit_dispatch_report",
    "emit_negotiation_report",
]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_table(path: Path, header: list[str], rows: list[list], fmt: str) -> Path:
    if fmt == "json":
        path = path.with_suffix(".json")
        records = [{h: (None if v is None or v == "" else v) for h, v in zip(header, row)} for row in rows]
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(records, fh, indent=2, sort_keys=True, default=float)
            fh.write("\n")
        return path
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def _write_json(path: Path, payload) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    return path


def emit_sweep_report(result: SweepResult, out_dir, fmt: str = "csv") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [
        [c.gamma, c.delta0, c.mean_iters, c.max_iters]
        for c in sorted(result.cells, key=lambda c: (c.gamma, c.delta0))
    ]
    files = [_write_table(out / "gamma_sweep.csv", ["gamma", "delta0", "mean_iters", "max_iters"], rows, fmt)]
    summary = {
        "cells": len(result.cells),
        "trials_per_cell": result.config.trials_per_cell,
        "seed": result.config.seed,
        "epsilon": result.config.epsilon,
        "mean_iterations_by_gamma": {repr(g): m for g, m in result.mean_by_gamma().items()},
        "all_converged": all(c.converged == c.trials for c in result.cells),
    }
    files.append(_write_json(out / "summary.json", summary))
    files.append(_plot_sweep(result, out / "gamma_sweep.png"))
    return files


def _plot_sweep(result: SweepResult, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    by_delta: dict[float, list] = {}
    for c in sorted(result.cells, key=lambda c: (c.delta0, c.gamma)):
        by_delta.setdefault(c.delta0, []).append(c)
    for delta0, cells in sorted(by_delta.items()):
        gammas = [c.gamma for c in cells]
        ax.plot(gammas, [c.mean_iters for c in cells], marker="o", label=f"$\\delta^{{(0)}}$={delta0} mean")
        ax.plot(gammas, [c.max_iters for c in cells], linestyle="--", alpha=0.6, label=f"$\\delta^{{(0)}}$={delta0} max")
    ax.set_xlabel("shrink rate $\\gamma$")
    ax.set_ylabel("iterations")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def emit_multiagent_report(result: ExperimentResult, out_dir, fmt: str = "csv") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []

    trial_rows = [
        [
            t.capacity_total,
            t.battery_power,
            t.trial,
            t.horizon,
            t.num_agents,
            t.iterations,
            t.converged,
            t.w_no,
            t.w_centr,
            t.w_p2p,
            t.dw,
            t.dw_pct,
            t.pareto_ok,
            t.min_pareto_slack,
        ]
        for t in sorted(result.trials, key=lambda t: (t.capacity_total, t.battery_power, t.trial))
    ]
    files.append(
        _write_table(
            out / "trials.csv",
            [
                "capacity_total",
                "battery_power",
                "trial",
                "T",
                "N",
                "iterations",
                "converged",
                "w_no",
                "w_centr",
                "w_p2p",
                "dw",
                "dw_pct",
                "pareto_ok",
                "min_pareto_slack",
            ],
            trial_rows,
            fmt,
        )
    )

    horizon = result.summary_by_horizon()
    files.append(
        _write_table(
            out / "welfare_by_T.csv",
            ["T", "simulations", "converged", "dw_pct_mean", "dw_pct_std", "dw_pct_max", "dw_mean", "dw_std", "dw_max"],
            [[r[k] for k in ("T", "simulations", "converged", "dw_pct_mean", "dw_pct_std", "dw_pct_max", "dw_mean", "dw_std", "dw_max")] for r in horizon],
            fmt,
        )
    )

    capacity = result.summary_by_capacity()
    files.append(
        _write_table(
            out / "iterations_by_capacity.csv",
            ["capacity_total", "trials", "iters_min", "iters_q1", "iters_median", "iters_q3", "iters_max"],
            [[r.get(k) for k in ("capacity_total", "trials", "iters_min", "iters_q1", "iters_median", "iters_q3", "iters_max")] for r in capacity],
            fmt,
        )
    )

    special = result.special_instance()
    special_rows = []
    if special is not None:
        for a in special.agents:
            special_rows.append([a.name, a.w_no, a.w_centr, a.w_p2p, a.dw, a.dw_pct])
        total = ["total", special.w_no, special.w_centr, special.w_p2p, special.dw, special.dw_pct]
        special_rows.append(total)
    files.append(
        _write_table(
            out / "special_instance.csv",
            ["agent", "w_no", "w_centr", "w_p2p", "dw", "dw_pct"],
            special_rows,
            fmt,
        )
    )

    conv = [t for t in result.trials if t.converged]
    pcts = [t.dw_pct for t in conv if t.dw_pct is not None]
    summary = {
        "trials": len(result.trials),
        "converged": len(conv),
        "convergence_rate": len(conv) / len(result.trials) if result.trials else None,
        "mean_iterations": float(np.mean([t.iterations for t in conv])) if conv else None,
        "median_iterations": float(np.median([t.iterations for t in conv])) if conv else None,
        "dw_pct_mean": float(np.mean(pcts)) if pcts else None,
        "dw_pct_max": float(np.max(pcts)) if pcts else None,
        "pareto_audit_pass": all(t.pareto_ok for t in result.trials),
        "seed": result.config.seed,
        "special_instance_dw": special.dw if special is not None else None,
    }
    files.append(_write_json(out / "summary.json", summary))
    files.append(_plot_capacity(capacity, out / "iterations_by_capacity.png"))
    files.append(_plot_welfare_by_horizon(horizon, out / "welfare_by_T.png"))
    return files


def _plot_capacity(capacity_rows: list[dict], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    stats = []
    labels = []
    for row in capacity_rows:
        if not row.get("trials"):
            continue
        stats.append(
            {
                "med": row["iters_median"],
                "q1": row["iters_q1"],
                "q3": row["iters_q3"],
                "whislo": row["iters_min"],
                "whishi": row["iters_max"],
                "fliers": [],
            }
        )
        labels.append(str(row["capacity_total"]))
    if stats:
        ax.bxp(stats, showfliers=False)
        ax.set_xticklabels(labels)
    ax.set_xlabel("total battery capacity (kWh)")
    ax.set_ylabel("iterations to settle")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _plot_welfare_by_horizon(horizon_rows: list[dict], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    rows = [r for r in horizon_rows if r["dw_pct_mean"] is not None]
    x = np.arange(len(rows))
    ax.bar(x, [r["dw_pct_mean"] for r in rows], width=0.5, label="mean $\\Delta W_p$")
    ax.plot(x, [r["dw_pct_max"] for r in rows], "k^", label="max $\\Delta W_p$")
    ax.set_xticks(x)
    ax.set_xticklabels([str(r["T"]) for r in rows])
    ax.set_xlabel("horizon T")
    ax.set_ylabel("welfare difference (%)")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def emit_dispatch_report(sc: Scenario, sol: DispatchSolution, report: KKTReport | None, out_dir, fmt: str = "csv") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for n, agent in enumerate(sc.agents):
        for t in range(sc.T):
            rows.append(
                [
                    agent.name,
                    t + 1,
                    sol.demand[n, t],
                    sol.solar[n, t],
                    sol.battery_power[n, t],
                    None if np.isnan(sol.soc[n, t]) else sol.soc[n, t],
                    sol.price[t],
                ]
            )
    rows.sort(key=lambda r: (r[0], r[1]))
    files = [
        _write_table(
            out / "dispatch_solution.csv",
            ["agent", "t", "demand", "solar", "battery_power", "soc", "price"],
            rows,
            fmt,
        )
    ]
    payload = sol.to_dict()
    if report is not None:
        payload["kkt_report"] = report.to_dict()
    files.append(_write_json(out / "dispatch_summary.json", payload))
    files.append(_plot_dispatch(sc, sol, out / "dispatch_profiles.png"))
    return files


def _plot_dispatch(sc: Scenario, sol: DispatchSolution, path: Path) -> Path:
    t = np.arange(1, sc.T + 1)
    fig, axes = plt.subplots(4, 1, figsize=(6.5, 8), sharex=True)
    axes[0].plot(t, sol.solar.sum(axis=0), label="solar", color="tab:orange")
    axes[0].plot(t, sol.demand.sum(axis=0), label="demand", color="tab:blue")
    axes[0].set_ylabel("kW")
    axes[0].legend(fontsize=8)
    axes[1].step(t, sol.price, where="mid", color="tab:red")
    axes[1].set_ylabel("price ($/kWh)")
    axes[2].step(t, sol.battery_power.sum(axis=0), where="mid", color="tab:green")
    axes[2].set_ylabel("battery net (kW)")
    for n, agent in enumerate(sc.agents):
        if agent.battery is not None:
            axes[3].plot(t, sol.soc[n], label=agent.name)
    axes[3].set_ylabel("SOC (kWh)")
    axes[3].set_xlabel("period")
    if axes[3].get_legend_handles_labels()[0]:
        axes[3].legend(fontsize=7)
    for ax in axes:
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def emit_negotiation_report(sc: Scenario, ledger: TradeLedger, out_dir, fmt: str = "csv") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in ledger.records:
        for name in sorted(rec.q):
            for t in range(sc.T):
                rows.append(
                    [
                        rec.iteration,
                        name,
                        t + 1,
                        rec.q[name][t],
                        rec.q_prime[name][t],
                        rec.beta,
                        rec.price[t],
                        rec.alpha[name],
                        rec.eta[name],
                        rec.delta[name][t],
                    ]
                )
    files = [
        _write_table(
            out / "negotiation_ledger.csv",
            ["iter", "agent_id", "t", "q", "q_prime", "beta", "pi", "alpha", "eta", "delta"],
            rows,
            fmt,
        )
    ]
    trades = {
        name: {
            "price": trade.price.tolist(),
            "quantity": trade.quantity.tolist(),
            "payment": trade.payment,
            "consumption_utility": trade.consumption_utility,
            "exit_iteration": trade.exit_iteration,
        }
        for name, trade in sorted(ledger.final_trades.items())
    }
    payload = {
        "pi_agent": ledger.pi_agent,
        "iterations": ledger.iterations,
        "termination": ledger.termination,
        "converged": ledger.converged,
        "pi_agent_revenue": ledger.pi_agent_revenue,
        "pi_agent_consumption_utility": ledger.pi_agent_consumption_utility,
        "realized_welfare": ledger.realized_welfare(),
        "no_trade_utility": dict(sorted(ledger.no_trade_utility.items())),
        "final_trades": trades,
        "degenerate_price_periods": ledger.degenerate_price_periods,
    }
    files.append(_write_json(out / "final_trades.json", payload))
    files.append(_plot_negotiation(sc, ledger, out / "negotiation_trace.png"))
    return files


def _plot_negotiation(sc: Scenario, ledger: TradeLedger, path: Path) -> Path:
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(6.5, 5), sharex=True)
    names = sorted({n for rec in ledger.records for n in rec.q})
    for name in names:
        xs, ys = [], []
        for rec in ledger.records:
            if name in rec.q_next:
                xs.append(rec.iteration)
                ys.append(float(np.sum(rec.q_next[name])))
        ax1.plot(xs, ys, marker=".", markersize=3, label=name)
    ax1.set_ylabel("proposed energy (kWh)")
    ax1.legend(fontsize=7)
    xs = [rec.iteration for rec in ledger.records]
    ax2.plot(xs, [float(np.mean(rec.price)) for rec in ledger.records], color="tab:red")
    ax2.set_ylabel("mean price ($/kWh)")
    ax2.set_xlabel("iteration")
    for ax in (ax1, ax2):
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def emit_report(result, out_dir, fmt: str = "csv") -> list[Path]:
    """Dispatch to the emitter matching the result object's type."""
    if isinstance(result, SweepResult):
        return emit_sweep_report(result, out_dir, fmt)
    if isinstance(result, ExperimentResult):
        return emit_multiagent_report(result, out_dir, fmt)
    raise TypeError(f"no report emitter for {type(result).__name__}")
