"""Aggregation of per-seed metrics CSVs into reward curves and ablation tables.

Usable as a library (the CLI calls it) or standalone::

    python -m gcdt.aggregate runs/gcdt_n16/seed*/metrics.csv --out curve.csv
"""

from __future__ import annotations

import argparse
import csv
import math
from pathlib import Path

import numpy as np

CURVE_HEADER = ("env_steps", "median_return", "q25_return", "q75_return", "n_seeds")
CHECKPOINT_FRACTIONS = (0.2, 0.4, 0.6, 0.8)
ABLATION_HEADER = (
    "planner", "n_simulations",
    *(f"ret_{int(f * 100)}pct" for f in CHECKPOINT_FRACTIONS),
    "final", "final_q25", "final_q75", "n_seeds",
)
WINDOW_FRACTION = 0.1


def read_returns(path) -> tuple[np.ndarray, np.ndarray]:
    """``(env_steps, episode_return)`` arrays from one metrics CSV."""
    steps, returns = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            steps.append(int(float(row["env_steps"])))
            returns.append(float(row["episode_return"]))
    return np.asarray(steps), np.asarray(returns)


def window_mean(steps, returns, end, width) -> float:
    """Mean return of episodes finishing in ``(end - width, end]``; NaN if none."""
    sel = (steps > end - width) & (steps <= end)
    return float(np.mean(returns[sel])) if sel.any() else math.nan


def _quartiles(values):
    vals = np.asarray([v for v in values if not math.isnan(v)])
    if vals.size == 0:
        return math.nan, math.nan, math.nan, 0
    q25, med, q75 = np.percentile(vals, [25, 50, 75])
    return float(med), float(q25), float(q75), int(vals.size)


def curve(runs, bin_width: int, budget: int | None = None) -> list[dict]:
    """Median and IQR across seeds of the windowed return on a regular env-step grid.

    ``runs`` is a list of ``(steps, returns)`` pairs, one per seed.
    """
    if budget is None:
        budget = max(int(s.max()) for s, _ in runs if len(s))
    rows = []
    for end in range(bin_width, budget + bin_width, bin_width):
        end = min(end, budget)
        med, q25, q75, n = _quartiles([window_mean(s, r, end, bin_width) for s, r in runs])
        rows.append({"env_steps": end, "median_return": med, "q25_return": q25, "q75_return": q75, "n_seeds": n})
        if end == budget:
            break
    return rows


def checkpoint_returns(steps, returns, budget: int) -> dict:
    """Windowed mean return at 20/40/60/80% of the budget and at the end."""
    width = WINDOW_FRACTION * budget
    out = {f"ret_{int(f * 100)}pct": window_mean(steps, returns, f * budget, width) for f in CHECKPOINT_FRACTIONS}
    out["final"] = window_mean(steps, returns, budget, width)
    return out


def ablation_row(planner: str, n_sims: int, runs, budget: int) -> dict:
    """One table row: seed-median of each checkpoint value plus the final IQR."""
    per_seed = [checkpoint_returns(s, r, budget) for s, r in runs]
    row = {"planner": planner, "n_simulations": n_sims}
    for key in per_seed[0]:
        med, q25, q75, n = _quartiles([p[key] for p in per_seed])
        row[key] = med
        if key == "final":
            row["final_q25"], row["final_q75"], row["n_seeds"] = q25, q75, n
    return row


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def main(argv=None):
    parser = argparse.ArgumentParser(description="Aggregate per-seed metrics CSVs into a median/IQR curve.")
    parser.add_argument("metrics", nargs="+", type=Path)
    parser.add_argument("--bin", type=int, default=240, help="window width in env steps")
    parser.add_argument("--budget", type=int, default=None)
    parser.add_argument("--out", type=Path, required=True)
    args = parser.parse_args(argv)
    runs = [read_returns(p) for p in args.metrics]
    write_rows(args.out, CURVE_HEADER, curve(runs, args.bin, args.budget))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
