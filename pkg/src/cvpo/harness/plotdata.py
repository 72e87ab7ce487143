"""Reshape per-run metrics files into plot-ready tables."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from pathlib import Path

import numpy as np

from .train import METRIC_COLUMNS, _fmt

WINDOW_FRACTION = 0.2


class SchemaError(ValueError):
    pass


def window_start(n_epochs: int) -> int:
    """First epoch (1-based) of the final 20% of an ``n_epochs`` run."""
    if n_epochs < 1:
        raise ValueError("empty run")
    k = max(1, math.ceil(round(WINDOW_FRACTION * n_epochs, 9)))
    return n_epochs - k + 1


def read_metrics(path) -> tuple[dict, np.ndarray]:
    """Return ``(run info, rows)`` for one metrics file; info comes from the sibling ``run.json``."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        if header != METRIC_COLUMNS:
            raise SchemaError(f"{path}: unexpected columns {list(header)}")
        rows = [[float(v) for v in r] for r in reader if r]
    info_path = path.parent / "run.json"
    info = json.loads(info_path.read_text()) if info_path.exists() else {"algo": "unknown", "seed": -1}
    data = np.array(rows, dtype=float).reshape(-1, len(METRIC_COLUMNS))
    return info, data


def _write(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in r])


def window_summary(costs, rewards) -> dict:
    costs, rewards = np.asarray(costs, dtype=float), np.asarray(rewards, dtype=float)
    q1, med, q3 = np.quantile(costs, [0.25, 0.5, 0.75], method="linear")
    return {"cost_q1": float(q1), "cost_median": float(med), "cost_q3": float(q3),
            "cost_mean": float(costs.mean()), "reward_mean": float(rewards.mean())}


def emit_plotdata(paths, out_dir) -> dict[str, Path]:
    """Write ``long.csv``, ``aggregate.csv``, ``reward_vs_cost.csv`` and ``window.csv``.

    Every input must carry the standard metrics header; otherwise ``SchemaError``.
    """
    paths = [Path(p) for p in paths]
    if not paths:
        raise ValueError("need at least one metrics file")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    col = {c: i for i, c in enumerate(METRIC_COLUMNS)}
    runs = sorted((read_metrics(p) for p in paths), key=lambda r: (str(r[0]["algo"]), int(r[0]["seed"])))

    long_rows, rvc_rows, win_rows = [], [], []
    by_algo_epoch = defaultdict(list)
    pooled = defaultdict(lambda: ([], []))
    for info, data in runs:
        algo, seed = str(info["algo"]), int(info["seed"])
        for row in data:
            long_rows.append([algo, seed, int(row[0])] + list(row[1:]))
            by_algo_epoch[(algo, int(row[0]))].append(row)
            cum = row[col["cumulative_cost"]]
            rvc_rows.append([algo, seed, int(row[0]), row[col["env_steps"]], cum,
                             math.log10(cum) if cum > 0 else math.nan, row[col["ep_reward_mean"]]])
        if len(data) == 0:
            continue
        start = window_start(int(data[-1, 0]))
        win = data[data[:, 0] >= start]
        costs, rewards = win[:, col["ep_cost_mean"]], win[:, col["ep_reward_mean"]]
        s = window_summary(costs, rewards)
        win_rows.append([algo, seed, start, int(data[-1, 0])] + list(s.values()))
        pooled[algo][0].extend(costs)
        pooled[algo][1].extend(rewards)
    for algo, (costs, rewards) in sorted(pooled.items()):
        s = window_summary(costs, rewards)
        win_rows.append([algo, "all", "", ""] + list(s.values()))

    agg_rows = []
    for (algo, epoch), rows in sorted(by_algo_epoch.items()):
        arr = np.array(rows)
        vals = []
        for c in METRIC_COLUMNS[1:]:
            x = arr[:, col[c]]
            x = x[~np.isnan(x)]
            vals += [x.mean(), x.std()] if x.size else [math.nan, math.nan]
        agg_rows.append([algo, epoch, len(rows)] + vals)

    files = {
        "long": out / "long.csv",
        "aggregate": out / "aggregate.csv",
        "reward_vs_cost": out / "reward_vs_cost.csv",
        "window": out / "window.csv",
    }
    _write(files["long"], ("algo", "seed") + METRIC_COLUMNS, long_rows)
    agg_header = ["algo", "epoch", "n_seeds"]
    for c in METRIC_COLUMNS[1:]:
        agg_header += [f"{c}_mean", f"{c}_std"]
    _write(files["aggregate"], agg_header, agg_rows)
    _write(files["reward_vs_cost"], ("algo", "seed", "epoch", "env_steps", "cumulative_cost",
                                     "log10_cumulative_cost", "ep_reward_mean"), rvc_rows)
    _write(files["window"], ("algo", "seed", "window_start", "window_end", "cost_q1", "cost_median",
                             "cost_q3", "cost_mean", "reward_mean"), win_rows)
    return files
