"""Grid sweeps over dotted config keys with an aggregated CSV and heatmap."""

from __future__ import annotations

import csv
import itertools
import json
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .errors import ValidationError
from .experiment import load_summary, run_experiment


def parse_grid(spec: str) -> dict[str, list]:
    """``"loss.alpha=0,0.5,1;loss.beta=0,1"`` -> ``{"loss.alpha": [0, 0.5, 1], ...}``."""
    grid = {}
    for part in filter(None, (p.strip() for p in spec.split(";"))):
        if "=" not in part:
            raise ValidationError("grid", f"expected key=v1,v2,... in {part!r}")
        key, values = part.split("=", 1)
        parsed = [_scalar(v.strip()) for v in values.split(",") if v.strip()]
        if not parsed:
            raise ValidationError(f"grid.{key.strip()}", "no values")
        grid[key.strip()] = parsed
    if not grid:
        raise ValidationError("grid", "empty grid")
    return grid


def _scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def grid_points(grid: dict[str, list]) -> list[dict]:
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def point_name(base: str, point: dict) -> str:
    return base + "__" + "_".join(f"{k.split('.')[-1]}={v}" for k, v in point.items())


def _run_point(cfg: ExperimentConfig, point: dict) -> dict:
    row = dict(point)
    try:
        run = run_experiment(cfg.replace(**point, name=point_name(cfg.name, point)))
        s = load_summary(run)
        row.update(status="ok", faa=s["faa"], ffm=s["ffm"], faa_plain=s["faa_plain"], run=str(run), error="")
    except Exception as exc:  # a failed point must not sink the sweep
        row.update(status="failed", faa=None, ffm=None, faa_plain=None, run="",
                   error=f"{type(exc).__name__}: {exc}")
        row["traceback"] = traceback.format_exc()
    return row


def sweep(cfg: ExperimentConfig, grid: dict[str, list], workers: int = 1) -> tuple[Path, list[dict]]:
    """One run per grid point; writes ``sweep.csv``, ``failures.json`` and a heatmap."""
    for key in grid:
        cfg.replace(**{key: grid[key][0]})  # validates the key before any run starts
    points = grid_points(grid)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_run_point, [cfg] * len(points), points))
    else:
        rows = [_run_point(cfg, p) for p in points]
    out = Path(cfg.output_dir) / f"{cfg.name}__sweep"
    out.mkdir(parents=True, exist_ok=True)
    fields = list(grid) + ["status", "faa", "ffm", "faa_plain", "run", "error"]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    failures = [r for r in rows if r["status"] != "ok"]
    (out / "failures.json").write_text(json.dumps(failures, indent=2, default=str))
    if len(grid) == 2 and len(failures) < len(rows):
        plot_heatmap(grid, rows, out / "faa_heatmap.png")
    return out, rows


def plot_heatmap(grid: dict[str, list], rows: list[dict], path, metric: str = "faa"):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    (kx, xs), (ky, ys) = list(grid.items())
    surface = np.full((len(ys), len(xs)), np.nan)
    for r in rows:
        if r.get(metric) is not None:
            surface[ys.index(r[ky]), xs.index(r[kx])] = r[metric]
    fig, ax = plt.subplots(figsize=(4.2, 3.4))
    im = ax.imshow(surface, origin="lower", cmap="viridis")
    ax.set_xticks(range(len(xs)), [str(v) for v in xs])
    ax.set_yticks(range(len(ys)), [str(v) for v in ys])
    ax.set_xlabel(kx)
    ax.set_ylabel(ky)
    for (i, j), v in np.ndenumerate(surface):
        if not np.isnan(v):
            ax.text(j, i, f"{v:.3f}", ha="center", va="center", fontsize=7, color="w")
    ax.set_title(metric.upper())
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
