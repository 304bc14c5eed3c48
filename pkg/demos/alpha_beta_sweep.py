"""FAA over the weights of the two contrastive terms.

alpha scales the group term (same leaf group only, Gamma-weighted) and
beta the global supervised-contrastive term. alpha = beta = 0 is the
CE-only model. The sweep averages three seeds per grid point and draws
the surface next to the per-seed CSVs that `tcl sweep` writes.

    python demos/alpha_beta_sweep.py [output_dir]
"""

import sys
from pathlib import Path

import numpy as np

from tcl.config import load_config
from tcl.sweep import parse_grid, plot_heatmap, sweep

ROOT = Path(__file__).resolve().parents[1]
GRID = "loss.alpha=0,0.5,1,2;loss.beta=0,0.5,1,2"
SEEDS = (0, 1, 2)


def main(output_dir="runs"):
    grid = parse_grid(GRID)
    base = load_config(ROOT / "configs" / "synthetic.toml").replace(output_dir=output_dir)
    per_seed = []
    for seed in SEEDS:
        cfg = base.replace(name=f"ab_seed{seed}", seed=seed, **{"trainer.seed": seed, "split.order_seed": seed})
        out, rows = sweep(cfg, grid)
        per_seed.append(rows)
        print(f"seed {seed}: {out / 'sweep.csv'}")
    mean_rows = []
    for i, row in enumerate(per_seed[0]):
        faas = [rows[i]["faa"] for rows in per_seed if rows[i]["faa"] is not None]
        mean_rows.append({**{k: row[k] for k in grid}, "faa": float(np.mean(faas)) if faas else None})
    print("\nmean FAA over seeds")
    alphas, betas = grid["loss.alpha"], grid["loss.beta"]
    print("alpha\\beta " + " ".join(f"{b:>7}" for b in betas))
    for a in alphas:
        vals = [r["faa"] for r in mean_rows if r["loss.alpha"] == a]
        print(f"{a:>10} " + " ".join(f"{v:7.4f}" for v in vals))
    dest = Path(output_dir) / "alpha_beta_mean_faa.png"
    plot_heatmap(grid, mean_rows, dest)
    print(f"\nsurface: {dest}")


if __name__ == "__main__":
    main(*sys.argv[1:])
