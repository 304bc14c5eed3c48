"""Command line: ``tcl run|sweep|predict|report|taxonomy-prompt``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import TaxonomyError, ValidationError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


def _load_inputs(path: Path) -> np.ndarray:
    from .model import read_embeddings

    if path.suffix == ".bin":
        return read_embeddings(path)
    if path.suffix == ".npy":
        return np.atleast_2d(np.load(path)).astype(np.float64)
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))


def cmd_run(args) -> int:
    from .config import load_config
    from .experiment import apply_ablation, load_summary, run_experiment

    cfg = load_config(args.config)
    cfg = apply_ablation(cfg, args.ablate)
    changes = {}
    if args.name:
        changes["name"] = args.name
    elif args.ablate:
        changes["name"] = f"{cfg.name}__{args.ablate}"
    if args.output_dir:
        changes["output_dir"] = args.output_dir
    if changes:
        cfg = cfg.replace(**changes)
    run = run_experiment(cfg, resume=not args.fresh)
    s = load_summary(run)
    print(f"{run}: faa={s['faa']:.4f} ffm={s['ffm'] if s['ffm'] is None else round(s['ffm'], 4)} "
          f"faa_plain={s['faa_plain']:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .config import load_config
    from .sweep import parse_grid, sweep

    cfg = load_config(args.config)
    if args.output_dir:
        cfg = cfg.replace(output_dir=args.output_dir)
    out, rows = sweep(cfg, parse_grid(args.grid), args.workers)
    failed = [r for r in rows if r["status"] != "ok"]
    print(f"{out}: {len(rows) - len(failed)}/{len(rows)} runs succeeded")
    for r in failed:
        print(f"  failed {r}: {r['error']}", file=sys.stderr)
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_predict(args) -> int:
    from .experiment import load_run
    from .inference import Predictor

    learner, xi = load_run(args.run)
    xi = args.xi if args.xi is not None else xi
    x = _load_inputs(Path(args.inputs))
    out = Predictor.from_learner(learner, xi).predict(x)
    reg = learner.registry
    group_ids = out.groups.group_ids
    dest = Path(args.out) if args.out else Path(args.run) / "predictions.csv"
    with open(dest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["input_id", "predicted_task", "top1_class", "top5", "chosen_group", "group_posterior"])
        for n in range(len(x)):
            top = np.argsort(-out.probs[n], kind="stable")[:5]
            w.writerow([n, int(out.task[n]), reg.name_of(int(out.pred[n])),
                        json.dumps({reg.name_of(int(c)): round(float(out.probs[n, c]), 6) for c in top}),
                        group_ids[out.chosen_group[n]],
                        json.dumps({g: round(float(p), 6) for g, p in zip(group_ids, out.groups.posterior[n])})])
    print(f"wrote {len(x)} predictions to {dest}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .experiment import load_summary

    s = load_summary(args.run)
    print(f"run {args.run} ({s['num_tasks']} tasks, seed {s['seed']})")
    print(f"  FAA group-aware {s['faa']:.4f}   plain head {s['faa_plain']:.4f}")
    if s["ffm"] is not None:
        print(f"  FFM group-aware {s['ffm']:.4f}   plain head {s['ffm_plain']:.4f}")
    print("  accuracy matrix (row = after task t):")
    for t, row in enumerate(s["accuracy_matrix"], start=1):
        print(f"    {t}: " + " ".join(f"{v:.3f}" for v in row))
    c = s["curves"]
    print("  task 1 over time: within " + " ".join(f"{r[0]:.3f}" for r in c["within_task"])
          + " | true " + " ".join(f"{r[0]:.3f}" for r in c["true"])
          + " | promptID " + " ".join(f"{r[0]:.3f}" for r in c["prompt_id"]))
    if args.json:
        print(json.dumps(s, indent=2))
    return EXIT_OK


def cmd_taxonomy_prompt(args) -> int:
    from .taxonomy import FileBackedLLMClient, render_taxonomy_prompt, request_taxonomy, save_taxonomy

    text = Path(args.labels).read_text()
    labels = [line.strip() for line in text.replace(",", "\n").splitlines() if line.strip()]
    print(render_taxonomy_prompt(labels))
    if args.responses:
        tree = request_taxonomy(FileBackedLLMClient(args.responses), labels)
        dest = Path(args.out or "taxonomy.json")
        save_taxonomy(tree, dest)
        print(f"wrote taxonomy with {len(tree.leaf_groups())} leaf groups to {dest}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tcl", description="Taxonomy-guided continual learning toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate one configuration")
    r.add_argument("config")
    r.add_argument("--ablate", choices=["ce-only", "unweighted", "no-group-term", "no-global-term"])
    r.add_argument("--name")
    r.add_argument("--output-dir")
    r.add_argument("--fresh", action="store_true", help="ignore finished tasks of an earlier run")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="grid over dotted config keys")
    s.add_argument("config")
    s.add_argument("--grid", required=True, help='e.g. "loss.alpha=0,0.5,1;loss.beta=0,1"')
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--output-dir")
    s.set_defaults(func=cmd_sweep)

    pr = sub.add_parser("predict", help="batch prediction with a finished run")
    pr.add_argument("run")
    pr.add_argument("inputs", help=".bin embedding file, .npy or comma-separated text")
    pr.add_argument("--out")
    pr.add_argument("--xi", type=float)
    pr.set_defaults(func=cmd_predict)

    rep = sub.add_parser("report", help="print the metrics of a finished run")
    rep.add_argument("run")
    rep.add_argument("--json", action="store_true")
    rep.set_defaults(func=cmd_report)

    tp = sub.add_parser("taxonomy-prompt", help="render the taxonomy request for a label list")
    tp.add_argument("labels", help="file with one label per line (or comma separated)")
    tp.add_argument("--responses", help="JSON map prompt -> response used instead of a live model")
    tp.add_argument("--out")
    tp.set_defaults(func=cmd_taxonomy_prompt)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, TaxonomyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
