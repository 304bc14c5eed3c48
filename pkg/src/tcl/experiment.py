"""End-to-end runs: data -> tasks -> evaluation -> run directory.

Layout of ``<output_dir>/<name>/``::

    config.json                resolved configuration
    taxonomy/task_<t>.json     per-task taxonomy, plus merged_task_<t>.json
    relation/task_<t>.json     M and Gamma after task t
    memory/task_<t>.json       pretrained- and adapted-space memories
    model/task_<t>/            adapters, heads, trunk, registry, state.json
    metrics/eval_task_<t>.json accuracies measured right after task t
    metrics/summary.json       faa, ffm, matrices and diagnosis curves
    metrics/*.csv, *.png       tables and plots
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig
from .data import SyntheticGroupDataset, TaskSplit, load_embedding_split, load_image_folder, split_by_tasks
from .metrics import (AccuracyMatrix, diagnosis_curves, evaluate_checkpoint, latent_shift,
                      plot_accuracy_matrix, plot_diagnosis, write_summary)
from .model import ContinualModel, EmbeddingTrunk, MLPTrunk
from .taxonomy import load_taxonomy, save_taxonomy
from .trainer import ContinualLearner, load_checkpoint, run_task

log = logging.getLogger(__name__)

ABLATIONS = {
    "ce-only": {"loss.alpha": 0.0, "loss.beta": 0.0},
    "unweighted": {"loss.weighted": False},
    "no-group-term": {"loss.alpha": 0.0},
    "no-global-term": {"loss.beta": 0.0},
}


def apply_ablation(cfg: ExperimentConfig, ablate: str | None) -> ExperimentConfig:
    if not ablate:
        return cfg
    if ablate not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablate!r}; choose from {', '.join(ABLATIONS)}")
    return cfg.replace(**ABLATIONS[ablate])


def build_tasks(cfg: ExperimentConfig) -> tuple[list[TaskSplit], np.ndarray | None]:
    """Task splits and (for the MLP trunk) the label-free pretraining sample."""
    ds, sp = cfg.dataset, cfg.split
    if ds.kind == "synthetic":
        bench = SyntheticGroupDataset(ds.n_groups, ds.classes_per_group, ds.input_dim, ds.group_radius,
                                      ds.class_radius, ds.noise, ds.n_train, ds.n_test, seed=cfg.seed)
        tasks = bench.tasks(sp.n_tasks, sp.order_seed, sp.mode)
        pretrain = bench.pretraining_sample(cfg.model.pretrain_per_class, cfg.seed)
    else:
        if ds.kind == "embeddings":
            x_tr, y_tr = load_embedding_split(ds.path, "train")
            x_te, y_te = load_embedding_split(ds.path, "test")
            tasks = []
            for t, classes in enumerate(sp.classes, start=1):
                tr, te = np.isin(y_tr, classes), np.isin(y_te, classes)
                tasks.append(TaskSplit(t, list(classes), x_tr[tr], y_tr[tr], x_te[te], y_te[te]))
            pretrain = None
        else:
            x, y = load_image_folder(ds.path, ds.image_size)
            tasks = split_by_tasks(x, y, [list(c) for c in sp.classes], ds.test_fraction, cfg.seed)
            # no external pretraining data: the first task's images stand in
            pretrain = tasks[0].x_train
    if cfg.taxonomy:
        for task, path in zip(tasks, cfg.taxonomy):
            task.taxonomy = load_taxonomy(path)
    for task in tasks:
        if task.taxonomy is None:
            raise ValueError(f"task {task.task_id} has no taxonomy")
        missing = set(task.classes) - set(task.taxonomy.classes())
        if missing:
            raise ValueError(f"task {task.task_id}: classes {sorted(missing)} are not in its taxonomy")
    return tasks, pretrain


def build_learner(cfg: ExperimentConfig, tasks, pretrain) -> ContinualLearner:
    torch.manual_seed(cfg.seed)
    if cfg.dataset.kind == "embeddings":
        trunk = EmbeddingTrunk(tasks[0].x_train.shape[1])
    else:
        trunk = MLPTrunk(tasks[0].x_train.shape[1], cfg.model.hidden_dim, cfg.model.feature_dim, cfg.seed)
        trunk.fit_projection(pretrain)
    return ContinualLearner(trunk, cfg.loss, cfg.trainer, cfg.model.eta, cfg.inference.delta, cfg.seed)


def config_digest(cfg: ExperimentConfig) -> str:
    doc = cfg.to_dict()
    doc.pop("source", None)
    doc.pop("output_dir", None)
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()


def _completed_tasks(run: Path) -> int:
    t = 0
    while ((run / "model" / f"task_{t + 1}" / "state.json").is_file()
           and (run / "metrics" / f"eval_task_{t + 1}.json").is_file()):
        t += 1
    return t


def run_experiment(cfg: ExperimentConfig, resume: bool = True, stop_after: int | None = None) -> Path:
    """Train every task in order, evaluating after each; returns the run directory.

    With ``resume`` an existing run of the same configuration continues from
    its last finished task. ``stop_after`` ends the run early (used to test
    resumption).
    """
    run = cfg.run_dir
    run.mkdir(parents=True, exist_ok=True)
    digest = config_digest(cfg)
    meta_path = run / "config.json"
    if meta_path.is_file():
        previous = json.loads(meta_path.read_text()).get("digest")
        if previous != digest:
            raise RuntimeError(f"{run} holds a run of a different configuration; pick another name")
    meta_path.write_text(json.dumps({"digest": digest, "config": cfg.to_dict()}, indent=2, default=str))

    tasks, pretrain = build_tasks(cfg)
    learner = build_learner(cfg, tasks, pretrain)
    test_sets = []
    done = _completed_tasks(run) if resume else 0
    if done:
        load_checkpoint(learner, run, done)
        log.info("resuming %s after task %d", run, done)
    timings = {}
    for task in tasks:
        t = task.task_id
        save_taxonomy(task.taxonomy, run / "taxonomy" / f"task_{t}.json")
        if t <= done:
            test_sets.append(_test_set(learner, task))
            continue
        if stop_after is not None and t > stop_after:
            break
        start = time.perf_counter()
        try:
            run_task(learner, t, task.taxonomy, task.x_train, task.y_train, run_dir=run)
        except Exception as exc:
            raise RuntimeError(f"task {t} failed: {exc}") from exc
        test_sets.append(_test_set(learner, task))
        ev = evaluate_checkpoint(learner, test_sets, t, cfg.inference.xi)
        (run / "metrics").mkdir(exist_ok=True)
        (run / "metrics" / f"eval_task_{t}.json").write_text(json.dumps(ev, indent=2))
        timings[t] = time.perf_counter() - start
        log.info("task %d done in %.1fs: %s", t, timings[t], ev["group_aware"])
    (run / "metrics" / "timing.json").write_text(json.dumps(timings, indent=2))
    if _completed_tasks(run) == len(tasks):
        write_report(run, learner, test_sets, cfg)
    return run


def _test_set(learner, task: TaskSplit):
    y = np.array([learner.registry.id_of(str(n)) for n in task.y_test])
    return task.x_test, y


def _latent_shifts(learner, test_sets) -> list[float]:
    """Per task: W2 between features under the true prompt and under the predicted one."""
    out = []
    model = learner.model
    for i, (x, _) in enumerate(test_sets, start=1):
        with torch.no_grad():
            oracle = model.encode_task(x, i).numpy()
        inferred = model.encode_by_task(x, model.predict_task(x)).numpy()
        out.append(latent_shift(oracle, inferred))
    return out


def write_report(run: Path, learner, test_sets, cfg: ExperimentConfig) -> dict:
    evals = [json.loads((run / "metrics" / f"eval_task_{t}.json").read_text())
             for t in range(1, len(test_sets) + 1)]
    grouped = AccuracyMatrix.from_rows([e["group_aware"] for e in evals])
    plain = AccuracyMatrix.from_rows([e["plain"] for e in evals])
    curves = diagnosis_curves(evals)
    metrics = run / "metrics"
    grouped.to_csv(metrics / "accuracy_matrix.csv")
    plain.to_csv(metrics / "accuracy_matrix_plain.csv")
    curves.to_csv(metrics / "diagnosis.csv")
    extra = {"name": cfg.name, "seed": cfg.seed,
             "loss": dataclasses.asdict(cfg.loss), "xi": cfg.inference.xi}
    if learner is not None:
        extra["latent_shift"] = _latent_shifts(learner, test_sets)
    summary = write_summary(metrics / "summary.json", grouped, plain, curves, extra)
    plot_diagnosis(curves, metrics / "diagnosis_task1.png", task=1)
    plot_accuracy_matrix(grouped, metrics / "accuracy_matrix.png", "group-aware accuracy")
    return summary


def load_summary(run) -> dict:
    return json.loads((Path(run) / "metrics" / "summary.json").read_text())


def load_run(run, task: int | None = None):
    """Reopen a run at its last (or given) finished task: ``(learner, xi)``."""
    run = Path(run)
    meta = json.loads((run / "config.json").read_text())["config"]
    xi = float(meta["inference"]["xi"])
    t = task or _completed_tasks(run)
    if t == 0:
        raise FileNotFoundError(f"{run} has no finished task")
    model = ContinualModel.load(run / "model" / f"task_{t}")
    learner = ContinualLearner(model.trunk)
    load_checkpoint(learner, run, t)
    return learner, xi
