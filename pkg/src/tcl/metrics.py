"""Accuracy matrices, FAA/FFM, forgetting-diagnosis curves and latent shift."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, IncompleteMatrix, MissingProbe, SingleTask
from .memory import EPS_COV
from .relation import gaussian_w2


@dataclass
class AccuracyMatrix:
    """``rows[t-1][i-1]`` = accuracy on task i after training task t (i <= t)."""

    rows: list[list[float]] = field(default_factory=list)

    @classmethod
    def from_rows(cls, rows) -> AccuracyMatrix:
        m = cls([[float(v) for v in r] for r in rows])
        m.validate()
        return m

    @property
    def num_tasks(self) -> int:
        return len(self.rows)

    def validate(self):
        for t, row in enumerate(self.rows, start=1):
            if len(row) != t:
                raise IncompleteMatrix(f"row for task {t} has {len(row)} entries, expected {t}")
            if any(not 0.0 <= v <= 1.0 for v in row):
                raise ValueError(f"row {t} has entries outside [0, 1]")

    def append(self, row):
        self.rows.append([float(v) for v in row])
        self.validate()

    def __getitem__(self, key):
        """A_{i,t} with 1-based task indices."""
        i, t = key
        if not 1 <= i <= t <= self.num_tasks:
            raise IndexError(f"A[{i},{t}] undefined for {self.num_tasks} tasks")
        return self.rows[t - 1][i - 1]

    def as_array(self) -> np.ndarray:
        """T x T with NaN above the diagonal (row = after task t)."""
        T = self.num_tasks
        out = np.full((T, T), np.nan)
        for t, row in enumerate(self.rows):
            out[t, : len(row)] = row
        return out

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        T = self.num_tasks
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["after_task"] + [f"task_{i}" for i in range(1, T + 1)])
            for t, row in enumerate(self.rows, start=1):
                w.writerow([t] + [repr(v) for v in row] + [""] * (T - len(row)))


def _rows(A) -> list[list[float]]:
    rows = A.rows if isinstance(A, AccuracyMatrix) else [list(r) for r in A]
    for t, row in enumerate(rows, start=1):
        if len(row) != t:
            raise IncompleteMatrix(f"row for task {t} has {len(row)} entries, expected {t}")
    if not rows:
        raise IncompleteMatrix("empty accuracy matrix")
    return rows


def _dec(v) -> Decimal:
    # shortest repr of the float, so 0.9 - 0.8 is 0.1 as it is on paper
    return Decimal(repr(float(v)))


def faa(A) -> float:
    """Mean accuracy over all tasks after the last one."""
    rows = _rows(A)
    return float(sum(_dec(v) for v in rows[-1]) / len(rows[-1]))


def ffm(A) -> float:
    """Mean over tasks i < T of max_{t<T} (A_{i,t} - A_{i,T}); not clamped at zero.

    Both metrics are summed in decimal arithmetic and rounded once, so they
    equal values worked out by hand from the printed accuracies.
    """
    rows = _rows(A)
    T = len(rows)
    if T < 2:
        raise SingleTask("forgetting needs at least two tasks")
    drops = [max(_dec(rows[t][i]) for t in range(i, T - 1)) - _dec(rows[-1][i]) for i in range(T - 1)]
    return float(sum(drops) / (T - 1))


def latent_shift(features_trained, features_inferred) -> float:
    """Moment-matched W2 between two feature sets (one diagonal Gaussian each)."""
    a = np.atleast_2d(np.asarray(features_trained, np.float64))
    b = np.atleast_2d(np.asarray(features_inferred, np.float64))
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"{a.shape[1]} vs {b.shape[1]}")
    if np.array_equal(a, b):
        return 0.0
    va = np.maximum(a.var(axis=0), EPS_COV)
    vb = np.maximum(b.var(axis=0), EPS_COV)
    return gaussian_w2(a.mean(axis=0), va, b.mean(axis=0), vb)


@dataclass
class DiagnosisCurves:
    """Per checkpoint t and task i <= t: within-task, true and promptID accuracy."""

    within: AccuracyMatrix = field(default_factory=AccuracyMatrix)
    true: AccuracyMatrix = field(default_factory=AccuracyMatrix)
    prompt_id: AccuracyMatrix = field(default_factory=AccuracyMatrix)

    def task_curve(self, i: int) -> dict[str, list[float]]:
        """Curves of task ``i`` over checkpoints i..T."""
        T = self.within.num_tasks
        return {name: [m[i, t] for t in range(i, T + 1)]
                for name, m in (("within", self.within), ("true", self.true), ("prompt_id", self.prompt_id))}

    def to_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["after_task", "task", "within_task_acc", "true_acc", "prompt_id_acc"])
            for t in range(1, self.within.num_tasks + 1):
                for i in range(1, t + 1):
                    w.writerow([t, i, repr(self.within[i, t]), repr(self.true[i, t]),
                                repr(self.prompt_id[i, t])])


def evaluate_checkpoint(learner, test_sets, t: int, xi: float = 0.1) -> dict[str, list[float]]:
    """Accuracies on tasks 1..t right after finalizing task t.

    ``test_sets[i-1] = (x, class_ids)``. Returns group-aware accuracy, plain
    head accuracy, within-task probe accuracy (oracle prompt), and promptID
    accuracy, one entry per task.
    """
    import torch

    from .inference import Predictor

    model = learner.model
    predictor = Predictor.from_learner(learner, xi)
    out = {"group_aware": [], "plain": [], "within": [], "prompt_id": []}
    for i in range(1, t + 1):
        x, y = test_sets[i - 1]
        pred = predictor.predict(x)
        out["group_aware"].append(float(np.mean(pred.pred == y)))
        out["plain"].append(float(np.mean(pred.head_pred == y)))
        out["prompt_id"].append(float(np.mean(pred.task == i)))
        if str(i) not in model.probes:
            raise MissingProbe(f"task {i} has no probe")
        with torch.no_grad():
            z = model.encode_task(x, i)
            local = model.probe_logits(i, z).argmax(dim=1).numpy()
        classes = np.asarray(model.probe_classes[i])
        out["within"].append(float(np.mean(classes[local] == y)))
    return out


def diagnosis_curves(checkpoints) -> DiagnosisCurves:
    """Assemble curves from a sequence of :func:`evaluate_checkpoint` results."""
    curves = DiagnosisCurves()
    for t, ev in enumerate(checkpoints, start=1):
        if "within" not in ev:
            raise MissingProbe(f"checkpoint {t} has no within-task accuracies")
        curves.within.append(ev["within"])
        curves.true.append(ev["plain"])
        curves.prompt_id.append(ev["prompt_id"])
    return curves


def write_summary(path, group_aware: AccuracyMatrix, plain: AccuracyMatrix, curves: DiagnosisCurves,
                  extra: dict | None = None) -> dict:
    T = group_aware.num_tasks
    summary = {
        "num_tasks": T,
        "faa": faa(group_aware),
        "ffm": ffm(group_aware) if T > 1 else None,
        "faa_plain": faa(plain),
        "ffm_plain": ffm(plain) if T > 1 else None,
        "accuracy_matrix": group_aware.rows,
        "accuracy_matrix_plain": plain.rows,
        "curves": {"within_task": curves.within.rows, "true": curves.true.rows,
                   "prompt_id": curves.prompt_id.rows},
    }
    if extra:
        summary.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def plot_diagnosis(curves: DiagnosisCurves, path, task: int = 1):
    """Line plot of one task's within-task, true and promptID accuracy over checkpoints."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    c = curves.task_curve(task)
    xs = list(range(task, task + len(c["within"])))
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(xs, c["within"], "o-", label="within-task (s_t)")
    ax.plot(xs, c["true"], "s-", label="true (h_psi)")
    ax.plot(xs, c["prompt_id"], "^--", label="promptID")
    ax.set_xlabel("after task")
    ax.set_ylabel(f"accuracy on task {task}")
    ax.set_xticks(xs)
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_accuracy_matrix(A: AccuracyMatrix, path, title: str = "accuracy"):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    arr = A.as_array()
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    im = ax.imshow(arr, vmin=0, vmax=1, cmap="viridis")
    ax.set_xlabel("evaluated task")
    ax.set_ylabel("after task")
    ax.set_xticks(range(A.num_tasks), [str(i + 1) for i in range(A.num_tasks)])
    ax.set_yticks(range(A.num_tasks), [str(i + 1) for i in range(A.num_tasks)])
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
