"""Group-aware prediction: head probabilities reweighted by energy-based group posteriors.

For a feature ``z`` and leaf group ``g`` with classes ``Y_g``::

    y_g  = argmin_{c in Y_g} d(z, c)                  (ties -> lowest class id)
    E(g) = -d(z, y_g) - xi * sum_{c in Y_g} Gamma[c, y_g] * sum_i maha(z; mu_ci, Sigma_ci)
    p(g | z) = softmax_g E(g)
    p(y | x) ∝ p(g(y) | z) * q(y)                      (renormalised over y)

``d`` is the smallest cosine distance to a component mean, ``maha`` the
square-rooted diagonal Mahalanobis distance, ``q`` the head softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import softmax

from .errors import MissingMemory, MissingRelationEntry, NoTasksTrained
from .memory import MemoryStore, l2_normalize


def _memory(memories, c):
    try:
        return memories[int(c)]
    except KeyError:
        raise MissingMemory(f"no adapted-space memory for class {c}") from None


def class_distance(z, gmm) -> np.ndarray:
    """Minimum cosine distance from ``z`` (unit rows) to the normalised component means."""
    z = np.asarray(z, np.float64)
    return np.min(1.0 - z @ l2_normalize(gmm.means).T, axis=-1)


def mahalanobis_sum(z, gmm) -> np.ndarray:
    """``sum_i sqrt((z - mu_i)^T Sigma_i^-1 (z - mu_i))`` with diagonal ``Sigma_i``."""
    z = np.asarray(z, np.float64)
    diff = z[..., None, :] - gmm.means
    return np.sqrt(np.sum(diff ** 2 / gmm.variances, axis=-1)).sum(axis=-1)


def _gamma_block(gamma, rows, cols) -> np.ndarray:
    gamma = np.asarray(gamma, np.float64)
    top = max(max(rows), max(cols))
    if gamma.ndim != 2 or gamma.shape[0] <= top or gamma.shape[1] <= top:
        raise MissingRelationEntry(f"Gamma of shape {gamma.shape} has no entry for class {top}")
    return gamma[np.ix_(rows, cols)]


def _energies(dist: np.ndarray, maha: np.ndarray, class_ids, groups, gamma, xi: float):
    """Vectorised energies; ``dist``/``maha`` columns follow ``class_ids``."""
    col = {c: i for i, c in enumerate(class_ids)}
    n = dist.shape[0]
    E = np.empty((n, len(groups)))
    nearest = np.empty((n, len(groups)), dtype=np.int64)
    for k, members in enumerate(groups):
        members = sorted(int(c) for c in members)
        cols = [col[c] for c in members]
        local = np.argmin(dist[:, cols], axis=1)
        yhat = np.asarray(members)[local]
        g = _gamma_block(gamma, members, members)           # g[c, y]
        weights = g[:, local].T                                # (n, |Y_g|): Gamma[c, yhat]
        E[:, k] = -dist[np.arange(n), np.asarray(cols)[local]] - xi * np.sum(weights * maha[:, cols], axis=1)
        nearest[:, k] = yhat
    return E, nearest


def _tables(z, memories, class_ids):
    gmms = [_memory(memories, c) for c in class_ids]
    dist = np.stack([class_distance(z, g) for g in gmms], axis=-1)
    maha = np.stack([mahalanobis_sum(z, g) for g in gmms], axis=-1)
    return dist, maha


def group_energy(z, group, gamma, memories, xi: float = 0.1):
    """Energy of ``z`` w.r.t. one group; returns ``(E, nearest class)`` (arrays for batched ``z``)."""
    if xi < 0:
        raise ValueError("xi must be >= 0")
    z = np.asarray(z, np.float64)
    single = z.ndim == 1
    zz = np.atleast_2d(z)
    members = sorted(int(c) for c in group)
    dist, maha = _tables(zz, memories, members)
    E, nearest = _energies(dist, maha, members, [members], gamma, xi)
    if single:
        return float(E[0, 0]), int(nearest[0, 0])
    return E[:, 0], nearest[:, 0]


@dataclass(frozen=True, eq=False)
class GroupEnergyReport:
    group_ids: tuple[str, ...]
    energies: np.ndarray      # (n, G)
    posterior: np.ndarray     # (n, G)
    nearest: np.ndarray       # (n, G) class id per group
    xi: float


def group_posterior(z, groups, gamma, memories, xi: float = 0.1, group_ids=None) -> GroupEnergyReport:
    """Softmax over group energies; ``groups`` is a list of class-id lists."""
    if not groups:
        raise ValueError("at least one group is required")
    if xi < 0:
        raise ValueError("xi must be >= 0")
    zz = np.atleast_2d(np.asarray(z, np.float64))
    class_ids = sorted({int(c) for g in groups for c in g})
    dist, maha = _tables(zz, memories, class_ids)
    E, nearest = _energies(dist, maha, class_ids, groups, gamma, xi)
    ids = tuple(group_ids) if group_ids is not None else tuple(str(i) for i in range(len(groups)))
    return GroupEnergyReport(ids, E, softmax(E, axis=1), nearest, xi)


def combine_with_groups(q, group_post, group_of_class) -> np.ndarray:
    """``p(y|x) ∝ p(g(y)|x) q(y)`` renormalised over y."""
    q = np.atleast_2d(np.asarray(q, np.float64))
    p = q * np.asarray(group_post)[:, np.asarray(group_of_class)]
    total = p.sum(axis=1, keepdims=True)
    # all mass on groups the head gives zero probability: fall back to the head
    bad = total[:, 0] <= 0
    p[bad], total[bad] = q[bad], q[bad].sum(axis=1, keepdims=True)
    return p / total


@dataclass(frozen=True, eq=False)
class PredictionOutput:
    probs: np.ndarray          # (n, m) p(y|x)
    head_probs: np.ndarray     # (n, m) q(y)
    pred: np.ndarray           # (n,) group-aware argmax
    head_pred: np.ndarray      # (n,) plain-head argmax
    task: np.ndarray           # (n,) predicted task
    chosen_group: np.ndarray   # (n,) argmax of p(g|x)
    groups: GroupEnergyReport


class Predictor:
    """Read-only view over a trained learner (model, adapted memories, relation)."""

    def __init__(self, model, memories: MemoryStore, gamma, xi: float = 0.1):
        self.model = model
        self.memories = memories
        self.gamma = np.asarray(gamma, np.float64)
        self.xi = xi
        self.group_ids, self.group_of_class = model.registry.group_index()
        self.groups = [[] for _ in self.group_ids]
        for c, g in enumerate(self.group_of_class):
            self.groups[g].append(c)

    @classmethod
    def from_learner(cls, learner, xi: float = 0.1) -> Predictor:
        return cls(learner.model, learner.adapted, learner.gamma(), xi)

    def predict_features(self, z, tasks=None) -> PredictionOutput:
        z = torch.as_tensor(np.atleast_2d(np.asarray(z, np.float64)))
        with torch.no_grad():
            q = torch.softmax(self.model.logits(z), dim=1).numpy()
        report = group_posterior(z.numpy(), self.groups, self.gamma, self.memories, self.xi, self.group_ids)
        probs = combine_with_groups(q, report.posterior, self.group_of_class)
        tasks = np.zeros(len(q), np.int64) if tasks is None else np.asarray(tasks)
        return PredictionOutput(probs, q, probs.argmax(axis=1), q.argmax(axis=1), tasks,
                                report.posterior.argmax(axis=1), report)

    def predict(self, x) -> PredictionOutput:
        if self.model.num_tasks == 0 or self.model.task_head.out_dim == 0:
            raise NoTasksTrained("no task has been finalized")
        tasks = self.model.predict_task(x)
        z = self.model.encode_by_task(x, tasks)
        return self.predict_features(z.numpy(), tasks)


def predict(learner, x, xi: float = 0.1) -> PredictionOutput:
    return Predictor.from_learner(learner, xi).predict(x)
