"""Cross-entropy plus the group-contrastive regulariser.

All functions take torch tensors (numpy arrays are converted) and return
differentiable scalars. With ``u(a) = exp(a / tau)`` and anchors ``x`` drawn
from the current task only, the per-anchor group term is::

    -log  sum_{x' same class} u(z_x . z_x')
          ----------------------------------------------------
          sum_{x_bar in anchor's group, x_bar != x} g * u(z_x . z_x_bar)

with ``g = Gamma[y_x, y_x_bar]`` (or 1 for the unweighted form). The global
term uses every non-anchor row in the denominator without weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import GroupMismatch, NonpositiveTemperature, NoPositive, ShapeMismatch


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 0.1
    ce_weight: float = 1.0
    weighted: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.ce_weight < 0:
            raise ValueError("alpha, beta and ce_weight must be >= 0")
        if not self.tau > 0:
            raise NonpositiveTemperature(f"tau must be positive, got {self.tau}")

    @property
    def contrastive(self) -> bool:
        return self.alpha > 0 or self.beta > 0


def _tensor(x, dtype=None, like=None):
    if isinstance(x, torch.Tensor):
        return x
    arr = np.asarray(x)
    if dtype is None and np.issubdtype(arr.dtype, np.floating):
        dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(arr, dtype=dtype)


@dataclass(frozen=True, eq=False)
class ContrastiveBatch:
    z: torch.Tensor            # (n, d) unit-norm rows
    labels: torch.Tensor       # (n,) class ids
    groups: torch.Tensor       # (n,) group index
    is_new_task: torch.Tensor  # (n,) bool; anchors

    def __post_init__(self):
        z = _tensor(self.z)
        labels = _tensor(self.labels, torch.long)
        groups = self.groups
        if len(groups) and isinstance(groups[0], str):
            names = {g: i for i, g in enumerate(dict.fromkeys(groups))}
            groups = [names[g] for g in groups]
        groups = _tensor(groups, torch.long)
        new = _tensor(self.is_new_task, torch.bool)
        n = z.shape[0]
        if z.ndim != 2 or labels.shape != (n,) or groups.shape != (n,) or new.shape != (n,):
            raise ShapeMismatch("z must be (n, d) with one label, group and flag per row")
        for name, value in (("z", z), ("labels", labels), ("groups", groups), ("is_new_task", new)):
            object.__setattr__(self, name, value)

    def __len__(self):
        return self.z.shape[0]

    def check_unit_norm(self, atol=1e-6):
        norms = self.z.detach().norm(dim=1)
        if torch.any((norms - 1).abs() > atol):
            raise ValueError("contrastive features must be unit norm")


def _pair_masks(batch: ContrastiveBatch):
    n = len(batch)
    not_self = ~torch.eye(n, dtype=torch.bool)
    same_label = batch.labels[:, None] == batch.labels[None, :]
    same_group = batch.groups[:, None] == batch.groups[None, :]
    if torch.any(same_label & ~same_group):
        raise GroupMismatch("rows with the same label carry different groups")
    return not_self, same_label, same_group


def _anchor_rows(batch, positives):
    anchors = torch.nonzero(batch.is_new_task).flatten()
    if anchors.numel() == 0:
        raise NoPositive("batch has no anchors (no current-task rows)")
    lacking = anchors[positives[anchors].sum(dim=1) == 0]
    if lacking.numel():
        raise NoPositive(f"anchor rows {lacking.tolist()} have no same-class positive")
    return anchors


def _masked_logsumexp(x, mask):
    return torch.logsumexp(x.masked_fill(~mask, float("-inf")), dim=1)


def supcon_all(batch: ContrastiveBatch, tau: float) -> torch.Tensor:
    """Supervised contrastive loss over the whole batch, anchors = new-task rows."""
    if not tau > 0:
        raise NonpositiveTemperature(f"tau must be positive, got {tau}")
    not_self, same_label, _ = _pair_masks(batch)
    pos = same_label & not_self
    anchors = _anchor_rows(batch, pos)
    sim = (batch.z[anchors] @ batch.z.T) / tau
    terms = _masked_logsumexp(sim, not_self[anchors]) - _masked_logsumexp(sim, pos[anchors])
    return terms.mean()


def _group_terms(batch, tau, gamma):
    not_self, same_label, same_group = _pair_masks(batch)
    pos = same_label & not_self & batch.is_new_task[None, :]
    anchors = _anchor_rows(batch, pos)
    sim = (batch.z[anchors] @ batch.z.T) / tau
    den_mask = same_group[anchors] & not_self[anchors]
    if gamma is None:
        den = _masked_logsumexp(sim, den_mask)
    else:
        g = gamma[batch.labels[anchors][:, None], batch.labels[None, :]]
        den = _masked_logsumexp(sim + torch.log(g), den_mask)
    return den - _masked_logsumexp(sim, pos[anchors])


def group_loss(batch: ContrastiveBatch, gamma, config: LossConfig) -> torch.Tensor:
    """alpha * (group-restricted term) + beta * supcon_all.

    ``gamma=None`` gives the unweighted form; otherwise ``gamma`` is the
    m x m class-relation weight matrix indexed by class id.
    """
    if gamma is not None:
        gamma = _tensor(gamma, like=batch.z).to(batch.z.dtype)
        top = int(batch.labels.max())
        if gamma.ndim != 2 or gamma.shape[0] <= top or gamma.shape[1] <= top:
            raise ShapeMismatch(f"Gamma {tuple(gamma.shape)} does not cover class {top}")
    zero = batch.z.sum() * 0.0
    group_term = _group_terms(batch, config.tau, gamma).mean() if config.alpha > 0 else zero
    global_term = supcon_all(batch, config.tau) if config.beta > 0 else zero
    return config.alpha * group_term + config.beta * global_term


def total_loss(logits, labels, batch: ContrastiveBatch, gamma, config: LossConfig) -> torch.Tensor:
    logits = _tensor(logits)
    labels = _tensor(labels, torch.long)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0] or logits.shape[0] != len(batch):
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs labels {tuple(labels.shape)} "
                            f"and a batch of {len(batch)}")
    if labels.numel() and int(labels.max()) >= logits.shape[1]:
        raise ShapeMismatch(f"label {int(labels.max())} outside {logits.shape[1]} logits")
    out = config.ce_weight * F.cross_entropy(logits, labels) if config.ce_weight > 0 else logits.sum() * 0.0
    if config.contrastive:
        out = out + group_loss(batch, gamma, config)
    return out
