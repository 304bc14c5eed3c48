"""Task-by-task training: probe, replay, optimise, finalize."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DataRevokedError, DivergedLoss, EmptyClass, MissingMemory
from .losses import ContrastiveBatch, LossConfig, total_loss
from .memory import (ClassGaussianMixture, MemoryStore, fit_class_gmm, sample_pseudo_features,
                     save_memories)
from .model import DTYPE, ContinualModel, Trunk, as_input, freeze
from .relation import RelationMatrices, expand_matrix, save_relation
from .taxonomy import TaxonomyTree, merge_taxonomy, save_taxonomy


@dataclass(frozen=True)
class TrainerConfig:
    lr: float = 1e-2
    batch_size: int = 24
    epochs: int = 10
    n_pseudo_per_class: int = 4
    gmm_components: int = 1
    probe_steps: int = 200
    task_head_steps: int = 300
    head_lr: float = 5e-2
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2 or self.epochs < 1 or self.n_pseudo_per_class < 1:
            raise ValueError("batch_size >= 2, epochs >= 1 and n_pseudo_per_class >= 1 required")
        if not 1 <= self.gmm_components <= 5:
            raise ValueError("gmm_components must lie in 1..5")


class TaskData:
    """Training split of one task; unreadable once revoked."""

    def __init__(self, task_id: int, x, labels):
        self.task_id = task_id
        self._x = np.asarray(x, dtype=np.float64)
        self._y = np.asarray(labels, dtype=np.int64)
        if self._x.ndim != 2 or self._y.shape != (len(self._x),):
            raise ValueError("x must be (n, D) with one label per row")
        self.revoked = False

    def _guard(self):
        if self.revoked:
            raise DataRevokedError(f"data of task {self.task_id} was released after finalization")

    @property
    def x(self) -> np.ndarray:
        self._guard()
        return self._x

    @property
    def y(self) -> np.ndarray:
        self._guard()
        return self._y

    def __len__(self):
        return len(self._y)

    def revoke(self):
        self._x = self._y = None
        self.revoked = True


@dataclass(frozen=True, eq=False)
class TaskState:
    task_id: int
    class_ids: tuple[int, ...]
    config: TrainerConfig
    data: TaskData | None = None
    pretrained_gmms: dict = field(default_factory=dict)
    adapted_gmms: dict = field(default_factory=dict)
    relation: RelationMatrices | None = None
    probe: nn.Module | None = None
    loss_history: tuple[float, ...] = ()
    finalized: bool = False
    model_hash: str = ""


def _rng(seed: int, t: int, stage: int) -> np.random.Generator:
    return np.random.default_rng([seed, t, stage])


class ContinualLearner:
    """Everything that persists across tasks: model, memories, relation, taxonomy."""

    def __init__(self, trunk: Trunk, loss: LossConfig | None = None, trainer: TrainerConfig | None = None,
                 eta: float = 0.99, delta: float | None = None, seed: int = 0):
        self.model = ContinualModel(trunk, eta=eta, seed=seed)
        self.loss = loss or LossConfig()
        self.config = trainer or TrainerConfig(seed=seed)
        self.seed = seed
        self.taxonomy: TaxonomyTree | None = None
        self.pretrained = MemoryStore("pretrained")
        self.adapted = MemoryStore("adapted")
        self.relation = RelationMatrices(delta_override=delta)
        self.states: dict[int, TaskState] = {}
        self._probed: set[int] = set()

    @property
    def registry(self):
        return self.model.registry

    @property
    def num_tasks(self) -> int:
        return self.model.num_tasks

    def begin_task(self, t: int, taxonomy: TaxonomyTree) -> list[int]:
        """Merge the task's taxonomy, register its classes and grow the model."""
        if t != self.num_tasks + 1:
            raise ValueError(f"expected task {self.num_tasks + 1}, got {t}")
        self.taxonomy = merge_taxonomy(self.taxonomy, taxonomy, t, self.registry)
        new = self.registry.classes_of_task(t)
        if not new:
            raise ValueError(f"task {t} introduces no new classes")
        self.model.head.grow(len(new))
        self.model.bank.add_task()
        return new

    def gamma(self) -> np.ndarray:
        return self.relation.gamma_for(range(self.registry.num_classes))


def probe_pretrained_behavior(learner: ContinualLearner, t: int, data: TaskData) -> dict[int, ClassGaussianMixture]:
    """One pass through the frozen trunk: fit pretrained-space memories, grow M."""
    classes = learner.registry.classes_of_task(t)
    if not classes:
        raise ValueError(f"taxonomy for task {t} has not been merged")
    stray = set(np.unique(data.y).tolist()) - set(classes)
    if stray:
        raise ValueError(f"labels {sorted(stray)} do not belong to task {t}")
    feats = learner.model.pretrained_features(data.x).numpy()
    gmms = {}
    for c in classes:
        rows = feats[data.y == c]
        if len(rows) == 0:
            raise EmptyClass(f"class {learner.registry.name_of(c)!r} of task {t} has no samples")
        K = min(learner.config.gmm_components, len(rows))
        gmms[c] = fit_class_gmm(rows, K, seed=learner.seed * 1000 + c, class_id=c, space_tag="pretrained")
    if t not in learner._probed:
        for g in gmms.values():
            learner.pretrained.add(g)
        learner.relation = expand_matrix(learner.relation, [gmms[c] for c in classes])
        learner._probed.add(t)
    return gmms


def build_replay_batch(learner: ContinualLearner, t: int, x_real, y_real, n_pseudo_per_class: int,
                       seed) -> tuple[ContrastiveBatch, torch.Tensor]:
    """Real rows encoded with the current prompt plus pseudo rows of every old class."""
    model, registry = learner.model, learner.registry
    z_real = model.encode_task(x_real, t)
    y_real = torch.as_tensor(np.asarray(y_real), dtype=torch.long)
    old = [c for c in range(registry.num_classes) if registry.task_of(c) < t]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z_parts, y_parts = [z_real], [y_real]
    for c in old:
        if c not in learner.adapted:
            raise MissingMemory(f"no adapted-space memory for class {c}")
        fb = sample_pseudo_features(learner.adapted[c], n_pseudo_per_class, rng)
        z_parts.append(torch.as_tensor(fb.features, dtype=DTYPE))
        y_parts.append(torch.as_tensor(fb.labels))
    z = torch.cat(z_parts)
    labels = torch.cat(y_parts)
    _, group_pos = registry.group_index()
    groups = torch.as_tensor(group_pos)[labels]
    is_new = torch.zeros(len(labels), dtype=torch.bool)
    is_new[: len(y_real)] = True
    return ContrastiveBatch(z, labels, groups, is_new), labels


def stratified_batches(y: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches holding several rows of each class, so every anchor has a positive."""
    classes = np.unique(y)
    per = max(2, batch_size // len(classes))
    chunks = []
    for c in classes:
        idx = rng.permutation(np.flatnonzero(y == c))
        chunks.append([idx[i:i + per] for i in range(0, len(idx), per)])
    n_batches = max(len(ch) for ch in chunks)
    batches = []
    for b in range(n_batches):
        parts = [ch[b] for ch in chunks if b < len(ch) and len(ch[b]) >= 2]
        if parts:
            batches.append(np.concatenate(parts))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def train_task(learner: ContinualLearner, t: int, data: TaskData, config: TrainerConfig | None = None,
               loss: LossConfig | None = None) -> TaskState:
    """Optimise the current adapter block and the main head on the total loss."""
    config = config or learner.config
    loss = loss or learner.loss
    if t not in learner._probed:
        raise RuntimeError(f"probe_pretrained_behavior must run before training task {t}")
    model = learner.model
    block = model.bank.blocks[t - 1]
    if not block.requires_grad:
        raise RuntimeError(f"adapter block of task {t} is frozen")
    torch.manual_seed(config.seed * 7919 + t)
    opt = torch.optim.Adam([block, model.head.weight, model.head.bias], lr=config.lr)
    gamma = torch.as_tensor(learner.gamma()) if loss.weighted else None
    rng = _rng(config.seed, t, 1)
    x, y = data.x, data.y
    history = []
    for epoch in range(config.epochs):
        losses = []
        for step, idx in enumerate(stratified_batches(y, config.batch_size, rng)):
            batch, labels = build_replay_batch(learner, t, x[idx], y[idx], config.n_pseudo_per_class, rng)
            value = total_loss(model.logits(batch.z), labels, batch, gamma, loss)
            if not torch.isfinite(value):
                raise DivergedLoss(f"task {t}, epoch {epoch}, step {step}: loss is {value.item()}")
            opt.zero_grad()
            value.backward()
            opt.step()
            losses.append(value.item())
        history.append(float(np.mean(losses)))
    classes = tuple(learner.registry.classes_of_task(t))
    state = TaskState(t, classes, config, data, loss_history=tuple(history),
                      pretrained_gmms={c: learner.pretrained[c] for c in classes}, relation=learner.relation)
    learner.states[t] = state
    return state


def _fit_linear(layer: nn.Linear, features: torch.Tensor, targets: torch.Tensor, steps: int, lr: float):
    opt = torch.optim.Adam(layer.parameters(), lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        F.cross_entropy(layer(features), targets).backward()
        opt.step()


def _train_task_head(learner: ContinualLearner, t: int, x: np.ndarray, y: np.ndarray):
    """Class-level head over standardised pretrained features, old classes replayed."""
    model = learner.model
    pre = model.pretrained_features(x)
    if t == 1:
        model.pre_mean.copy_(pre.mean(dim=0))
        model.pre_scale.copy_(pre.std(dim=0).clamp_min(1e-6))
    rng = _rng(learner.config.seed, t, 3)
    per_class = max(1, int(np.ceil(len(y) / len(np.unique(y)))))
    feats, labels = [pre], [torch.as_tensor(y)]
    for c in range(learner.registry.num_classes):
        if learner.registry.task_of(c) < t:
            fb = sample_pseudo_features(learner.pretrained[c], per_class, rng)
            feats.append(torch.as_tensor(fb.features))
            labels.append(torch.as_tensor(fb.labels))
    feats = (torch.cat(feats) - model.pre_mean) / model.pre_scale
    model.task_head.grow(len(learner.registry.classes_of_task(t)))
    head = model.task_head
    opt = torch.optim.Adam([head.weight, head.bias], lr=learner.config.head_lr)
    targets = torch.cat(labels)
    for _ in range(learner.config.task_head_steps):
        opt.zero_grad()
        F.cross_entropy(head(feats), targets).backward()
        opt.step()
    head.weight.requires_grad_(False)
    head.bias.requires_grad_(False)


def finalize_task(learner: ContinualLearner, state: TaskState, run_dir=None) -> TaskState:
    """Fit adapted memories, train and freeze s_t and the task head, release the data."""
    if state.finalized:
        return state
    t, data, model = state.task_id, state.data, learner.model
    x, y = data.x, data.y
    model.bank.freeze_all()
    with torch.no_grad():
        z = model.encode_task(x, t)
    adapted = {}
    for c in state.class_ids:
        rows = z[torch.as_tensor(y == c)].numpy()
        K = min(learner.config.gmm_components, len(rows))
        adapted[c] = fit_class_gmm(rows, K, seed=learner.seed * 1000 + c, class_id=c, space_tag="adapted")
        learner.adapted.add(adapted[c])

    torch.manual_seed(learner.config.seed * 7919 + t + 1)
    probe = model.add_probe(t, state.class_ids)
    local = {c: i for i, c in enumerate(state.class_ids)}
    _fit_linear(probe, z, torch.as_tensor([local[int(c)] for c in y]), learner.config.probe_steps,
                learner.config.head_lr)
    freeze(probe)
    _train_task_head(learner, t, x, y)
    model.head.weight.requires_grad_(False)
    model.head.bias.requires_grad_(False)
    data.revoke()

    final = dataclasses.replace(state, adapted_gmms=adapted, probe=probe, finalized=True,
                                relation=learner.relation, model_hash=model.state_hash())
    learner.states[t] = final
    if run_dir is not None:
        save_checkpoint(learner, run_dir, t)
    return final


def save_checkpoint(learner: ContinualLearner, run_dir, t: int) -> None:
    run = Path(run_dir)
    learner.model.save(run / "model" / f"task_{t}")
    save_memories(run / "memory" / f"task_{t}.json",
                  {"pretrained": learner.pretrained, "adapted": learner.adapted}, t)
    save_relation(learner.relation, run / "relation" / f"task_{t}.json")
    save_taxonomy(learner.taxonomy, run / "taxonomy" / f"merged_task_{t}.json")
    state = learner.states[t]
    (run / "model" / f"task_{t}" / "state.json").write_text(json.dumps({
        "task": t, "classes": list(state.class_ids), "loss_history": list(state.loss_history),
        "model_hash": state.model_hash, "delta_override": learner.relation.delta_override}, indent=2))


def load_checkpoint(learner: ContinualLearner, run_dir, t: int) -> None:
    """Restore the learner to the end of task ``t`` (training data stays unavailable)."""
    from .memory import load_memories
    from .relation import load_relation
    from .taxonomy import load_taxonomy

    run = Path(run_dir)
    model = ContinualModel.load(run / "model" / f"task_{t}")
    learner.model = model
    stores = load_memories(run / "memory" / f"task_{t}.json")
    learner.pretrained, learner.adapted = stores["pretrained"], stores["adapted"]
    gmms = [learner.pretrained[c] for c in range(model.registry.num_classes)]
    learner.relation = load_relation(run / "relation" / f"task_{t}.json", gmms)
    learner.taxonomy = load_taxonomy(run / "taxonomy" / f"merged_task_{t}.json")
    learner._probed = set(range(1, t + 1))
    for i in range(1, t + 1):
        meta = json.loads((run / "model" / f"task_{i}" / "state.json").read_text())
        learner.states[i] = TaskState(i, tuple(meta["classes"]), learner.config,
                                      loss_history=tuple(meta["loss_history"]), finalized=True,
                                      model_hash=meta["model_hash"], relation=learner.relation,
                                      probe=model.probes[str(i)])


def run_task(learner: ContinualLearner, t: int, taxonomy: TaxonomyTree, x, labels, run_dir=None) -> TaskState:
    """begin -> probe -> train -> finalize for one task; ``labels`` are class names or ids."""
    learner.begin_task(t, taxonomy)
    labels = np.asarray(labels)
    if labels.dtype.kind in ("U", "S", "O"):
        labels = np.array([learner.registry.id_of(str(n)) for n in labels])
    data = TaskData(t, as_input(x).numpy(), labels)
    probe_pretrained_behavior(learner, t, data)
    state = train_task(learner, t, data)
    return finalize_task(learner, state, run_dir)
