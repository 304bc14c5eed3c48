"""Datasets: the synthetic group benchmark plus image-folder and embedding-file loaders."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import read_embeddings
from .relation import gaussian_w2
from .taxonomy import TaxonomyTree, taxonomy_from_dict


@dataclass
class TaskSplit:
    """Train and test rows of one task, labels as class names."""

    task_id: int
    classes: list[str]
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    taxonomy: TaxonomyTree | None = None


@dataclass
class SyntheticGroupDataset:
    """Isotropic Gaussian classes arranged in groups.

    Class ``(g, c)`` has mean ``R * e_g + r * u_gc`` with all the ``e`` and
    ``u`` directions orthonormal (a random rotation of the input space), so
    two classes of one group sit ``r * sqrt(2)`` apart and classes of
    different groups ``sqrt(2 R^2 + 2 r^2)`` apart.
    """

    n_groups: int = 3
    classes_per_group: int = 4
    input_dim: int = 32
    group_radius: float = 3.0
    class_radius: float = 1.0
    noise: float = 0.5
    n_train: int = 100
    n_test: int = 100
    seed: int = 0
    means: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        need = self.n_groups * (1 + self.classes_per_group)
        if self.input_dim < need:
            raise ValueError(f"input_dim must be >= {need} for orthogonal group/class directions")
        rng = np.random.default_rng([self.seed, 0])
        basis, _ = np.linalg.qr(rng.standard_normal((self.input_dim, self.input_dim)))
        e = basis[:, : self.n_groups].T
        u = basis[:, self.n_groups: need].T.reshape(self.n_groups, self.classes_per_group, -1)
        self.means = (self.group_radius * e[:, None, :] + self.class_radius * u).reshape(self.num_classes, -1)

    @property
    def num_classes(self) -> int:
        return self.n_groups * self.classes_per_group

    @property
    def class_names(self) -> list[str]:
        return [f"g{g}_c{c}" for g in range(self.n_groups) for c in range(self.classes_per_group)]

    @property
    def group_names(self) -> list[str]:
        return [f"group_{g}" for g in range(self.n_groups)]

    def group_of(self, k: int) -> int:
        return k // self.classes_per_group

    def generator_w2(self, i: int, j: int) -> float:
        """Closed-form W2 between the generators of classes ``i`` and ``j`` (identity trunk)."""
        var = np.full(self.input_dim, self.noise ** 2)
        return gaussian_w2(self.means[i], var, self.means[j], var)

    def sample(self, k: int, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.means[k] + self.noise * rng.standard_normal((n, self.input_dim))

    def pretraining_sample(self, n_per_class: int, seed: int) -> np.ndarray:
        """Unlabelled draws from every generator, for fitting the frozen trunk."""
        rng = np.random.default_rng([seed, 9])
        return np.concatenate([self.sample(k, n_per_class, rng) for k in range(self.num_classes)])

    def taxonomy_for(self, class_ids) -> TaxonomyTree:
        doc: dict[str, list[str]] = {}
        for k in sorted(class_ids):
            doc.setdefault(self.group_names[self.group_of(k)], []).append(self.class_names[k])
        return taxonomy_from_dict({"synthetic": doc})

    def class_order(self, order_seed: int = 0, mode: str = "random") -> np.ndarray:
        """Arrival order of the classes.

        ``random`` is a plain permutation; ``by_group`` keeps each group's
        classes contiguous (groups in random order); ``interleaved`` deals one
        class of every group in turn.
        """
        rng = np.random.default_rng([order_seed, 1])
        if mode == "random":
            return rng.permutation(self.num_classes)
        table = np.arange(self.num_classes).reshape(self.n_groups, self.classes_per_group)
        table = np.stack([rng.permutation(row) for row in table])[rng.permutation(self.n_groups)]
        if mode == "by_group":
            return table.ravel()
        if mode == "interleaved":
            return table.T.ravel()
        raise ValueError(f"unknown split mode {mode!r}")

    def tasks(self, n_tasks: int = 3, order_seed: int = 0, mode: str = "random") -> list[TaskSplit]:
        """Split the classes into ``n_tasks`` equal tasks in a seeded order."""
        if self.num_classes % n_tasks:
            raise ValueError(f"{self.num_classes} classes do not split into {n_tasks} tasks")
        order = self.class_order(order_seed, mode)
        per = self.num_classes // n_tasks
        splits = []
        for t in range(n_tasks):
            ids = order[t * per:(t + 1) * per]
            rng = np.random.default_rng([self.seed, 2, t])
            xs, ys, xt, yt = [], [], [], []
            for k in ids:
                xs.append(self.sample(k, self.n_train, rng))
                xt.append(self.sample(k, self.n_test, rng))
                ys += [self.class_names[k]] * self.n_train
                yt += [self.class_names[k]] * self.n_test
            splits.append(TaskSplit(t + 1, [self.class_names[k] for k in ids], np.concatenate(xs),
                                    np.array(ys), np.concatenate(xt), np.array(yt), self.taxonomy_for(ids)))
        return splits


def _read_labels(path: Path) -> np.ndarray:
    return np.array([line.strip() for line in path.read_text().splitlines() if line.strip()])


def load_embedding_split(directory, split: str) -> tuple[np.ndarray, np.ndarray]:
    """``features/<split>.bin`` with one class name per row in ``<split>.labels``."""
    d = Path(directory)
    x = read_embeddings(d / f"{split}.bin")
    y = _read_labels(d / f"{split}.labels")
    if len(y) != len(x):
        raise ValueError(f"{split}: {len(x)} feature rows but {len(y)} labels")
    return x, y


def load_image_folder(root, size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """``root/<class>/<image>`` as flattened grayscale vectors in [0, 1]."""
    from PIL import Image

    xs, ys = [], []
    for class_dir in sorted(p for p in Path(root).iterdir() if p.is_dir()):
        for img in sorted(class_dir.iterdir()):
            if img.suffix.lower() not in {".png", ".jpg", ".jpeg", ".bmp", ".gif"}:
                continue
            with Image.open(img) as im:
                arr = np.asarray(im.convert("L").resize((size, size)), dtype=np.float64) / 255.0
            xs.append(arr.ravel())
            ys.append(class_dir.name)
    if not xs:
        raise ValueError(f"no images found under {root}")
    return np.stack(xs), np.array(ys)


def split_by_tasks(x, y, task_classes: list[list[str]], test_fraction: float = 0.2,
                   seed: int = 0) -> list[TaskSplit]:
    """Partition labelled rows into tasks and per-class train/test parts."""
    rng = np.random.default_rng([seed, 3])
    splits = []
    for t, classes in enumerate(task_classes, start=1):
        tr, te = [], []
        for c in classes:
            idx = rng.permutation(np.flatnonzero(y == c))
            if len(idx) == 0:
                raise ValueError(f"class {c!r} of task {t} has no rows")
            n_test = int(round(len(idx) * test_fraction))
            te.append(idx[:n_test])
            tr.append(idx[n_test:])
        tr, te = np.concatenate(tr), np.concatenate(te)
        splits.append(TaskSplit(t, list(classes), x[tr], y[tr], x[te], y[te]))
    return splits
