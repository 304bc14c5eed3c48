"""Frozen trunk, per-task adapter blocks, and the classification heads.

The trunk is split in two frozen halves, ``hidden`` and ``project``. A task's
adapter block is a FiLM pair ``(scale, shift)`` applied between them::

    pretrained_features(x) = project(hidden(x))
    encode(x, P)           = normalize(project(hidden(x) * (1 + P[0]) + P[1]))

so an all-zero block reproduces the pretrained features exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import NoTasksTrained, ShapeMismatch, TaskOutOfRange
from .taxonomy import LabelRegistry

DTYPE = torch.float64


def as_input(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def state_checksum(tensors) -> str:
    """sha256 over the raw bytes of a name -> tensor mapping."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        h.update(name.encode())
        h.update(tensors[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class Trunk(nn.Module):
    """Frozen feature extractor with a modulation point between two halves."""

    in_dim: int
    hidden_dim: int
    feature_dim: int

    def hidden(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def project(self, h: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def check(self, x: torch.Tensor):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatch(f"trunk expects (n, {self.in_dim}) inputs, got {tuple(x.shape)}")

    def checksum(self) -> str:
        return state_checksum(self.state_dict())

    def config(self) -> dict:
        raise NotImplementedError


class MLPTrunk(Trunk):
    """Small random ReLU network standing in for a pretrained backbone."""

    def __init__(self, in_dim: int, hidden_dim: int = 64, feature_dim: int = 16, seed: int = 0):
        super().__init__()
        self.in_dim, self.hidden_dim, self.feature_dim, self.seed = in_dim, hidden_dim, feature_dim, seed
        gen = torch.Generator().manual_seed(seed)
        self.fc1 = nn.Linear(in_dim, hidden_dim).to(DTYPE)
        self.fc2 = nn.Linear(hidden_dim, feature_dim).to(DTYPE)
        with torch.no_grad():
            for layer in (self.fc1, self.fc2):
                bound = 1.0 / np.sqrt(layer.in_features)
                layer.weight.copy_((torch.rand(layer.weight.shape, generator=gen, dtype=DTYPE) * 2 - 1)
                                   * bound * np.sqrt(3))
                layer.bias.copy_((torch.rand(layer.bias.shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound)
        freeze(self)

    def hidden(self, x):
        return F.relu(self.fc1(x))

    def project(self, h):
        return self.fc2(h)

    def fit_projection(self, x) -> MLPTrunk:
        """Label-free "pretraining": set the projection to the top principal axes of the hidden units."""
        with torch.no_grad():
            h = self.hidden(as_input(x)).numpy()
            mean = h.mean(axis=0)
            _, _, vt = np.linalg.svd(h - mean, full_matrices=False)
            w = vt[: self.feature_dim]
            if w.shape[0] < self.feature_dim:
                raise ValueError("need at least feature_dim pretraining rows")
            # fix the sign of each axis so the fit is reproducible
            w = w * np.sign(w[np.arange(len(w)), np.abs(w).argmax(axis=1)])[:, None]
            self.fc2.weight.copy_(torch.as_tensor(w))
            self.fc2.bias.copy_(torch.as_tensor(-w @ mean))
        return self

    def config(self) -> dict:
        return {"kind": "mlp", "in_dim": self.in_dim, "hidden_dim": self.hidden_dim,
                "feature_dim": self.feature_dim, "seed": self.seed}


class EmbeddingTrunk(Trunk):
    """Identity trunk for precomputed backbone embeddings."""

    def __init__(self, dim: int):
        super().__init__()
        self.in_dim = self.hidden_dim = self.feature_dim = dim

    def hidden(self, x):
        return x

    def project(self, h):
        return h

    def config(self) -> dict:
        return {"kind": "embedding", "in_dim": self.in_dim}


def build_trunk(cfg: dict) -> Trunk:
    if cfg["kind"] == "mlp":
        return MLPTrunk(cfg["in_dim"], cfg["hidden_dim"], cfg["feature_dim"], cfg["seed"])
    if cfg["kind"] == "embedding":
        return EmbeddingTrunk(cfg["in_dim"])
    raise ValueError(f"unknown trunk kind {cfg['kind']!r}")


class AdapterBank(nn.Module):
    """Per-task FiLM blocks ``P'_1..P'_T``; only the newest one trains."""

    def __init__(self, width: int, eta: float = 0.99):
        super().__init__()
        if not 0 < eta <= 1:
            raise ValueError("eta must lie in (0, 1]")
        self.width, self.eta = width, eta
        self.blocks = nn.ParameterList()

    @classmethod
    def from_blocks(cls, blocks, eta: float = 0.99) -> AdapterBank:
        blocks = [torch.as_tensor(b, dtype=DTYPE) for b in blocks]
        bank = cls(int(np.prod(blocks[0].shape)) if blocks else 0, eta)
        for b in blocks:
            bank.blocks.append(nn.Parameter(b.clone(), requires_grad=False))
        return bank

    def __len__(self):
        return len(self.blocks)

    def add_task(self) -> nn.Parameter:
        """Append a block initialised from the previous one (zeros for the first)."""
        for p in self.blocks:
            p.requires_grad_(False)
        init = self.blocks[-1].detach().clone() if len(self.blocks) else torch.zeros(2, self.width, dtype=DTYPE)
        block = nn.Parameter(init, requires_grad=True)
        self.blocks.append(block)
        return block

    def freeze_all(self):
        for p in self.blocks:
            p.requires_grad_(False)


def ensemble_prompt(bank: AdapterBank, t: int) -> torch.Tensor:
    """``eta * P'_t + (1 - eta) * sum_{i<t} P'_i``; ``P'_1`` itself for t = 1."""
    if not 1 <= t <= len(bank):
        raise TaskOutOfRange(f"task {t} outside 1..{len(bank)}")
    if t == 1:
        return bank.blocks[0]
    previous = torch.stack([bank.blocks[i] for i in range(t - 1)]).sum(dim=0)
    return bank.eta * bank.blocks[t - 1] + (1 - bank.eta) * previous


class GrowingLinear(nn.Module):
    """Linear layer whose output set grows by appending rows."""

    def __init__(self, in_dim: int, seed: int = 0):
        super().__init__()
        self.in_dim = in_dim
        self.seed = seed
        self.weight = nn.Parameter(torch.zeros(0, in_dim, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(0, dtype=DTYPE))

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def grow(self, n_new: int):
        gen = torch.Generator().manual_seed(self.seed * 7919 + self.out_dim)
        extra = torch.randn(n_new, self.in_dim, generator=gen, dtype=DTYPE) * 0.01
        self.weight = nn.Parameter(torch.cat([self.weight.detach(), extra]))
        self.bias = nn.Parameter(torch.cat([self.bias.detach(), torch.zeros(n_new, dtype=DTYPE)]))

    def forward(self, z):
        return F.linear(z, self.weight, self.bias)


class ContinualModel(nn.Module):
    """Trunk + adapter bank + main head + frozen probes + task-inference head."""

    def __init__(self, trunk: Trunk, eta: float = 0.99, logit_scale: float = 10.0, seed: int = 0):
        super().__init__()
        self.trunk = freeze(trunk)
        self.bank = AdapterBank(trunk.hidden_dim, eta)
        self.head = GrowingLinear(trunk.feature_dim, seed)
        self.task_head = GrowingLinear(trunk.feature_dim, seed + 1)
        self.probes = nn.ModuleDict()
        self.probe_classes: dict[int, list[int]] = {}
        self.logit_scale = logit_scale
        self.registry = LabelRegistry()
        # standardisation of pretrained features for the task head
        self.register_buffer("pre_mean", torch.zeros(trunk.feature_dim, dtype=DTYPE))
        self.register_buffer("pre_scale", torch.ones(trunk.feature_dim, dtype=DTYPE))

    @property
    def num_tasks(self) -> int:
        return len(self.bank)

    @property
    def feature_dim(self) -> int:
        return self.trunk.feature_dim

    def pretrained_features(self, x) -> torch.Tensor:
        x = as_input(x)
        self.trunk.check(x)
        with torch.no_grad():
            return self.trunk.project(self.trunk.hidden(x))

    def encode(self, x, prompt: torch.Tensor) -> torch.Tensor:
        x = as_input(x)
        self.trunk.check(x)
        h = self.trunk.hidden(x)
        h = h * (1 + prompt[0]) + prompt[1]
        return F.normalize(self.trunk.project(h), dim=1)

    def encode_task(self, x, t: int) -> torch.Tensor:
        return self.encode(x, ensemble_prompt(self.bank, t))

    def encode_by_task(self, x, tasks) -> torch.Tensor:
        """Encode each row with the prompt of its own (e.g. predicted) task."""
        x = as_input(x)
        tasks = np.asarray(tasks)
        out = torch.empty(x.shape[0], self.feature_dim, dtype=DTYPE)
        with torch.no_grad():
            for t in np.unique(tasks):
                rows = torch.as_tensor(np.flatnonzero(tasks == t))
                out[rows] = self.encode_task(x[rows], int(t))
        return out

    def logits(self, z: torch.Tensor) -> torch.Tensor:
        return self.logit_scale * self.head(z)

    def task_logits(self, pre: torch.Tensor) -> torch.Tensor:
        return self.task_head((pre - self.pre_mean) / self.pre_scale)

    def predict_task(self, x) -> np.ndarray:
        """Predicted 1-based task id per row, via the class-level task head."""
        if self.task_head.out_dim == 0:
            raise NoTasksTrained("no task has been finalized")
        with torch.no_grad():
            cls = self.task_logits(self.pretrained_features(x)).argmax(dim=1).numpy()
        return np.asarray(self.registry.tasks, dtype=np.int64)[cls]

    def probe_logits(self, t: int, z: torch.Tensor) -> torch.Tensor:
        return self.probes[str(t)](z)

    def add_probe(self, t: int, class_ids) -> nn.Linear:
        probe = nn.Linear(self.feature_dim, len(class_ids)).to(DTYPE)
        self.probes[str(t)] = probe
        self.probe_classes[t] = [int(c) for c in class_ids]
        return probe

    # --- persistence -----------------------------------------------------

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        torch.save({f"block_{i + 1}": b.detach().clone() for i, b in enumerate(self.bank.blocks)},
                   d / "adapters.pt")
        torch.save({"head": self.head.state_dict(), "task_head": self.task_head.state_dict(),
                    "probes": {k: v.state_dict() for k, v in self.probes.items()},
                    "pre_mean": self.pre_mean, "pre_scale": self.pre_scale}, d / "heads.pt")
        torch.save(self.trunk.state_dict(), d / "trunk.pt")
        meta = {"trunk": self.trunk.config(), "eta": self.bank.eta, "logit_scale": self.logit_scale,
                "head_seed": self.head.seed, "probe_classes": {str(k): v for k, v in self.probe_classes.items()},
                "trunk_checksum": self.trunk.checksum()}
        (d / "model.json").write_text(json.dumps(meta, indent=2))
        (d / "registry.json").write_text(json.dumps(self.registry.to_dict(), indent=2))

    @classmethod
    def load(cls, directory) -> ContinualModel:
        d = Path(directory)
        meta = json.loads((d / "model.json").read_text())
        trunk = build_trunk(meta["trunk"])
        trunk.load_state_dict(torch.load(d / "trunk.pt"))
        freeze(trunk)
        if trunk.checksum() != meta["trunk_checksum"]:
            raise ValueError(f"trunk checksum mismatch in {d}")
        model = cls(trunk, meta["eta"], meta["logit_scale"], meta["head_seed"])
        blocks = torch.load(d / "adapters.pt")
        for i in range(len(blocks)):
            model.bank.blocks.append(nn.Parameter(blocks[f"block_{i + 1}"], requires_grad=False))
        heads = torch.load(d / "heads.pt")
        for name in ("head", "task_head"):
            state = heads[name]
            layer = getattr(model, name)
            layer.weight = nn.Parameter(state["weight"])
            layer.bias = nn.Parameter(state["bias"])
        for t, classes in meta["probe_classes"].items():
            probe = model.add_probe(int(t), classes)
            probe.load_state_dict(heads["probes"][t])
            freeze(probe)
        model.pre_mean.copy_(heads["pre_mean"])
        model.pre_scale.copy_(heads["pre_scale"])
        model.registry = LabelRegistry.from_dict(json.loads((d / "registry.json").read_text()))
        return model

    def state_hash(self) -> str:
        tensors = {k: v for k, v in self.state_dict().items()}
        h = hashlib.sha256(state_checksum(tensors).encode())
        h.update(json.dumps(self.registry.to_dict(), sort_keys=True).encode())
        h.update(json.dumps(self.probe_classes, sort_keys=True).encode())
        return h.hexdigest()


# --- embedding files ------------------------------------------------------

_HEADER = struct.Struct("<qq")


def write_embeddings(path, features) -> None:
    """Row-major float32 preceded by two little-endian int64: n, d."""
    arr = np.ascontiguousarray(np.asarray(features, dtype=np.float32))
    if arr.ndim != 2:
        raise ShapeMismatch("embedding matrix must be 2-D")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(*arr.shape))
        fh.write(arr.tobytes())


def read_embeddings(path) -> np.ndarray:
    with open(path, "rb") as fh:
        n, d = _HEADER.unpack(fh.read(_HEADER.size))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != n * d:
        raise ShapeMismatch(f"{path}: header says {n}x{d}, payload has {data.size} values")
    return data.reshape(n, d).astype(np.float64)
