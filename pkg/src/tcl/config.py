"""Experiment configuration: TOML sections mapped onto frozen dataclasses.

Every key is optional except the ones the chosen dataset kind needs; unknown
keys are rejected so typos surface as a :class:`ValidationError` naming the
dotted path (``loss.alpha``, ``dataset.path`` ...).
"""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ValidationError
from .losses import LossConfig
from .trainer import TrainerConfig

SEED_ENV = "TCL_SEED"
DATASET_KINDS = ("synthetic", "embeddings", "images")
SPLIT_MODES = ("random", "by_group", "interleaved")


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    path: str | None = None
    n_groups: int = 3
    classes_per_group: int = 4
    input_dim: int = 32
    group_radius: float = 3.0
    class_radius: float = 1.0
    noise: float = 0.5
    n_train: int = 100
    n_test: int = 100
    image_size: int = 16
    test_fraction: float = 0.2


@dataclass(frozen=True)
class SplitConfig:
    n_tasks: int = 3
    order_seed: int = 0
    mode: str = "random"
    classes: tuple[tuple[str, ...], ...] = ()


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    feature_dim: int = 16
    eta: float = 0.99
    pretrain_per_class: int = 50


@dataclass(frozen=True)
class InferenceConfig:
    xi: float = 0.1
    delta: float | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    output_dir: str = "runs"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    taxonomy: tuple[str, ...] = ()
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    source: str | None = None

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.name

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> ExperimentConfig:
        """Dotted-key replacement: ``cfg.replace(**{"loss.alpha": 0.0, "name": "x"})``."""
        cfg = self
        for key, value in changes.items():
            cfg = _replace_path(cfg, key.split("."), value)
        return validate(cfg)


def _replace_path(obj, parts, value):
    if len(parts) == 1:
        if not hasattr(obj, parts[0]):
            raise ValidationError(parts[0], "unknown key")
        return dataclasses.replace(obj, **{parts[0]: value})
    child = getattr(obj, parts[0], None)
    if child is None or not dataclasses.is_dataclass(child):
        raise ValidationError(".".join(parts), "unknown section")
    return dataclasses.replace(obj, **{parts[0]: _replace_path(child, parts[1:], value)})


_SECTIONS = {"dataset": DatasetConfig, "split": SplitConfig, "model": ModelConfig, "loss": LossConfig,
             "trainer": TrainerConfig, "inference": InferenceConfig}
_TOP = {"name": str, "seed": int, "output_dir": str}


def _coerce(path: str, value, kind):
    if kind in ("float", float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    expected = {"int": int, "float": float, "bool": bool, "str": str}.get(kind, kind)
    if expected is int and isinstance(value, bool):
        raise ValidationError(path, f"expected an integer, got {value!r}")
    if isinstance(expected, type) and not isinstance(value, expected):
        raise ValidationError(path, f"expected {expected.__name__}, got {type(value).__name__}")
    return value


def _build_section(name: str, cls, table) -> object:
    if not isinstance(table, dict):
        raise ValidationError(name, "expected a table")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in table.items():
        path = f"{name}.{key}"
        if key not in fields:
            raise ValidationError(path, "unknown key")
        kind = fields[key].type
        if kind in ("str | None", "float | None"):
            kwargs[key] = None if value is None else _coerce(path, value, kind.split(" ")[0])
        elif key == "classes":
            if not isinstance(value, list) or not all(isinstance(r, list) for r in value):
                raise ValidationError(path, "expected a list of class-name lists")
            kwargs[key] = tuple(tuple(str(c) for c in row) for row in value)
        else:
            kwargs[key] = _coerce(path, value, kind)
    try:
        return cls(**kwargs)
    except ValidationError:
        raise
    except (ValueError, TypeError) as exc:
        raise ValidationError(name, str(exc)) from None


def config_from_dict(doc: dict, base_dir: Path | None = None, source: str | None = None) -> ExperimentConfig:
    kwargs = {}
    for key, value in doc.items():
        if key in _TOP:
            kwargs[key] = _coerce(key, value, _TOP[key])
        elif key in _SECTIONS:
            kwargs[key] = _build_section(key, _SECTIONS[key], value)
        elif key == "taxonomy":
            files = value.get("files", []) if isinstance(value, dict) else value
            if not isinstance(files, list) or not all(isinstance(f, str) for f in files):
                raise ValidationError("taxonomy.files", "expected a list of paths")
            if isinstance(value, dict) and set(value) - {"files"}:
                raise ValidationError(f"taxonomy.{sorted(set(value) - {'files'})[0]}", "unknown key")
            kwargs["taxonomy"] = tuple(_resolve(f, base_dir) for f in files)
        else:
            raise ValidationError(key, "unknown key")
    if "dataset" in kwargs and kwargs["dataset"].path is not None:
        kwargs["dataset"] = dataclasses.replace(kwargs["dataset"], path=_resolve(kwargs["dataset"].path, base_dir))
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            kwargs["seed"] = int(env_seed)
        except ValueError:
            raise ValidationError(SEED_ENV, f"not an integer: {env_seed!r}") from None
    seed = kwargs.get("seed", 0)
    trainer = kwargs.get("trainer", TrainerConfig())
    if "seed" not in doc.get("trainer", {}) or env_seed is not None:
        kwargs["trainer"] = dataclasses.replace(trainer, seed=seed)
    return validate(ExperimentConfig(source=source, **kwargs))


def _resolve(path: str, base_dir: Path | None) -> str:
    p = Path(path)
    if not p.is_absolute() and base_dir is not None:
        p = base_dir / p
    return str(p)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    ds, sp = cfg.dataset, cfg.split
    if ds.kind not in DATASET_KINDS:
        raise ValidationError("dataset.kind", f"must be one of {', '.join(DATASET_KINDS)}")
    if sp.mode not in SPLIT_MODES:
        raise ValidationError("split.mode", f"must be one of {', '.join(SPLIT_MODES)}")
    if sp.n_tasks < 1:
        raise ValidationError("split.n_tasks", "must be >= 1")
    if ds.kind == "synthetic":
        total = ds.n_groups * ds.classes_per_group
        if total % sp.n_tasks:
            raise ValidationError("split.n_tasks", f"{total} classes do not split into {sp.n_tasks} tasks")
        if ds.noise <= 0:
            raise ValidationError("dataset.noise", "must be positive")
        if ds.n_train < 2 or ds.n_test < 1:
            raise ValidationError("dataset.n_train", "need n_train >= 2 and n_test >= 1")
        if ds.input_dim < ds.n_groups * (1 + ds.classes_per_group):
            raise ValidationError("dataset.input_dim", "too small for orthogonal group/class directions")
    else:
        if not ds.path:
            raise ValidationError("dataset.path", f"required for dataset.kind = {ds.kind!r}")
        if not Path(ds.path).exists():
            raise ValidationError("dataset.path", f"{ds.path} does not exist")
        if not sp.classes:
            raise ValidationError("split.classes", "required for non-synthetic datasets")
        if len(sp.classes) != sp.n_tasks:
            raise ValidationError("split.classes", f"{len(sp.classes)} task lists for n_tasks = {sp.n_tasks}")
        if len(cfg.taxonomy) != sp.n_tasks:
            raise ValidationError("taxonomy.files", f"need one taxonomy file per task ({sp.n_tasks})")
    if cfg.taxonomy and len(cfg.taxonomy) != sp.n_tasks:
        raise ValidationError("taxonomy.files", f"{len(cfg.taxonomy)} files for {sp.n_tasks} tasks")
    for i, f in enumerate(cfg.taxonomy):
        if not Path(f).is_file():
            raise ValidationError(f"taxonomy.files[{i}]", f"{f} does not exist")
    if not 0 < cfg.model.eta <= 1:
        raise ValidationError("model.eta", "must lie in (0, 1]")
    if cfg.inference.xi < 0:
        raise ValidationError("inference.xi", "must be >= 0")
    if cfg.inference.delta is not None and cfg.inference.delta <= 0:
        raise ValidationError("inference.delta", "must be positive")
    if not cfg.name or "/" in cfg.name:
        raise ValidationError("name", "must be a non-empty directory name")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(str(path), "config file not found")
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(str(path), f"invalid TOML: {exc}") from None
    return config_from_dict(doc, path.parent, str(path))
