"""Hierarchical label taxonomies and the class registry built from them.

A taxonomy document is JSON whose object values are either nested objects
(internal nodes) or arrays of class names (leaf groups)::

    {"Natural": {"Animals": {"Aquatic": ["trout", "shark"]}},
     "Man-Made": {"Tools": ["lawn_mower"]}}

Only the leaf groups matter for training and inference; a group is
identified by its slash-joined path, e.g. ``"Natural/Animals/Aquatic"``.
"""

from __future__ import annotations

import json
import operator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from .errors import (
    DuplicateClass,
    EmptyLabelList,
    EmptyLeaf,
    GroupReassignment,
    MalformedDocument,
    UnknownClass,
)

PATH_SEP = "/"


@dataclass(frozen=True)
class TaxonomyNode:
    name: str
    children: tuple[TaxonomyNode, ...] = ()
    classes: tuple[str, ...] | None = None

    @property
    def is_leaf(self) -> bool:
        return self.classes is not None


@dataclass(frozen=True)
class LeafGroup:
    group_id: str
    classes: tuple[str, ...]
    class_ids: tuple[int, ...] = ()

    @property
    def name(self) -> str:
        return self.group_id.rsplit(PATH_SEP, 1)[-1]


@dataclass(frozen=True)
class TaxonomyTree:
    """Immutable taxonomy; the root is an unnamed node."""

    root: TaxonomyNode

    def leaf_groups(self) -> list[LeafGroup]:
        return leaf_groups(self)

    def classes(self) -> list[str]:
        return [c for g in leaf_groups(self) for c in g.classes]

    def group_id_of(self, class_name: str) -> str:
        for g in leaf_groups(self):
            if class_name in g.classes:
                return g.group_id
        raise UnknownClass(class_name)

    def to_dict(self) -> dict:
        return _node_to_dict(self.root)

    def dumps(self) -> str:
        return serialize_taxonomy(self)

    def __contains__(self, class_name: str) -> bool:
        return any(class_name in g.classes for g in leaf_groups(self))


def _node_to_dict(node: TaxonomyNode) -> dict:
    out = {}
    for child in node.children:
        out[child.name] = list(child.classes) if child.is_leaf else _node_to_dict(child)
    return out


def _reject_duplicate_keys(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise MalformedDocument(f"duplicate key {key!r}")
        out[key] = value
    return out


def _build_node(name: str, value, ancestors: tuple[str, ...], seen: dict[str, str]) -> TaxonomyNode:
    if not isinstance(name, str) or not name or PATH_SEP in name:
        raise MalformedDocument(f"invalid node name {name!r} under {PATH_SEP.join(ancestors) or '<root>'}")
    if name in ancestors:
        raise MalformedDocument(f"node name {name!r} repeats along path {PATH_SEP.join(ancestors)}")
    path = ancestors + (name,)
    if isinstance(value, dict):
        if not value:
            raise MalformedDocument(f"internal node {PATH_SEP.join(path)} has no children")
        children = tuple(_build_node(k, v, path, seen) for k, v in value.items())
        return TaxonomyNode(name, children=children)
    if isinstance(value, list):
        if not value:
            raise EmptyLeaf(PATH_SEP.join(path))
        group_id = PATH_SEP.join(path)
        for cls in value:
            if not isinstance(cls, str) or not cls:
                raise MalformedDocument(f"leaf {group_id} holds a non-string class {cls!r}")
            if cls in seen:
                raise DuplicateClass(f"{cls!r} appears in {seen[cls]} and {group_id}")
            seen[cls] = group_id
        return TaxonomyNode(name, classes=tuple(value))
    raise MalformedDocument(f"node {PATH_SEP.join(path)} must be an object or an array of strings")


def taxonomy_from_dict(doc: dict) -> TaxonomyTree:
    if not isinstance(doc, dict) or not doc:
        raise MalformedDocument("taxonomy document must be a non-empty JSON object")
    seen: dict[str, str] = {}
    children = tuple(_build_node(k, v, (), seen) for k, v in doc.items())
    return TaxonomyTree(TaxonomyNode("", children=children))


def parse_taxonomy(text: str | bytes | dict) -> TaxonomyTree:
    """Parse a taxonomy document (JSON text or an already-decoded dict)."""
    if isinstance(text, dict):
        # route through JSON so dict inputs obey the same rules as files
        text = json.dumps(text)
    try:
        doc = json.loads(text, object_pairs_hook=_reject_duplicate_keys)
    except json.JSONDecodeError as exc:
        raise MalformedDocument(str(exc)) from exc
    return taxonomy_from_dict(doc)


def load_taxonomy(path) -> TaxonomyTree:
    return parse_taxonomy(Path(path).read_text(encoding="utf-8"))


def serialize_taxonomy(tree: TaxonomyTree) -> str:
    """Canonical form: insertion-ordered keys, 2-space indent."""
    return json.dumps(tree.to_dict(), indent=2, ensure_ascii=False) + "\n"


def save_taxonomy(tree: TaxonomyTree, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_taxonomy(tree), encoding="utf-8")


def leaf_groups(tree: TaxonomyTree) -> list[LeafGroup]:
    """All leaves in depth-first document order."""
    out: list[LeafGroup] = []

    def walk(node: TaxonomyNode, prefix: tuple[str, ...]):
        for child in node.children:
            path = prefix + (child.name,)
            if child.is_leaf:
                out.append(LeafGroup(PATH_SEP.join(path), child.classes))
            else:
                walk(child, path)

    walk(tree.root, ())
    return out


def merge_taxonomy(base: TaxonomyTree | None, incoming: TaxonomyTree, task_id: int | None = None,
                   registry: LabelRegistry | None = None) -> TaxonomyTree:
    """Union ``incoming`` into ``base``.

    Classes already in ``base`` must keep their leaf; new classes are
    appended to their leaf (created if needed). When ``registry`` is given,
    the new classes are registered under ``task_id``.
    """
    if base is None:
        merged = incoming
    else:
        where = {c: g.group_id for g in leaf_groups(base) for c in g.classes}
        doc = base.to_dict()
        for group in leaf_groups(incoming):
            path = group.group_id.split(PATH_SEP)
            for cls in group.classes:
                old = where.get(cls)
                if old is None:
                    _leaf_list(doc, path).append(cls)
                    where[cls] = group.group_id
                elif old != group.group_id:
                    raise GroupReassignment(f"{cls!r} moved from {old} to {group.group_id}")
        merged = taxonomy_from_dict(doc)
    if registry is not None:
        if task_id is None:
            raise ValueError("task_id is required when registering classes")
        registry.register(merged, task_id)
    return merged


def _leaf_list(doc: dict, path: list[str]) -> list:
    node = doc
    for i, name in enumerate(path):
        last = i == len(path) - 1
        if name not in node:
            node[name] = [] if last else {}
        node = node[name]
        if last and not isinstance(node, list):
            raise MalformedDocument(f"{PATH_SEP.join(path)} is an internal node in the base taxonomy")
        if not last and not isinstance(node, dict):
            raise MalformedDocument(f"{PATH_SEP.join(path[:i + 1])} is a leaf in the base taxonomy")
    return node


@dataclass
class LabelRegistry:
    """Dense, arrival-ordered class ids with their task and leaf group."""

    names: list[str] = field(default_factory=list)
    tasks: list[int] = field(default_factory=list)
    groups: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._index = {n: i for i, n in enumerate(self.names)}

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name) -> bool:
        return name in self._index

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def register(self, tree: TaxonomyTree, task_id: int) -> list[int]:
        """Append every class of ``tree`` not yet registered; return their ids."""
        if self.tasks and task_id < self.tasks[-1]:
            raise ValueError(f"task {task_id} registered after task {self.tasks[-1]}")
        new = []
        for group in leaf_groups(tree):
            for cls in group.classes:
                if cls in self._index:
                    if self.groups[self._index[cls]] != group.group_id:
                        raise GroupReassignment(
                            f"{cls!r} moved from {self.groups[self._index[cls]]} to {group.group_id}")
                    continue
                self._index[cls] = len(self.names)
                new.append(len(self.names))
                self.names.append(cls)
                self.tasks.append(task_id)
                self.groups.append(group.group_id)
        return new

    def id_of(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise UnknownClass(name) from None

    def name_of(self, class_id: int) -> str:
        self._check(class_id)
        return self.names[class_id]

    def task_of(self, class_id: int) -> int:
        self._check(class_id)
        return self.tasks[class_id]

    def group_id_of(self, class_id: int) -> str:
        self._check(class_id)
        return self.groups[class_id]

    def _check(self, class_id):
        try:
            idx = operator.index(class_id)
        except TypeError:
            raise UnknownClass(class_id) from None
        if not 0 <= idx < len(self.names):
            raise UnknownClass(class_id)

    def classes_of_task(self, task_id: int) -> list[int]:
        return [i for i, t in enumerate(self.tasks) if t == task_id]

    def task_ids(self) -> list[int]:
        return sorted(set(self.tasks))

    def leaf_groups(self) -> list[LeafGroup]:
        """Registered groups in order of first appearance, ids ascending."""
        members: dict[str, list[int]] = {}
        for cid, gid in enumerate(self.groups):
            members.setdefault(gid, []).append(cid)
        return [LeafGroup(gid, tuple(self.names[i] for i in ids), tuple(ids))
                for gid, ids in members.items()]

    def group_of(self, class_id: int) -> LeafGroup:
        gid = self.group_id_of(class_id)
        ids = tuple(i for i, g in enumerate(self.groups) if g == gid)
        return LeafGroup(gid, tuple(self.names[i] for i in ids), ids)

    def group_index(self) -> tuple[list[str], list[int]]:
        """(group ids, group position of every class) for vectorised lookups."""
        order: dict[str, int] = {}
        for gid in self.groups:
            order.setdefault(gid, len(order))
        return list(order), [order[g] for g in self.groups]

    def to_dict(self) -> dict:
        return {"classes": [{"id": i, "name": n, "task": t, "group": g}
                            for i, (n, t, g) in enumerate(zip(self.names, self.tasks, self.groups))]}

    @classmethod
    def from_dict(cls, doc: dict) -> LabelRegistry:
        rows = sorted(doc["classes"], key=lambda r: r["id"])
        return cls([r["name"] for r in rows], [int(r["task"]) for r in rows], [r["group"] for r in rows])

    def copy(self) -> LabelRegistry:
        return LabelRegistry(list(self.names), list(self.tasks), list(self.groups))


def group_of(registry: LabelRegistry, class_id) -> LeafGroup:
    """Leaf group of a registered class (by id or by name)."""
    if isinstance(class_id, str):
        class_id = registry.id_of(class_id)
    return registry.group_of(class_id)


_PROMPT_TEMPLATE = (
    "Given the label list: {labels}, provide me the taxonomy from this list, "
    "based on their origin, type, and shape, so that the image encoders can "
    "recognize their images."
)


def render_taxonomy_prompt(labels) -> str:
    labels = [str(x) for x in labels]
    if not labels:
        raise EmptyLabelList("at least one label is required")
    return _PROMPT_TEMPLATE.format(labels=str(labels))


class LLMClient(Protocol):
    def generate(self, prompt: str) -> str: ...


class FileBackedLLMClient:
    """Replays canned responses from a JSON file mapping prompt -> response.

    A ``"*"`` entry, when present, answers any prompt not listed.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._responses = json.loads(self.path.read_text(encoding="utf-8"))
        self.prompts: list[str] = []

    def generate(self, prompt: str) -> str:
        self.prompts.append(prompt)
        if prompt in self._responses:
            return self._responses[prompt]
        if "*" in self._responses:
            return self._responses["*"]
        raise KeyError(f"no canned response for prompt in {self.path}")


def extract_taxonomy(response: str) -> TaxonomyTree:
    """Pull the outermost ``{...}`` block out of a free-text LLM reply."""
    start, end = response.find("{"), response.rfind("}")
    if start < 0 or end <= start:
        raise MalformedDocument("no JSON object found in response")
    return parse_taxonomy(response[start:end + 1])


def request_taxonomy(client: LLMClient, labels) -> TaxonomyTree:
    return extract_taxonomy(client.generate(render_taxonomy_prompt(labels)))
