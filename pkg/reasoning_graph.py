"""
Reasoning-process graph.

A tree of thought nodes whose ids are partitioned into an ordered ``present``
set (pending classification or expansion) and a ``history`` set (retired).
All membership changes go through ``apply_label`` and ``add_children``.
"""

import copy
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Dict, FrozenSet, List, Optional, Tuple

import networkx as nx
import numpy as np

from errors import (
    IllegalExpansion,
    InvalidTask,
    RootBacktrack,
    ShapeError,
    StaleNode,
    UnknownNode,
)

logger = logging.getLogger(__name__)

GRAPH_FORMAT_VERSION = 1


class Label(IntEnum):
    STOP = 1
    CONTINUE = 2
    FINAL = 3
    BACKTRACK = 4


@dataclass
class ThoughtNode:
    """A single thought; ``feature`` is set when the node is classified."""
    id: str
    text: str
    label: Optional[Label] = None
    feature: Optional[np.ndarray] = None
    parent: Optional[str] = None
    step_created: int = 0
    eval_score: Optional[int] = None


@dataclass(frozen=True)
class AncestorSubgraph:
    node_ids: FrozenSet[str]
    edge_ids: FrozenSet[Tuple[str, str]]
    focus: str


@dataclass(frozen=True)
class MembershipEffect:
    node: str
    label: Label
    retired: bool = False
    restored: Optional[str] = None
    final: bool = False


@dataclass(frozen=True)
class TerminationState:
    kind: str  # 'continue', 'final_found' or 'all_stopped'
    node: Optional[str] = None

    @property
    def is_continue(self) -> bool:
        return self.kind == CONTINUE

    @property
    def is_final(self) -> bool:
        return self.kind == FINAL_FOUND


CONTINUE = "continue"
FINAL_FOUND = "final_found"
ALL_STOPPED = "all_stopped"


@dataclass
class ReasoningGraph:
    nodes: Dict[str, ThoughtNode] = field(default_factory=dict)
    edges: List[Tuple[str, str]] = field(default_factory=list)
    present: Dict[str, None] = field(default_factory=dict)  # insertion-ordered set
    history: Dict[str, None] = field(default_factory=dict)
    step: int = 1
    root: Optional[str] = None
    next_index: int = 0

    def node(self, node_id: str) -> ThoughtNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(f"Unknown node id: {node_id}")

    def children(self, node_id: str) -> List[str]:
        return [w for u, w in self.edges if u == node_id]

    def new_id(self) -> str:
        node_id = f"n{self.next_index}"
        self.next_index += 1
        return node_id

    def path_to(self, node_id: str) -> List[str]:
        """Ids from the root down to ``node_id``."""
        path = []
        current: Optional[str] = node_id
        while current is not None:
            path.append(current)
            current = self.node(current).parent
        return path[::-1]

    def replace_text(self, node_id: str, text: str) -> None:
        """Overwrite a pending node's thought in place; label and feature are cleared."""
        if node_id not in self.present:
            raise StaleNode(f"Only present nodes can be regenerated: {node_id}")
        node = self.node(node_id)
        node.text = text
        node.label = None
        node.feature = None
        node.eval_score = None

    def set_feature(self, node_id: str, feature: np.ndarray) -> None:
        feature = np.asarray(feature, dtype=float)
        if feature.ndim != 1:
            raise ShapeError(f"Feature for {node_id} must be a vector, got shape {feature.shape}")
        self.node(node_id).feature = feature

    def feature_matrix(self, order: List[str]) -> np.ndarray:
        rows = []
        for node_id in order:
            feature = self.node(node_id).feature
            if feature is None:
                raise ShapeError(f"Node {node_id} has no feature yet")
            rows.append(feature)
        return np.vstack(rows)

    def snapshot(self) -> "ReasoningGraph":
        return copy.deepcopy(self)

    def validate(self) -> None:
        """Raise ValueError when a structural invariant is broken."""
        ids = set(self.nodes)
        present, history = set(self.present), set(self.history)
        if present & history:
            raise ValueError(f"present and history overlap: {sorted(present & history)}")
        if present | history != ids:
            raise ValueError("present and history do not cover every node")
        roots = [n.id for n in self.nodes.values() if n.parent is None]
        if len(roots) != 1:
            raise ValueError(f"Expected exactly one root, found {len(roots)}")
        digraph = to_networkx(self)
        if not nx.is_directed_acyclic_graph(digraph):
            raise ValueError("Edges contain a cycle")
        if any(d > 1 for _, d in digraph.in_degree()):
            raise ValueError("A node has more than one parent")
        for u, w in self.edges:
            if u not in ids or w not in ids or self.nodes[w].parent != u:
                raise ValueError(f"Dangling or inconsistent edge {u}->{w}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": GRAPH_FORMAT_VERSION,
            "step": self.step,
            "nodes": [
                {
                    "id": n.id,
                    "text": n.text,
                    "label": int(n.label) if n.label is not None else None,
                    "parent": n.parent,
                    "step_created": n.step_created,
                    "eval_score": n.eval_score,
                    "feature": n.feature.tolist() if n.feature is not None else None,
                }
                for n in self.nodes.values()
            ],
            "edges": [[u, w] for u, w in self.edges],
            "present": list(self.present),
            "history": list(self.history),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ReasoningGraph":
        if data.get("version") != GRAPH_FORMAT_VERSION:
            raise ValueError(f"Unsupported graph format version: {data.get('version')}")
        graph = cls(step=data["step"])
        for raw in data["nodes"]:
            feature = raw.get("feature")
            graph.nodes[raw["id"]] = ThoughtNode(
                id=raw["id"],
                text=raw["text"],
                label=Label(raw["label"]) if raw.get("label") is not None else None,
                feature=np.array(feature, dtype=float) if feature is not None else None,
                parent=raw.get("parent"),
                step_created=raw.get("step_created", 0),
                eval_score=raw.get("eval_score"),
            )
            if raw.get("parent") is None:
                graph.root = raw["id"]
        graph.edges = [(u, w) for u, w in data["edges"]]
        graph.present = dict.fromkeys(data["present"])
        graph.history = dict.fromkeys(data["history"])
        graph.next_index = len(graph.nodes)
        return graph

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ReasoningGraph":
        return cls.from_dict(json.loads(text))


def new_graph(task_description: str) -> ReasoningGraph:
    """Create the first-step graph holding only the task description."""
    if not task_description or not task_description.strip():
        raise InvalidTask("Task description must be nonempty")
    graph = ReasoningGraph()
    root_id = graph.new_id()
    graph.nodes[root_id] = ThoughtNode(id=root_id, text=task_description, step_created=1)
    graph.present[root_id] = None
    graph.root = root_id
    return graph


def ancestor_subgraph(g: ReasoningGraph, v: str, beta: int = 2) -> AncestorSubgraph:
    """Nodes with a directed path to ``v`` shorter than ``beta`` (``v`` included) and their induced edges."""
    if beta < 1:
        raise ValueError(f"beta must be positive, got {beta}")
    g.node(v)
    incoming: Dict[str, List[str]] = {}
    for u, w in g.edges:
        incoming.setdefault(w, []).append(u)
    depth = {v: 0}
    queue = deque([v])
    while queue:
        current = queue.popleft()
        if depth[current] + 1 >= beta:
            continue
        for u in incoming.get(current, []):
            if u not in depth:
                depth[u] = depth[current] + 1
                queue.append(u)
    node_ids = frozenset(depth)
    edge_ids = frozenset((u, w) for u, w in g.edges if u in node_ids and w in node_ids)
    return AncestorSubgraph(node_ids=node_ids, edge_ids=edge_ids, focus=v)


def ordered_chain(sub: AncestorSubgraph, g: ReasoningGraph) -> List[str]:
    """Subgraph ids ordered root-ward to the focus node."""
    return [node_id for node_id in g.path_to(sub.focus) if node_id in sub.node_ids]


def apply_label(g: ReasoningGraph, v: str, label: Label) -> MembershipEffect:
    """Record a classification and perform its membership move."""
    node = g.node(v)
    label = Label(label)
    if node.label == Label.FINAL:
        if label == Label.FINAL:
            return MembershipEffect(node=v, label=label, final=True)
        raise StaleNode(f"Node {v} is Final and cannot be relabeled")
    if v not in g.present:
        raise StaleNode(f"Node {v} is in history and cannot be relabeled")

    if label == Label.BACKTRACK:
        if node.parent is None:
            raise RootBacktrack(f"Backtrack requested on root {v}")
        node.label = label
        del g.present[v]
        g.history[v] = None
        parent = node.parent
        g.history.pop(parent, None)
        g.present[parent] = None
        logger.debug(f"Backtrack from {v} restored {parent} to present")
        return MembershipEffect(node=v, label=label, retired=True, restored=parent)

    node.label = label
    if label == Label.STOP:
        del g.present[v]
        g.history[v] = None
        return MembershipEffect(node=v, label=label, retired=True)
    if label == Label.FINAL:
        return MembershipEffect(node=v, label=label, final=True)
    return MembershipEffect(node=v, label=label)


def add_children(g: ReasoningGraph, parent: str, texts: List[str]) -> List[str]:
    """Attach one child per text to a Continue node and retire the parent."""
    node = g.node(parent)
    if node.label != Label.CONTINUE or parent not in g.present:
        raise IllegalExpansion(f"Node {parent} is not a pending Continue node (label={node.label})")
    if not texts:
        raise IllegalExpansion(f"No thoughts to attach under {parent}")
    child_ids = []
    for text in texts:
        child_id = g.new_id()
        g.nodes[child_id] = ThoughtNode(id=child_id, text=text, parent=parent, step_created=g.step)
        g.edges.append((parent, child_id))
        g.present[child_id] = None
        child_ids.append(child_id)
    del g.present[parent]
    g.history[parent] = None
    return child_ids


def termination_state(g: ReasoningGraph) -> TerminationState:
    for node in g.nodes.values():
        if node.label == Label.FINAL:
            return TerminationState(FINAL_FOUND, node.id)
    if not g.present or all(g.nodes[v].label == Label.STOP for v in g.present):
        return TerminationState(ALL_STOPPED)
    return TerminationState(CONTINUE)


def to_networkx(g: ReasoningGraph) -> nx.DiGraph:
    """Export as a DiGraph with text, label, step and membership attributes."""
    digraph = nx.DiGraph()
    for node in g.nodes.values():
        digraph.add_node(
            node.id,
            text=node.text,
            label=int(node.label) if node.label is not None else None,
            step_created=node.step_created,
            membership="present" if node.id in g.present else "history",
        )
    digraph.add_edges_from(g.edges)
    return digraph
