"""A plain recursive MCTS over node records.

Implements the same selection, expansion and backup rules as
:mod:`mcts_decode.base.mcts` for a single root, one object per node.
It is slow and only meant to cross-check the arena implementation:
``nodes[i]`` corresponds to arena node ``i``.
"""
from __future__ import annotations

import math
import typing

import numpy as np

from mcts_decode.base.mcts import ADAPTIVE_RANGE_EPS, SearchConfig
from mcts_decode.base.mdp import DecodeState, Sequence
from mcts_decode.base.models import Model, apply_temperature, rollout_value
from mcts_decode.base.utils import ContractViolation

if typing.TYPE_CHECKING:
    from mcts_decode.base.scoring import Metric


class ReferenceNode:
    def __init__(self, model_state, prior, value, terminal, parent=None, depth=0):
        self.model_state = model_state
        self.prior = prior
        self.tokens = np.argsort(-prior, kind="stable")
        self.value = float(value)
        self.raw_value = float(value)
        self.visits = 1
        self.terminal = bool(terminal)
        self.parent = parent
        self.depth = depth
        self.children: dict[int, ReferenceNode] = {}


class ReferenceSearch:
    """Single-tree search, one simulation per :meth:`simulate_once` call."""

    def __init__(
        self,
        model: Model,
        root_state: DecodeState,
        cfg: SearchConfig,
        *,
        metric: Metric | None = None,
        reference: Sequence | None = None,
    ):
        if root_state.terminal:
            raise ContractViolation("search needs a non-terminal root state")
        self.model = model
        self.cfg = cfg
        self.metric = metric
        self.reference = reference
        priors, values, model_states = model.evaluate_root([root_state])
        value = self._value(model_states[0], values[0])
        self.adaptive_min = value
        self.adaptive_max = value + ADAPTIVE_RANGE_EPS
        self.nodes = [self._make_node(model_states[0], priors[0], value, False)]

    @property
    def root(self) -> ReferenceNode:
        return self.nodes[0]

    def _value(self, model_state, value):
        if self.cfg.value_source == "rollout":
            return rollout_value(
                self.model.decode_state(model_state), self.model, self.metric, self.reference,
            )
        return float(value)

    def _make_node(self, model_state, prior, value, terminal, parent=None):
        tempered = apply_temperature(prior, self.cfg.tau)
        depth = 0 if parent is None else parent.depth + 1
        return ReferenceNode(model_state, tempered, value, terminal, parent, depth)

    def _score(self, node: ReferenceNode, j: int) -> float:
        token = node.tokens[j]
        child = node.children.get(j)
        visits = 0 if child is None else child.visits
        policy = math.sqrt(node.visits) * self.cfg.c_puct * node.prior[token] / (visits + 1)
        if visits == 0:
            return 0.0 + policy
        rescaled = (child.value - self.adaptive_min) / (self.adaptive_max - self.adaptive_min)
        return rescaled + policy

    def _exhausted(self, node: ReferenceNode) -> bool:
        if node.terminal:
            return True
        return len(node.children) == self.cfg.num_sparse_actions and all(
            self._exhausted(child) for child in node.children.values()
        )

    def _select(self, node: ReferenceNode) -> int:
        skip = {j for j, child in node.children.items() if self._exhausted(child)}
        if len(skip) == self.cfg.num_sparse_actions:
            skip = set()
        best_j = 0
        best = -math.inf
        for j in range(self.cfg.num_sparse_actions):
            if j in skip:
                continue
            score = self._score(node, j)
            if score > best:
                best = score
                best_j = j
        return best_j

    def simulate_once(self) -> ReferenceNode:
        """Select, expand and back up one leaf; returns the leaf.

        The leaf is a new node, or a terminal node met on the way down
        which is evaluated again and gets no child.
        """
        node = self.root
        while not node.terminal:
            j = self._select(node)
            if j not in node.children:
                break
            node = node.children[j]
        if node.terminal:
            self.model.evaluate_step([node.model_state], [self.model.eos_id])
            node.visits += 1
            self._backup(node, node.value)
            return node
        token = int(node.tokens[j])
        priors, values, next_states, terminal = self.model.evaluate_step(
            [node.model_state], [token],
        )
        value = self._value(next_states[0], values[0])
        child = self._make_node(next_states[0], priors[0], value, terminal[0], parent=node)
        node.children[j] = child
        self.nodes.append(child)
        self.adaptive_min = min(self.adaptive_min, value)
        self.adaptive_max = max(self.adaptive_max, value)
        self._backup(child, value)
        return child

    def _backup(self, leaf: ReferenceNode, leaf_value: float) -> None:
        node = leaf.parent
        while node is not None:
            if self.cfg.backup == "max":
                node.value = max(node.value, leaf_value)
            else:
                node.value = (node.value * node.visits + leaf_value) / (node.visits + 1.0)
            node.visits += 1
            node = node.parent

    def visit_counts(self) -> np.ndarray:
        return np.array([n.visits for n in self.nodes], dtype=np.int64)

    def values(self) -> np.ndarray:
        return np.array([n.value for n in self.nodes], dtype=np.float64)

    def parents(self) -> np.ndarray:
        index = {id(n): i for i, n in enumerate(self.nodes)}
        return np.array(
            [-1 if n.parent is None else index[id(n.parent)] for n in self.nodes],
            dtype=np.int64,
        )
