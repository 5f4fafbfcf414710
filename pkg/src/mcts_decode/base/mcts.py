"""Batched Monte-Carlo tree search over flat arrays.

All trees of a batch live in a :class:`TreeArena`: per (batch element,
node) arrays for node statistics and per (batch element, node, sparse
action) arrays for the edges. Node ``i`` of a batch element is the
``i``-th node created by the search of that element, node 0 being the
root. Every simulation runs the batch in lockstep through
:func:`simulate`, :func:`expand` and :func:`backward` and evaluates one
leaf per batch element. Terminal nodes are leaves: a simulation that
reaches one evaluates it again instead of growing the tree below it, so
a tree holds at most S + 1 distinct states. Selection skips subtrees that
already hold every state below them, so until the whole sparse tree is
built each simulation adds a new state.

Only the top-A tokens of each node's prior are kept as children (the
"sparse actions"); ``topk_mapping`` maps sparse indices back to token ids.
Sparse index 0 is the most likely token.

Selection uses the pUCT rule with values rescaled to [0, 1] by the running
minimum and maximum of all values seen in the tree of each batch element.
"""
from __future__ import annotations

import logging
import math
import time
import typing
from dataclasses import dataclass
from typing import Callable, Literal, NamedTuple

import numpy as np
import numpy.typing as npt

from mcts_decode.base.decoders import Candidate
from mcts_decode.base.mdp import DecodeState, Sequence
from mcts_decode.base.models import Model, apply_temperature, rollout_value
from mcts_decode.base.utils import ConfigurationError, ContractViolation, argmax_lowest

if typing.TYPE_CHECKING:
    from mcts_decode.base.scoring import Metric

log = logging.getLogger(__name__)

# added to the root value to get an initial, non-empty value range
ADAPTIVE_RANGE_EPS = 1e-6


@dataclass(frozen=True)
class SearchConfig:
    """Parameters of one search per decoding step.

    Parameters
    ----------
    num_simulations
        Simulations per search, S
    num_sparse_actions
        Children kept per node, A
    c_puct
        Exploration constant
    tau
        Temperature applied to the priors stored in the tree
    backup
        'average' averages leaf values into the ancestors, 'max' keeps the maximum
    root_selection
        'visit_count' or 'max_value'
    value_source
        'model' uses the value head, 'rollout' scores greedy rollouts
    """

    num_simulations: int
    num_sparse_actions: int
    c_puct: float = 1.0
    tau: float = 1.0
    backup: Literal["average", "max"] = "average"
    root_selection: Literal["visit_count", "max_value"] = "visit_count"
    value_source: Literal["model", "rollout"] = "model"

    def __post_init__(self):
        if self.num_simulations < 0:
            raise ConfigurationError(
                f"num_simulations must be >= 0, got {self.num_simulations}"
            )
        if self.num_sparse_actions < 1:
            raise ConfigurationError(
                f"num_sparse_actions must be >= 1, got {self.num_sparse_actions}"
            )
        if not self.c_puct > 0:
            raise ConfigurationError(f"c_puct must be positive, got {self.c_puct}")
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if self.backup not in ("average", "max"):
            raise ConfigurationError(f"unknown backup {self.backup}")
        if self.root_selection not in ("visit_count", "max_value"):
            raise ConfigurationError(f"unknown root selection {self.root_selection}")
        if self.value_source not in ("model", "rollout"):
            raise ConfigurationError(f"unknown value source {self.value_source}")


class TreeSnapshot(NamedTuple):
    """The tree of one batch element, indexed by node creation order.

    `tokens` and `edge_priors` describe the edge from the parent; both
    are -1 / 0 for the root.
    """

    parents: np.ndarray
    tokens: np.ndarray
    edge_priors: np.ndarray
    visit_counts: np.ndarray
    values: np.ndarray
    raw_values: np.ndarray
    depth: np.ndarray
    is_terminal: np.ndarray
    states: list[DecodeState]

    @property
    def num_nodes(self) -> int:
        return len(self.parents)


class TreeArena:
    """Storage for a batch of search trees of at most S + 1 nodes each.

    One arena belongs to one search at a time; :func:`search` resets it.
    """

    def __init__(self, batch_size: int, cfg: SearchConfig, vocab_size: int):
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        if cfg.num_sparse_actions > vocab_size:
            raise ConfigurationError(
                f"num_sparse_actions {cfg.num_sparse_actions} exceeds "
                f"vocabulary size {vocab_size}"
            )
        self.batch_size = batch_size
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.num_nodes = cfg.num_simulations + 1
        self.batch_range = np.arange(batch_size)

        batch_node = (batch_size, self.num_nodes)
        self.visit_counts = np.zeros(batch_node, dtype=np.int64)
        self.values = np.zeros(batch_node, dtype=np.float64)
        self.raw_values = np.zeros(batch_node, dtype=np.float64)
        self.parents = np.zeros(batch_node, dtype=np.int64)
        # sparse index of the edge leading to the node; -1 for the root
        self.action_from_parents = np.zeros(batch_node, dtype=np.int64)
        self.depth = np.zeros(batch_node, dtype=np.int64)
        self.is_terminal = np.zeros(batch_node, dtype=bool)
        # every state below the node is in the tree
        self.is_exhausted = np.zeros(batch_node, dtype=bool)

        batch_node_action = (batch_size, self.num_nodes, cfg.num_sparse_actions)
        self.topk_mapping = np.zeros(batch_node_action, dtype=np.int64)
        self.children_index = np.zeros(batch_node_action, dtype=np.int64)
        self.children_prior = np.zeros(batch_node_action, dtype=np.float64)
        self.children_values = np.zeros(batch_node_action, dtype=np.float64)
        self.children_visits = np.zeros(batch_node_action, dtype=np.int64)

        self.adaptive_min = np.zeros(batch_size, dtype=np.float64)
        self.adaptive_max = np.zeros(batch_size, dtype=np.float64)
        # untempered dense root priors, for likelihoods and the S=0 fallback
        self.root_priors = np.zeros((batch_size, vocab_size), dtype=np.float64)
        self.states: dict[tuple[int, int], typing.Any] = {}
        # per batch element, nodes 0 .. num_allocated - 1 are in use
        self.num_allocated = np.zeros(batch_size, dtype=np.int64)
        reset_tree(self)

    def root_children_dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Root visit counts and aggregated values scattered over the vocabulary."""
        dense_counts = np.zeros((self.batch_size, self.vocab_size), dtype=np.int64)
        dense_values = np.zeros((self.batch_size, self.vocab_size), dtype=np.float64)
        mapping = self.topk_mapping[:, 0, :]
        valid = mapping >= 0
        rows = np.broadcast_to(self.batch_range[:, None], mapping.shape)
        dense_counts[rows[valid], mapping[valid]] = self.children_visits[:, 0, :][valid]
        dense_values[rows[valid], mapping[valid]] = self.children_values[:, 0, :][valid]
        return dense_counts, dense_values

    def snapshot(self, b: int, model: Model | None = None) -> TreeSnapshot:
        """Copy out the tree of batch element `b`.

        With `model`, the stored model states are mapped to decoding states.
        """
        n = int(self.num_allocated[b])
        parents = self.parents[b, :n].copy()
        sparse = self.action_from_parents[b, :n]
        tokens = np.full(n, -1, dtype=np.int64)
        edge_priors = np.zeros(n, dtype=np.float64)
        for i in range(1, n):
            tokens[i] = self.topk_mapping[b, parents[i], sparse[i]]
            edge_priors[i] = self.children_prior[b, parents[i], sparse[i]]
        states = []
        if model is not None:
            states = [model.decode_state(self.states[(b, i)]) for i in range(n)]
        return TreeSnapshot(
            parents=parents,
            tokens=tokens,
            edge_priors=edge_priors,
            visit_counts=self.visit_counts[b, :n].copy(),
            values=self.values[b, :n].copy(),
            raw_values=self.raw_values[b, :n].copy(),
            depth=self.depth[b, :n].copy(),
            is_terminal=self.is_terminal[b, :n].copy(),
            states=states,
        )


def reset_tree(arena: TreeArena) -> None:
    """Reset all tree arrays to the empty tree."""
    arena.visit_counts.fill(0)
    arena.values.fill(0)
    arena.raw_values.fill(0)
    arena.parents.fill(-1)
    arena.action_from_parents.fill(-1)
    arena.depth.fill(0)
    arena.is_terminal.fill(False)
    arena.is_exhausted.fill(False)

    arena.topk_mapping.fill(-1)
    arena.children_index.fill(-1)
    arena.children_prior.fill(0.0)
    arena.children_values.fill(0.0)
    arena.children_visits.fill(0)

    arena.adaptive_min.fill(0.0)
    arena.adaptive_max.fill(0.0)
    arena.root_priors.fill(0.0)
    arena.states = {}
    arena.num_allocated.fill(0)


def puct_scores(
    children_prior: np.ndarray,
    children_values: np.ndarray,
    children_visits: np.ndarray,
    node_visits: np.ndarray,
    adaptive_min: np.ndarray,
    adaptive_max: np.ndarray,
    c_puct: float,
) -> np.ndarray:
    """pUCT scores of shape (B, A) for the children of B nodes.

    Unvisited children get the rescaled minimum value 0 regardless of
    their stored value.
    """
    policy_score = (
        np.sqrt(node_visits[:, None]) * c_puct * children_prior / (children_visits + 1)
    )
    value_score = (children_values - adaptive_min[:, None]) / (
        adaptive_max[:, None] - adaptive_min[:, None]
    )
    value_score = np.where(children_visits > 0, value_score, 0.0)
    return value_score + policy_score


def uct_select_action(arena: TreeArena, node_indices: np.ndarray) -> np.ndarray:
    """Sparse action maximizing the pUCT score, per batch element.

    Children whose subtree is exhausted are skipped unless all of them
    are. Ties go to the lowest sparse index.
    """
    b = arena.batch_range
    scores = puct_scores(
        arena.children_prior[b, node_indices],
        arena.children_values[b, node_indices],
        arena.children_visits[b, node_indices],
        arena.visit_counts[b, node_indices],
        arena.adaptive_min,
        arena.adaptive_max,
        arena.cfg.c_puct,
    )
    skip = _exhausted_children(arena, node_indices)
    skip &= ~skip.all(axis=1, keepdims=True)
    return np.argmax(np.where(skip, -np.inf, scores), axis=1)


def _exhausted_children(arena: TreeArena, node_indices: np.ndarray) -> np.ndarray:
    children = arena.children_index[arena.batch_range, node_indices]
    explored = children >= 0
    rows = arena.batch_range[:, None]
    return explored & arena.is_exhausted[rows, np.where(explored, children, 0)]


def simulate(arena: TreeArena) -> tuple[np.ndarray, np.ndarray]:
    """Descend from the roots until every batch element hits a leaf.

    A leaf is either an unexplored edge or a terminal node. Elements that
    reach their leaf early hold their position while the others keep
    descending. The returned sparse action is -1 where the descent ended
    on a terminal node, which is then the leaf itself.
    """
    b = arena.batch_range
    node_indices = np.zeros(arena.batch_size, dtype=np.int64)
    at_terminal = np.zeros(arena.batch_size, dtype=bool)
    while True:
        actions = uct_select_action(arena, node_indices)
        next_node_indices = arena.children_index[b, node_indices, actions]
        stop = at_terminal | (next_node_indices == -1)
        if stop.all():
            return node_indices, np.where(at_terminal, -1, actions)
        node_indices = np.where(stop, node_indices, next_node_indices)
        at_terminal = arena.is_terminal[b, node_indices]


def create_node(
    arena: TreeArena,
    node_indices: npt.ArrayLike,
    priors: np.ndarray,
    values: np.ndarray,
    model_states: list,
    is_terminal: np.ndarray,
    mask: np.ndarray | None = None,
) -> None:
    """Store a new node for every batch element selected by `mask`.

    `node_indices` holds one node index per batch element, or a single
    index for all of them. The priors are tempered and truncated to the
    top-A tokens without renormalization.
    """
    if mask is None:
        mask = np.ones(arena.batch_size, dtype=bool)
    if not mask.any():
        return
    b = arena.batch_range[mask]
    nodes = np.broadcast_to(np.asarray(node_indices, dtype=np.int64), mask.shape)[mask]
    num_sparse = arena.cfg.num_sparse_actions
    tempered = apply_temperature(np.asarray(priors)[mask], arena.cfg.tau)
    topk = np.argsort(-tempered, axis=-1, kind="stable")[:, :num_sparse]
    arena.topk_mapping[b, nodes, :] = topk
    arena.children_prior[b, nodes, :] = tempered[np.arange(len(b))[:, None], topk]
    arena.values[b, nodes] = np.asarray(values)[mask]
    arena.raw_values[b, nodes] = np.asarray(values)[mask]
    arena.visit_counts[b, nodes] = 1
    arena.is_terminal[b, nodes] = np.asarray(is_terminal)[mask]
    arena.is_exhausted[b, nodes] = np.asarray(is_terminal)[mask]
    for i, node in zip(b, nodes):
        arena.states[(int(i), int(node))] = model_states[i]
    arena.num_allocated[b] = np.maximum(arena.num_allocated[b], nodes + 1)


def _rollout_values(arena, model, model_states, metric, references):
    if references is None:
        references = [None] * arena.batch_size
    return np.array([
        rollout_value(model.decode_state(ms), model, metric, ref)
        for ms, ref in zip(model_states, references)
    ], dtype=np.float64)


def expand(
    arena: TreeArena,
    node_indices: np.ndarray,
    sparse_actions: np.ndarray,
    next_node_index: npt.ArrayLike,
    model: Model,
    *,
    metric: Metric | None = None,
    references: typing.Sequence[Sequence | None] | None = None,
) -> np.ndarray:
    """Evaluate the leaves found by :func:`simulate`; returns the leaf nodes.

    An unexplored edge gets a new node at `next_node_index` (one index per
    batch element, or one for all). A sparse action of -1 marks a terminal
    node: it is evaluated again, counts one more visit and gets no child.
    Every batch element costs one evaluation either way. With
    ``value_source="rollout"`` the node values come from
    :func:`~mcts_decode.base.models.rollout_value` under `metric`.
    """
    b = arena.batch_range
    node_indices = np.asarray(node_indices, dtype=np.int64)
    sparse_actions = np.asarray(sparse_actions, dtype=np.int64)
    next_node_indices = np.broadcast_to(
        np.asarray(next_node_index, dtype=np.int64), (arena.batch_size, ),
    ).copy()
    revisit = sparse_actions == -1
    create = ~revisit
    if not (arena.is_terminal[b, node_indices] == revisit).all():
        raise ContractViolation("exactly the terminal nodes are revisited")
    safe_actions = np.where(revisit, 0, sparse_actions)
    if not (arena.children_index[b, node_indices, safe_actions][create] == -1).all():
        raise ContractViolation("can only expand unexplored edges")
    if (next_node_indices[create] >= arena.num_nodes).any():
        raise ContractViolation(f"node indices {next_node_indices} out of range")
    model_states = [arena.states[(i, int(n))] for i, n in enumerate(node_indices)]
    # terminal states are absorbing, any token re-evaluates them
    dense_actions = np.where(
        revisit, model.eos_id, arena.topk_mapping[b, node_indices, safe_actions],
    )

    priors, values, next_states, is_terminal = model.evaluate_step(
        model_states, dense_actions,
    )
    if arena.cfg.value_source == "rollout":
        values = _rollout_values(arena, model, next_states, metric, references)

    create_node(arena, next_node_indices, priors, values, next_states, is_terminal, create)
    arena.visit_counts[b[revisit], node_indices[revisit]] += 1

    new_values = np.where(create, values, arena.adaptive_min)
    arena.adaptive_min = np.minimum(arena.adaptive_min, new_values)
    new_values = np.where(create, values, arena.adaptive_max)
    arena.adaptive_max = np.maximum(arena.adaptive_max, new_values)

    rows = b[create]
    new_nodes = next_node_indices[create]
    parents = node_indices[create]
    arena.children_index[rows, parents, sparse_actions[create]] = new_nodes
    arena.parents[rows, new_nodes] = parents
    arena.action_from_parents[rows, new_nodes] = sparse_actions[create]
    arena.depth[rows, new_nodes] = arena.depth[rows, parents] + 1
    return np.where(create, next_node_indices, node_indices)


def backward(arena: TreeArena, leaf_indices: np.ndarray) -> None:
    """Propagate leaf values to every ancestor.

    An ancestor becomes exhausted once all its sparse children exist and
    are exhausted. Batch elements whose walk already reached the root are
    masked out.
    """
    b = arena.batch_range
    node_indices = np.asarray(leaf_indices, dtype=np.int64)
    leaf_values = arena.values[b, node_indices]
    use_max = arena.cfg.backup == "max"
    while True:
        is_root = node_indices == 0
        if is_root.all():
            return
        active = ~is_root
        parents = np.where(is_root, 0, arena.parents[b, node_indices])
        parent_values = arena.values[b, parents]
        parent_visits = arena.visit_counts[b, parents]
        if use_max:
            updated = np.maximum(parent_values, leaf_values)
        else:
            updated = (parent_values * parent_visits + leaf_values) / (parent_visits + 1.0)
        arena.values[b, parents] = np.where(active, updated, parent_values)
        arena.visit_counts[b, parents] += active

        actions = np.where(is_root, 0, arena.action_from_parents[b, node_indices])
        arena.children_values[b, parents, actions] = np.where(
            active,
            arena.values[b, node_indices],
            arena.children_values[b, parents, actions],
        )
        arena.children_visits[b, parents, actions] += active
        exhausted = _exhausted_children(arena, parents).all(axis=1)
        arena.is_exhausted[b, parents] |= active & exhausted
        node_indices = parents


def init_root(
    arena: TreeArena,
    model: Model,
    root_states: typing.Sequence[DecodeState],
    *,
    metric: Metric | None = None,
    references: typing.Sequence[Sequence | None] | None = None,
) -> list[Sequence | None]:
    """Reset the arena and create the root nodes; returns the references per root.

    The value range of each tree starts as ``[v, v + 1e-6]`` around the
    root value.
    """
    if len(root_states) != arena.batch_size:
        raise ValueError(
            f"arena holds {arena.batch_size} trees, got {len(root_states)} root states"
        )
    if any(s.terminal for s in root_states):
        raise ContractViolation("search needs non-terminal root states")
    references = [None] * arena.batch_size if references is None else list(references)
    if arena.cfg.value_source == "rollout":
        if metric is None:
            raise ConfigurationError("rollout values need a metric")
        if metric.privileged and any(r is None for r in references):
            raise ConfigurationError(
                f"metric {metric.name!r} is privileged and needs references"
            )
    reset_tree(arena)

    priors, values, model_states = model.evaluate_root(root_states)
    if arena.cfg.value_source == "rollout":
        values = _rollout_values(arena, model, model_states, metric, references)
    arena.root_priors[:] = priors
    arena.adaptive_min = np.array(values, dtype=np.float64)
    arena.adaptive_max = arena.adaptive_min + ADAPTIVE_RANGE_EPS
    create_node(
        arena, 0, priors, values, model_states, np.zeros(arena.batch_size, dtype=bool),
    )
    return references


def run_simulation(
    arena: TreeArena,
    model: Model,
    *,
    metric: Metric | None = None,
    references: typing.Sequence[Sequence | None] | None = None,
) -> np.ndarray:
    """One simulation: select, expand into the next free node, back up.

    Returns the leaf node of every batch element.
    """
    node_indices, actions = simulate(arena)
    leaf_indices = expand(
        arena, node_indices, actions, arena.num_allocated, model,
        metric=metric, references=references,
    )
    backward(arena, leaf_indices)
    return leaf_indices


def search(
    arena: TreeArena,
    model: Model,
    root_states: typing.Sequence[DecodeState],
    *,
    metric: Metric | None = None,
    references: typing.Sequence[Sequence | None] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Run S simulations from each root state.

    Returns
    -------
    dense_counts : np.ndarray
        Root child visit counts over the vocabulary, shape (B, V)
    dense_values : np.ndarray
        Root child aggregated values over the vocabulary, zero where
        unvisited, shape (B, V)
    """
    cfg = arena.cfg
    t0 = time.perf_counter()
    references = init_root(arena, model, root_states, metric=metric, references=references)
    for _ in range(cfg.num_simulations):
        run_simulation(arena, model, metric=metric, references=references)
    log.debug(
        "search of %d trees with %d simulations took %.3fs",
        arena.batch_size, cfg.num_simulations, time.perf_counter() - t0,
    )
    return arena.root_children_dense()


def select_root_action(
    dense_counts: np.ndarray,
    root_children_values: np.ndarray,
    root_children_visits: np.ndarray | None = None,
    mode: Literal["visit_count", "max_value"] = "visit_count",
    *,
    fallback_priors: np.ndarray | None = None,
) -> np.ndarray:
    """One token per batch element, ties to the lowest token id.

    Without any visited root child the argmax of `fallback_priors` is
    taken instead.

    >>> select_root_action(np.array([[4, 4, 0]]), np.zeros((1, 3)))
    array([0])
    >>> select_root_action(
    ...     np.array([[1, 1, 0]]), np.array([[0.2, 0.9, 0.0]]), mode="max_value",
    ... )
    array([1])
    """
    dense_counts = np.atleast_2d(dense_counts)
    root_children_values = np.atleast_2d(root_children_values)
    visits = dense_counts if root_children_visits is None else np.atleast_2d(
        root_children_visits
    )
    if mode not in ("visit_count", "max_value"):
        raise ValueError(f"unknown root selection mode {mode}")
    actions = np.zeros(dense_counts.shape[0], dtype=np.int64)
    for b in range(dense_counts.shape[0]):
        visited = visits[b] > 0
        if not visited.any():
            if fallback_priors is None:
                raise ContractViolation("no root child was visited")
            log.warning("no root child visited, selecting the most likely token")
            actions[b] = argmax_lowest(fallback_priors[b])
        elif mode == "visit_count":
            actions[b] = argmax_lowest(dense_counts[b])
        else:
            actions[b] = argmax_lowest(root_children_values[b], mask=visited)
    return actions


SearchCallback = Callable[[int, TreeArena, list[int]], None]


def decode_mcts(
    model: Model,
    states: typing.Sequence[DecodeState],
    cfg: SearchConfig,
    *,
    metric: Metric | None = None,
    references: typing.Sequence[Sequence | None] | None = None,
    on_search: SearchCallback | None = None,
) -> list[Candidate]:
    """Decode a batch by running one search per output position.

    Terminal batch elements are held fixed while the others continue.
    Each search costs S + 1 evaluations per active element, plus rollout
    evaluations with ``value_source="rollout"``.

    Parameters
    ----------
    model
        Policy/value provider
    states
        Non-terminal start states
    cfg
        Search parameters
    metric, references
        Needed with ``value_source="rollout"``; one reference per state
        for privileged metrics
    on_search
        Called as ``on_search(position, arena, active)`` after every
        search, `active` holding the batch indices searched
    """
    if len(states) == 0:
        raise ValueError("decode_mcts needs a non-empty batch")
    states = list(states)
    if references is None:
        references = [None] * len(states)
    if len(references) != len(states):
        raise ValueError(f"got {len(references)} references for {len(states)} states")
    log_likelihoods = [0.0] * len(states)
    arenas: dict[int, TreeArena] = {}
    position = 0
    active = [i for i, s in enumerate(states) if not s.terminal]
    while active:
        arena = arenas.get(len(active))
        if arena is None:
            arena = arenas[len(active)] = TreeArena(len(active), cfg, model.vocab_size)
        dense_counts, dense_values = search(
            arena, model, [states[i] for i in active],
            metric=metric, references=[references[i] for i in active],
        )
        actions = select_root_action(
            dense_counts, dense_values, dense_counts, cfg.root_selection,
            fallback_priors=arena.root_priors,
        )
        if on_search is not None:
            on_search(position, arena, list(active))
        model.ledger.count_tokens(len(active))
        for row, i in enumerate(active):
            action = int(actions[row])
            prior = arena.root_priors[row, action]
            log_likelihoods[i] += math.log(prior) if prior > 0 else -math.inf
            states[i] = states[i].step(action)
        active = [i for i in active if not states[i].terminal]
        position += 1
    return [
        Candidate(state=s, log_likelihood=ll) for s, ll in zip(states, log_likelihoods)
    ]
