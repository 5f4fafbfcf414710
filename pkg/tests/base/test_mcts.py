import logging
import math

import numpy as np
import pytest

from mcts_decode.base.decoders import greedy_decode
from mcts_decode.base.mcts import (
    SearchConfig, TreeArena, backward, decode_mcts, expand, init_root, puct_scores,
    reset_tree, run_simulation, search, select_root_action, simulate, uct_select_action,
)
from mcts_decode.base.models import TabularModel
from mcts_decode.base.reference import ReferenceSearch
from mcts_decode.base.scoring import Metric
from mcts_decode.base.utils import ConfigurationError, ContractViolation

A, B, EOS = 0, 1, 2


def _subtree(parents, i):
    """Indices of node `i` and all its descendants."""
    members = {i}
    for j in range(i + 1, len(parents)):
        if parents[j] in members:
            members.add(j)
    return sorted(members)


def test_fresh_arena_is_empty():
    arena = TreeArena(2, SearchConfig(num_simulations=4, num_sparse_actions=2), 3)
    assert arena.num_allocated.tolist() == [0] * arena.batch_size
    assert (arena.parents == -1).all()
    assert (arena.children_index == -1).all()
    assert (arena.topk_mapping == -1).all()
    assert arena.visit_counts.sum() == 0


def test_reset_clears_search(m0_occupancy):
    cfg = SearchConfig(num_simulations=3, num_sparse_actions=3)
    arena = TreeArena(1, cfg, 3)
    search(arena, m0_occupancy, [m0_occupancy.initial_state((A, ))])
    assert arena.num_allocated.tolist() == [4]
    reset_tree(arena)
    assert arena.num_allocated.tolist() == [0] * arena.batch_size
    assert arena.states == {}
    assert (arena.children_visits == 0).all()
    assert (arena.parents == -1).all()


def test_too_many_sparse_actions():
    with pytest.raises(ConfigurationError):
        TreeArena(1, SearchConfig(num_simulations=1, num_sparse_actions=4), 3)


@pytest.mark.parametrize(
    "kwargs", [
        dict(num_simulations=-1, num_sparse_actions=1),
        dict(num_simulations=1, num_sparse_actions=0),
        dict(num_simulations=1, num_sparse_actions=1, c_puct=0),
        dict(num_simulations=1, num_sparse_actions=1, tau=-1),
        dict(num_simulations=1, num_sparse_actions=1, backup="min"),
        dict(num_simulations=1, num_sparse_actions=1, backup="avg"),
        dict(num_simulations=1, num_sparse_actions=1, root_selection="random"),
        dict(num_simulations=1, num_sparse_actions=1, value_source="oracle"),
    ],
)
def test_invalid_search_config(kwargs):
    with pytest.raises(ConfigurationError):
        SearchConfig(**kwargs)


def test_search_config_defaults():
    cfg = SearchConfig(num_simulations=1, num_sparse_actions=1)
    assert cfg.backup == "average"
    assert cfg.root_selection == "visit_count"
    assert cfg.value_source == "model"


def test_puct_scores():
    scores = puct_scores(
        children_prior=np.array([[0.6, 0.4]]),
        children_values=np.array([[0.9, 5.0]]),
        children_visits=np.array([[1, 0]]),
        node_visits=np.array([2]),
        adaptive_min=np.array([0.5]),
        adaptive_max=np.array([1.0]),
        c_puct=1.0,
    )
    # the stored value of the unvisited child is ignored
    assert np.allclose(scores, [[0.8 + math.sqrt(2) * 0.3, math.sqrt(2) * 0.4]])


def test_uct_select_ties_go_low(m0):
    cfg = SearchConfig(num_simulations=2, num_sparse_actions=2)
    arena = TreeArena(1, cfg, 3)
    init_root(arena, m0, [m0.initial_state((A, ))])
    arena.children_prior[0, 0] = [0.4, 0.4]
    assert uct_select_action(arena, np.zeros(1, dtype=np.int64)).tolist() == [0]


def test_init_root(m0_occupancy):
    cfg = SearchConfig(num_simulations=2, num_sparse_actions=2, tau=0.5)
    arena = TreeArena(1, cfg, 3)
    init_root(arena, m0_occupancy, [m0_occupancy.initial_state((A, ))])
    assert arena.num_allocated.tolist() == [1]
    assert arena.topk_mapping[0, 0].tolist() == [A, B]
    # tempered, truncated, not renormalized
    assert np.allclose(arena.children_prior[0, 0], [0.6579, 0.2368], atol=1e-4)
    assert np.allclose(arena.root_priors[0], [0.5, 0.3, 0.2])
    assert arena.values[0, 0] == pytest.approx(1.0)
    assert arena.adaptive_max[0] - arena.adaptive_min[0] == pytest.approx(1e-6)
    assert arena.visit_counts[0, 0] == 1


def test_init_root_errors(m0, occupancy):
    cfg = SearchConfig(num_simulations=1, num_sparse_actions=2)
    arena = TreeArena(1, cfg, 3)
    root = m0.initial_state((A, ))
    with pytest.raises(ValueError):
        init_root(arena, m0, [root, root])
    with pytest.raises(ContractViolation):
        init_root(arena, m0, [root.step(EOS)])
    rollout_arena = TreeArena(
        1, SearchConfig(num_simulations=1, num_sparse_actions=2, value_source="rollout"), 3,
    )
    with pytest.raises(ConfigurationError):
        init_root(rollout_arena, m0, [root])
    with pytest.raises(ConfigurationError):
        init_root(rollout_arena, m0, [root], metric=Metric.bleu())


def test_first_expansions_m0(m0_occupancy):
    model = m0_occupancy
    cfg = SearchConfig(num_simulations=3, num_sparse_actions=3)
    arena = TreeArena(1, cfg, 3)
    init_root(arena, model, [model.initial_state((A, ))])

    run_simulation(arena, model)
    assert arena.children_index[0, 0].tolist() == [1, -1, -1]
    assert arena.parents[0, 1] == 0
    assert arena.depth[0, 1] == 1
    assert arena.values[0, 0] == pytest.approx(1.0)
    assert arena.visit_counts[0, 0] == 2

    # the value of [A] equals the root value, the rescaled value is 0,
    # so the prior term picks B
    run_simulation(arena, model)
    assert arena.children_index[0, 0].tolist() == [1, 2, -1]
    assert arena.raw_values[0, 2] == pytest.approx(2 / 3)
    assert arena.adaptive_min[0] == pytest.approx(2 / 3)
    assert arena.values[0, 0] == pytest.approx(8 / 9)

    run_simulation(arena, model)
    snapshot = arena.snapshot(0, model)
    assert snapshot.parents.tolist() == [-1, 0, 0, 1]
    assert snapshot.tokens.tolist() == [-1, A, B, A]
    assert snapshot.visit_counts.tolist() == [4, 2, 1, 1]
    assert snapshot.values[0] == pytest.approx(11 / 12)
    assert snapshot.states[3].prefix == (A, A)
    assert np.allclose(snapshot.edge_priors[1:], [0.5, 0.3, 0.5])


def test_expand_explored_edge(m0_occupancy):
    model = m0_occupancy
    cfg = SearchConfig(num_simulations=2, num_sparse_actions=3)
    arena = TreeArena(1, cfg, 3)
    init_root(arena, model, [model.initial_state((A, ))])
    run_simulation(arena, model)
    with pytest.raises(ContractViolation):
        expand(arena, np.array([0]), np.array([0]), 2, model)


def _two_node_arena(backup):
    cfg = SearchConfig(num_simulations=1, num_sparse_actions=2, backup=backup)
    arena = TreeArena(1, cfg, 3)
    arena.values[0, 0] = 0.5
    arena.visit_counts[0, 0] = 2
    arena.parents[0, 1] = 0
    arena.action_from_parents[0, 1] = 0
    arena.values[0, 1] = 0.8
    arena.visit_counts[0, 1] = 1
    return arena


def test_backward_average():
    arena = _two_node_arena("average")
    backward(arena, np.array([1]))
    assert arena.values[0, 0] == pytest.approx(0.6)
    assert arena.visit_counts[0, 0] == 3
    assert arena.children_values[0, 0, 0] == pytest.approx(0.8)
    assert arena.children_visits[0, 0, 0] == 1


def test_backward_max():
    arena = _two_node_arena("max")
    backward(arena, np.array([1]))
    assert arena.values[0, 0] == pytest.approx(0.8)
    assert arena.visit_counts[0, 0] == 3


def test_backward_from_root_is_noop():
    arena = _two_node_arena("average")
    backward(arena, np.array([0]))
    assert arena.values[0, 0] == 0.5
    assert arena.visit_counts[0, 0] == 2


@pytest.mark.parametrize(
    "seed", range(4),
)
@pytest.mark.parametrize(
    "backup", ["average", "max"],
)
@pytest.mark.parametrize(
    "num_sparse_actions", [1, 2, 4],
)
def test_tree_invariants(seed, backup, num_sparse_actions, seeded_model, occupancy):
    model = seeded_model(seed, vocab_size=4, max_len=5, metric=occupancy)
    cfg = SearchConfig(
        num_simulations=24, num_sparse_actions=num_sparse_actions, backup=backup, c_puct=2.0,
    )
    arena = TreeArena(1, cfg, 4)
    counts, _ = search(arena, model, [model.initial_state((A, B))])
    snap = arena.snapshot(0, model)

    assert snap.num_nodes <= cfg.num_simulations + 1
    assert counts.sum() == cfg.num_simulations
    assert len(set(snap.states)) == snap.num_nodes
    # a terminal node counts one visit per evaluation, inner nodes one
    weights = np.where(snap.is_terminal, snap.visit_counts, 1)
    for i in range(snap.num_nodes):
        children = np.flatnonzero(snap.parents == i)
        if snap.is_terminal[i]:
            assert len(children) == 0
        else:
            assert snap.visit_counts[i] == 1 + snap.visit_counts[children].sum()
        assert len(set(snap.tokens[children])) == len(children)
        assert len(children) <= num_sparse_actions
        members = _subtree(snap.parents, i)
        if backup == "average":
            assert snap.values[i] == pytest.approx(
                np.average(snap.raw_values[members], weights=weights[members]),
            )
        else:
            assert snap.values[i] == pytest.approx(snap.raw_values[members].max())
        if i > 0:
            parent = snap.parents[i]
            assert snap.depth[i] == snap.depth[parent] + 1
            assert snap.states[i] == snap.states[parent].step(int(snap.tokens[i]))


@pytest.mark.parametrize(
    "num_simulations, num_nodes", [
        (0, 1),
        (4, 5),
        (9, 10),
        (30, 10),
    ],
)
def test_search_adds_a_state_per_simulation(num_simulations, num_nodes):
    # root, three children and six grandchildren, all grandchildren terminal
    model = TabularModel.from_prior([0.5, 0.3, 0.2], max_len=2)
    cfg = SearchConfig(num_simulations=num_simulations, num_sparse_actions=3)
    arena = TreeArena(1, cfg, 3)
    counts, _ = search(arena, model, [model.initial_state((A, ))])
    snap = arena.snapshot(0, model)
    assert snap.num_nodes == num_nodes
    assert len({s.prefix for s in snap.states}) == num_nodes
    assert counts.sum() == num_simulations
    assert model.ledger.evaluations == num_simulations + 1
    assert arena.is_exhausted[0, 0] == (num_nodes == 10)


def test_terminal_nodes_are_revisited():
    model = TabularModel.from_prior([0.5, 0.3, 0.2], max_len=1)
    cfg = SearchConfig(num_simulations=7, num_sparse_actions=3)
    arena = TreeArena(1, cfg, 3)
    init_root(arena, model, [model.initial_state((A, ))])
    for _ in range(3):
        run_simulation(arena, model)
    assert arena.is_exhausted[0, :4].all()

    node_indices, actions = simulate(arena)
    assert actions.tolist() == [-1]
    assert arena.is_terminal[0, node_indices[0]]
    leaves = expand(arena, node_indices, actions, arena.num_allocated, model)
    assert leaves.tolist() == node_indices.tolist()
    backward(arena, leaves)
    for _ in range(3):
        run_simulation(arena, model)

    snap = arena.snapshot(0, model)
    assert snap.num_nodes == 4
    assert snap.is_terminal[1:].all()
    assert snap.visit_counts[0] == 1 + cfg.num_simulations
    assert snap.visit_counts[1:].sum() == cfg.num_simulations
    assert model.ledger.evaluations == 1 + cfg.num_simulations


def test_expand_checks_terminal_leaves():
    model = TabularModel.from_prior([0.5, 0.3, 0.2], max_len=1)
    cfg = SearchConfig(num_simulations=3, num_sparse_actions=3)
    arena = TreeArena(1, cfg, 3)
    init_root(arena, model, [model.initial_state((A, ))])
    leaf = run_simulation(arena, model)
    with pytest.raises(ContractViolation):
        expand(arena, leaf, np.array([0]), 2, model)
    with pytest.raises(ContractViolation):
        expand(arena, np.array([0]), np.array([-1]), 2, model)


@pytest.mark.parametrize(
    "seed", range(6),
)
@pytest.mark.parametrize(
    "cfg", [
        SearchConfig(num_simulations=30, num_sparse_actions=2),
        SearchConfig(num_simulations=30, num_sparse_actions=3, backup="max"),
        SearchConfig(num_simulations=30, num_sparse_actions=3, value_source="rollout"),
    ],
)
def test_arena_matches_reference_with_revisits(seed, cfg, seeded_model, occupancy):
    model = seeded_model(seed, vocab_size=3, max_len=2, metric=occupancy, value_noise=0.1)
    root = model.initial_state((A, ))
    arena = TreeArena(1, cfg, 3)
    search(arena, model, [root], metric=occupancy)
    snap = arena.snapshot(0)

    reference = ReferenceSearch(model, root, cfg, metric=occupancy)
    for _ in range(cfg.num_simulations):
        reference.simulate_once()

    # the sparse trees hold at most 1 + 3 + 6 states, the rest are revisits
    assert snap.num_nodes < cfg.num_simulations + 1
    assert snap.parents.tolist() == reference.parents().tolist()
    assert snap.visit_counts.tolist() == reference.visit_counts().tolist()
    assert np.allclose(snap.values, reference.values())


def test_adaptive_range_is_monotone(seeded_model, occupancy):
    model = seeded_model(2, vocab_size=4, max_len=5, metric=occupancy, value_noise=0.2)
    cfg = SearchConfig(num_simulations=30, num_sparse_actions=3)
    arena = TreeArena(1, cfg, 4)
    init_root(arena, model, [model.initial_state((A, ))])
    lows, highs = [arena.adaptive_min[0]], [arena.adaptive_max[0]]
    for sim in range(cfg.num_simulations):
        run_simulation(arena, model)
        lows.append(arena.adaptive_min[0])
        highs.append(arena.adaptive_max[0])
    assert (np.diff(lows) <= 0).all()
    assert (np.diff(highs) >= 0).all()
    allocated = arena.raw_values[0, :arena.num_allocated[0]]
    assert lows[-1] == allocated.min()
    assert highs[-1] >= allocated.max()


@pytest.mark.parametrize(
    "seed", range(4),
)
@pytest.mark.parametrize(
    "cfg", [
        SearchConfig(num_simulations=20, num_sparse_actions=2),
        SearchConfig(num_simulations=20, num_sparse_actions=3, backup="max"),
        SearchConfig(num_simulations=20, num_sparse_actions=4, tau=0.7, c_puct=3.0),
        SearchConfig(num_simulations=15, num_sparse_actions=3, value_source="rollout"),
    ],
)
def test_arena_matches_reference(seed, cfg, seeded_model, occupancy):
    model = seeded_model(seed, vocab_size=4, max_len=5, metric=occupancy, value_noise=0.1)
    root = model.initial_state((A, B))
    arena = TreeArena(1, cfg, 4)
    search(arena, model, [root], metric=occupancy)
    snap = arena.snapshot(0)

    reference = ReferenceSearch(model, root, cfg, metric=occupancy)
    for _ in range(cfg.num_simulations):
        reference.simulate_once()

    assert snap.parents.tolist() == reference.parents().tolist()
    assert snap.visit_counts.tolist() == reference.visit_counts().tolist()
    assert np.allclose(snap.values, reference.values())


def test_batch_elements_are_independent(seeded_model, occupancy):
    model = seeded_model(6, vocab_size=4, max_len=5, metric=occupancy)
    cfg = SearchConfig(num_simulations=16, num_sparse_actions=3)
    roots = [model.initial_state(source) for source in [(A, ), (B, A), (2, 2, 1)]]
    batched = TreeArena(3, cfg, 4)
    counts, values = search(batched, model, roots)
    for b, root in enumerate(roots):
        single = TreeArena(1, cfg, 4)
        single_counts, single_values = search(single, model, [root])
        assert counts[b].tolist() == single_counts[0].tolist()
        assert np.allclose(values[b], single_values[0])


def test_search_cost(seeded_model, occupancy):
    model = seeded_model(1, vocab_size=4, max_len=5, metric=occupancy)
    cfg = SearchConfig(num_simulations=10, num_sparse_actions=2)
    arena = TreeArena(2, cfg, 4)
    search(arena, model, [model.initial_state((A, ))] * 2)
    assert model.ledger.evaluations == 2 * (cfg.num_simulations + 1)


def test_rollout_values_match_value_head(m0, m0_occupancy, occupancy):
    model_cfg = SearchConfig(num_simulations=5, num_sparse_actions=3)
    rollout_cfg = SearchConfig(num_simulations=5, num_sparse_actions=3, value_source="rollout")
    root = m0.initial_state((A, ))
    model_arena = TreeArena(1, model_cfg, 3)
    search(model_arena, m0_occupancy, [root])
    rollout_arena = TreeArena(1, rollout_cfg, 3)
    search(rollout_arena, m0, [root], metric=occupancy)
    assert np.allclose(model_arena.values, rollout_arena.values)
    assert (model_arena.visit_counts == rollout_arena.visit_counts).all()
    # rollouts are charged on top of the S + 1 evaluations
    assert m0.ledger.evaluations > 2 * (model_cfg.num_simulations + 1)


def test_root_child_rollout_value(m0, occupancy):
    cfg = SearchConfig(num_simulations=1, num_sparse_actions=3, value_source="rollout")
    arena = TreeArena(1, cfg, 3)
    search(arena, m0, [m0.initial_state((A, )).step(B)], metric=occupancy)
    # root [B] completes to [B, A, A]; its first child [B, A] too
    assert arena.raw_values[0, :2] == pytest.approx([2 / 3, 2 / 3])


def test_select_root_action_visit_count():
    counts = np.array([[1, 3, 3], [0, 0, 2]])
    assert select_root_action(counts, np.zeros((2, 3))).tolist() == [1, 2]


def test_select_root_action_max_value_ignores_unvisited():
    counts = np.array([[0, 2, 1]])
    values = np.array([[0.9, 0.3, 0.4]])
    assert select_root_action(counts, values, mode="max_value").tolist() == [2]


def test_select_root_action_fallback(caplog):
    with caplog.at_level(logging.WARNING):
        action = select_root_action(
            np.zeros((1, 3)), np.zeros((1, 3)), fallback_priors=np.array([[0.2, 0.5, 0.3]]),
        )
    assert action.tolist() == [1]
    assert "no root child visited" in caplog.text


def test_select_root_action_errors():
    with pytest.raises(ContractViolation):
        select_root_action(np.zeros((1, 3)), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        select_root_action(np.ones((1, 3)), np.zeros((1, 3)), mode="softmax")


def test_decode_m0(m0_occupancy):
    cfg = SearchConfig(num_simulations=3, num_sparse_actions=3)
    (result, ) = decode_mcts(m0_occupancy, [m0_occupancy.initial_state((A, ))], cfg)
    assert result.output == (A, A, A)
    assert result.log_likelihood == pytest.approx(3 * math.log(0.5))
    assert m0_occupancy.ledger.snapshot() == (3 * 4, 3)


def test_zero_simulations_is_greedy(m0, caplog):
    cfg = SearchConfig(num_simulations=0, num_sparse_actions=2)
    with caplog.at_level(logging.WARNING):
        (result, ) = decode_mcts(m0, [m0.initial_state((A, ))], cfg)
    assert result.output == (A, A, A)
    assert m0.ledger.snapshot() == (3, 3)
    assert "no root child visited" in caplog.text


@pytest.mark.parametrize(
    "seed", range(5),
)
def test_single_sparse_action_is_greedy(seed, seeded_model, occupancy):
    model = seeded_model(seed, vocab_size=5, max_len=6, metric=occupancy)
    state = model.initial_state((A, ))
    cfg = SearchConfig(num_simulations=6, num_sparse_actions=1)
    (result, ) = decode_mcts(model, [state], cfg)
    expected = greedy_decode(model, state)
    assert result.sequence == expected.sequence
    assert result.log_likelihood == pytest.approx(expected.log_likelihood)


def test_decode_is_deterministic(seeded_model, occupancy):
    cfg = SearchConfig(num_simulations=12, num_sparse_actions=3)
    outputs = []
    for _ in range(2):
        model = seeded_model(8, vocab_size=4, max_len=5, metric=occupancy, value_noise=0.2)
        states = [model.initial_state(source) for source in [(A, ), (B, B)]]
        outputs.append([c.sequence for c in decode_mcts(model, states, cfg)])
    assert outputs[0] == outputs[1]


def test_decode_holds_finished_elements(seeded_model, occupancy):
    model = seeded_model(3, vocab_size=4, max_len=4, metric=occupancy)
    cfg = SearchConfig(num_simulations=8, num_sparse_actions=2)
    done = model.initial_state((A, )).step(model.eos_id)
    open_state = model.initial_state((A, ))
    seen = []

    def _on_search(position, arena, active):
        seen.append((position, list(active), arena.batch_size))

    finished, decoded = decode_mcts(model, [done, open_state], cfg, on_search=_on_search)
    assert finished.state == done
    assert finished.log_likelihood == 0.0
    assert decoded.state.terminal
    assert [p for p, _, _ in seen] == list(range(len(seen)))
    assert all(active == [1] and size == 1 for _, active, size in seen)
    assert len(seen) == len(decoded.sequence)
    evaluations, tokens = model.ledger.snapshot()
    assert evaluations == tokens * (cfg.num_simulations + 1)


def test_decode_empty_batch(m0):
    with pytest.raises(ValueError):
        decode_mcts(m0, [], SearchConfig(num_simulations=1, num_sparse_actions=1))
