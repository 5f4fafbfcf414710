"""Exact decoders for small instances.

These enumerate (or prune) the full space of terminated sequences and are
used as ground truth for the approximate decoders. They evaluate the model
on a private ledger, so calling them does not affect the budget counts of
the caller.
"""
from __future__ import annotations

import logging
import math
import time
import typing

import numpy as np

from mcts_decode.base.decoders import Candidate
from mcts_decode.base.mdp import DecodeState, Sequence
from mcts_decode.base.models import BudgetLedger, Model
from mcts_decode.base.utils import ENUMERATION_LIMIT, ContractViolation, EnumerationLimitError

if typing.TYPE_CHECKING:
    from mcts_decode.base.scoring import Metric

log = logging.getLogger(__name__)


def _check_guard(vocab_size: int, max_len: int) -> None:
    if vocab_size ** max_len > ENUMERATION_LIMIT:
        raise EnumerationLimitError(
            f"V^max_len = {vocab_size}^{max_len} exceeds the enumeration "
            f"limit of {ENUMERATION_LIMIT}"
        )


def _prepare(model: Model, source: typing.Iterable[int], max_len: int | None):
    max_len = model.max_len if max_len is None else int(max_len)
    _check_guard(model.vocab_size, max_len)
    root = DecodeState.initial(source, max_len=max_len, eos_id=model.eos_id)
    return model.with_ledger(BudgetLedger()), root


def _enumerate_states(model: Model, root: DecodeState) -> list[tuple[DecodeState, float]]:
    if root.terminal:
        return [(root, 0.0)]
    finished = []
    frontier = [(root, 0.0)]
    while frontier:
        priors, _, _ = model.evaluate_root([state for state, _ in frontier])
        next_frontier = []
        for (state, log_likelihood), prior in zip(frontier, priors):
            for action in np.flatnonzero(prior > 0):
                child = state.step(int(action))
                child_ll = log_likelihood + math.log(prior[action])
                if child.terminal:
                    finished.append((child, child_ll))
                else:
                    next_frontier.append((child, child_ll))
        frontier = next_frontier
    finished.sort(key=lambda item: item[0].prefix)
    return finished


def enumerate_sequences(
    model: Model,
    source: typing.Iterable[int],
    max_len: int | None = None,
) -> list[tuple[Sequence, float]]:
    """Every terminated sequence with its exact log-likelihood.

    Sequences are the emitted tokens including the end-of-sequence token
    where one was emitted, in lexicographic order. Zero-probability
    branches are skipped.

    Raises
    ------
    EnumerationLimitError
        If ``V ** max_len`` exceeds :data:`~mcts_decode.base.utils.ENUMERATION_LIMIT`

    Examples
    --------
    >>> m0 = TabularModel.from_prior([0.5, 0.3, 0.2], max_len=3)
    >>> len(enumerate_sequences(m0, [0], max_len=2))
    7
    """
    model, root = _prepare(model, source, max_len)
    return [(state.prefix, ll) for state, ll in _enumerate_states(model, root)]


def exact_argmax_likelihood(
    model: Model,
    source: typing.Iterable[int],
    max_len: int | None = None,
) -> Candidate:
    """The most likely terminated sequence, by depth-first branch-and-bound.

    Prefixes whose log-likelihood is already below the best terminated
    sequence found are pruned. Among equally likely sequences the
    lexicographically smallest one wins.
    """
    model, root = _prepare(model, source, max_len)
    if root.terminal:
        return Candidate(state=root, log_likelihood=0.0)
    t0 = time.perf_counter()
    best_state: DecodeState | None = None
    best_ll = -math.inf
    visited = 0
    stack = [(root, 0.0)]
    while stack:
        state, log_likelihood = stack.pop()
        if log_likelihood < best_ll:
            continue
        visited += 1
        prior = model.evaluate(state).prior
        children = []
        for action in np.flatnonzero(prior > 0):
            child = state.step(int(action))
            child_ll = log_likelihood + math.log(prior[action])
            if child_ll > log_likelihood:
                raise ContractViolation(
                    f"log-likelihood increased from {log_likelihood} to {child_ll} "
                    f"extending {state.prefix}"
                )
            if child_ll < best_ll:
                continue
            if child.terminal:
                if (
                    child_ll > best_ll
                    or best_state is None
                    or child.prefix < best_state.prefix
                ):
                    best_state, best_ll = child, child_ll
            else:
                children.append((child, child_ll))
        # most likely child on top of the stack, lowest token first on ties
        children.sort(key=lambda item: (item[1], [-t for t in item[0].prefix]))
        stack.extend(children)
    log.debug(
        "branch and bound visited %d prefixes in %.3fs", visited, time.perf_counter() - t0,
    )
    return Candidate(state=best_state, log_likelihood=best_ll)


def exact_argmax_metric(
    model: Model,
    source: typing.Iterable[int],
    metric: Metric,
    reference: Sequence | None = None,
    max_len: int | None = None,
) -> Candidate:
    """The terminated sequence with the highest metric score.

    Ties go to the more likely sequence, then to the lexicographically
    smallest one. The returned candidate carries its score.
    """
    model, root = _prepare(model, source, max_len)
    best = None
    best_key = None
    for state, log_likelihood in _enumerate_states(model, root):
        score = metric.score(state.output, source=state.source, reference=reference)
        key = (-score, -log_likelihood, state.prefix)
        if best_key is None or key < best_key:
            best_key = key
            best = Candidate(state=state, log_likelihood=log_likelihood, score=score)
    return best
