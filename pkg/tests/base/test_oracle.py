import math

import numpy as np
import pytest

from mcts_decode.base.models import TabularModel
from mcts_decode.base.oracle import (
    enumerate_sequences, exact_argmax_likelihood, exact_argmax_metric,
)
from mcts_decode.base.scoring import Metric
from mcts_decode.base.utils import ContractViolation, EnumerationLimitError

A, B, EOS = 0, 1, 2


def test_enumerate_m0(m0):
    table = enumerate_sequences(m0, (A, ), max_len=2)
    expected = [
        ((A, A), 0.25),
        ((A, B), 0.15),
        ((A, EOS), 0.10),
        ((B, A), 0.15),
        ((B, B), 0.09),
        ((B, EOS), 0.06),
        ((EOS, ), 0.20),
    ]
    assert [seq for seq, _ in table] == [seq for seq, _ in expected]
    assert np.allclose([math.exp(ll) for _, ll in table], [p for _, p in expected])


@pytest.mark.parametrize(
    "seed", range(4),
)
@pytest.mark.parametrize(
    "context_order", [0, 1, 2],
)
def test_enumeration_sums_to_one(seed, context_order, seeded_model):
    model = seeded_model(seed, vocab_size=4, max_len=5, context_order=context_order)
    table = enumerate_sequences(model, (A, ))
    assert math.fsum(math.exp(ll) for _, ll in table) == pytest.approx(1.0, abs=1e-9)
    assert len({seq for seq, _ in table}) == len(table)


def test_enumeration_guard(m0):
    with pytest.raises(EnumerationLimitError):
        enumerate_sequences(m0, (A, ), max_len=13)
    with pytest.raises(EnumerationLimitError):
        exact_argmax_likelihood(m0, (A, ), max_len=13)
    with pytest.raises(EnumerationLimitError):
        exact_argmax_metric(m0, (A, ), Metric.coverage(), max_len=13)


def test_enumeration_skips_zero_probability():
    model = TabularModel.from_table(
        {(): [0.0, 1.0, 0.0], (B, ): [0.0, 0.0, 1.0]}, context_order=1, max_len=4,
    )
    assert enumerate_sequences(model, (A, )) == [((B, EOS), 0.0)]


def test_enumeration_of_terminal_root(m0):
    assert enumerate_sequences(m0, (A, ), max_len=0) == [((), 0.0)]


def test_oracles_use_private_ledger(m0, occupancy):
    enumerate_sequences(m0, (A, ))
    exact_argmax_likelihood(m0, (A, ))
    exact_argmax_metric(m0, (A, ), occupancy)
    assert m0.ledger.evaluations == 0


@pytest.mark.parametrize(
    "max_len,expected", [
        (2, (A, A)),
        (3, (EOS, )),
    ],
)
def test_argmax_likelihood_m0(m0, max_len, expected):
    assert exact_argmax_likelihood(m0, (A, ), max_len=max_len).sequence == expected


@pytest.mark.parametrize(
    "seed", range(8),
)
def test_branch_and_bound_matches_enumeration(seed, seeded_model):
    model = seeded_model(seed, vocab_size=4, max_len=5, context_order=2, logit_scale=2.0)
    table = enumerate_sequences(model, (A, ))
    best_seq, best_ll = max(table, key=lambda item: item[1])
    result = exact_argmax_likelihood(model, (A, ))
    assert result.sequence == best_seq
    assert result.log_likelihood == pytest.approx(best_ll)


def test_argmax_likelihood_ties_lexicographic():
    model = TabularModel.from_prior([0.45, 0.45, 0.1], max_len=2)
    # (A, A), (A, B), (B, A) and (B, B) are equally likely
    assert exact_argmax_likelihood(model, (A, )).sequence == (A, A)


def test_likelihood_increase_is_rejected():
    model = TabularModel(
        lambda ctx: np.array([1.5, 0.0, 0.0]), vocab_size=3, max_len=2, context_order=0,
    )
    with pytest.raises(ContractViolation):
        exact_argmax_likelihood(model, (A, ))


def test_argmax_metric_occupancy(m0, occupancy):
    result = exact_argmax_metric(m0, (A, ), occupancy)
    assert result.output == (A, A, A)
    assert result.score == 1.0
    assert result.log_likelihood == pytest.approx(3 * math.log(0.5))


def test_argmax_metric_coverage_ties():
    model = TabularModel.from_prior([0.4, 0.4, 0.2], max_len=2)
    result = exact_argmax_metric(model, (A, B), Metric.coverage())
    assert result.sequence == (A, B)
    assert result.score == 1.0


def test_argmax_metric_prefers_likely_on_ties(m0):
    # every output scores 0 on an absent target; the most likely wins
    result = exact_argmax_metric(m0, (A, ), Metric.occupancy(target=7, horizon=3))
    assert result.score == 0.0
    assert result.sequence == (EOS, )


@pytest.mark.parametrize(
    "seed", range(4),
)
def test_argmax_metric_dominates(seed, seeded_model, occupancy):
    model = seeded_model(seed, vocab_size=3, max_len=4)
    best = exact_argmax_metric(model, (A, ), occupancy)
    for seq, _ in enumerate_sequences(model, (A, )):
        output = seq[:-1] if seq and seq[-1] == model.eos_id else seq
        assert occupancy.score(output, source=(A, )) <= best.score
