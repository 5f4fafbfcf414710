"""Global test configuration.

Use this file to define fixtures to use
in both doctests and regular tests.
"""
import numpy as np
import pytest

from mcts_decode.base.models import TabularModel, make_seeded_model
from mcts_decode.base.scoring import Metric

# token ids of the three-token fixture model
A, B, EOS = 0, 1, 2


@pytest.fixture
def m0():
    """Prefix-independent model with prior [0.5, 0.3, 0.2] over {A, B, EOS}."""
    return TabularModel.from_prior([0.5, 0.3, 0.2], max_len=3)


@pytest.fixture
def occupancy():
    return Metric.occupancy(target=A, horizon=3)


@pytest.fixture
def m0_occupancy(m0, occupancy):
    """M0 with its value head scoring greedy completions by occupancy of A."""
    return m0.with_value(occupancy)


@pytest.fixture
def seeded_model():
    def _make(seed, vocab_size=3, max_len=4, context_order=1, **kwargs):
        return make_seeded_model(seed, vocab_size, max_len, context_order, **kwargs)
    return _make


@pytest.fixture(autouse=True)
def auto_namespace(doctest_namespace):
    doctest_namespace["np"] = np
    doctest_namespace["TabularModel"] = TabularModel
