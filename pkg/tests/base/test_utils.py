import numpy as np
import pytest

from mcts_decode.base.utils import (
    argmax_lowest,
    check_probability_vector,
    derive_seed,
    seed_sequence,
)


@pytest.mark.parametrize(
    "values, mask, expected", [
        ([0.1, 0.5, 0.5], None, 1),
        ([2, 2, 2], None, 0),
        ([0.9, 0.5, 0.5], [False, True, True], 1),
        ([0.9, 0.5, 0.7], [False, True, True], 2),
        ([0.9, 0.5], [False, False], -1),
        ([-np.inf, -1.0], None, 1),
    ],
)
def test_argmax_lowest(values, mask, expected):
    assert argmax_lowest(values, mask) == expected


def test_derive_seed_is_stable():
    assert derive_seed(3, "cell", 10) == derive_seed(3, "cell", 10)
    assert derive_seed(3, "cell", 10) != derive_seed(3, "cell", 11)
    assert 0 <= derive_seed("x") < 2**63


def test_seed_sequence_keys():
    def draw(*keys):
        return np.random.default_rng(seed_sequence(0, *keys)).random()

    assert draw(1, 2) == draw(1, 2)
    assert draw(1, 2) != draw(2, 1)
    # the number of keys is part of the entropy
    assert draw(1) != draw(1, 0)


def test_check_probability_vector():
    prior = check_probability_vector([0.5, 0.3, 0.2])
    assert prior.dtype == np.float64


@pytest.mark.parametrize(
    "prior", [
        [],
        [[0.5, 0.5]],
        [0.5, 0.6],
        [1.5, -0.5],
        [np.nan, 1.0],
    ],
)
def test_check_probability_vector_invalid(prior):
    with pytest.raises(ValueError):
        check_probability_vector(prior)
