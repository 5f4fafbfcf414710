"""Policy/value providers for the decoders.

A provider evaluates batches of decoding states and returns, per state, a
prior over the vocabulary and a scalar value estimate. Incremental
evaluation goes through opaque model states: :meth:`Model.evaluate_root`
starts from :class:`~mcts_decode.base.mdp.DecodeState` objects and
:meth:`Model.evaluate_step` advances model states by one action each.

Every evaluated state costs one unit on the provider's
:class:`BudgetLedger`.

The tabular models in this module stand in for trained networks: their
prior only depends on the last few output tokens and is generated
reproducibly from a seed, and their value head scores a greedy completion
under a configurable metric.
"""
from __future__ import annotations

import copy
import logging
import threading
import typing
from typing import Any, Callable, NamedTuple

import numpy as np
import numpy.typing as npt
from scipy.special import softmax

from mcts_decode.base.mdp import DecodeState, Sequence, clamp_score, terminal_reward
from mcts_decode.base.utils import (
    ConfigurationError, argmax_lowest, check_probability_vector, derive_seed,
    seed_sequence,
)

if typing.TYPE_CHECKING:
    from mcts_decode.base.scoring import Metric

log = logging.getLogger(__name__)

ModelState = Any  # opaque, provider specific


class PolicyValueOutput(NamedTuple):
    """Prior over the vocabulary and value estimate of one state."""

    prior: np.ndarray
    value: float


class BudgetLedger:
    """Thread-safe count of model evaluations and decoded tokens.

    >>> ledger = BudgetLedger()
    >>> ledger.charge(6)
    >>> ledger.count_tokens(3)
    >>> ledger.per_token
    2.0
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._evaluations = 0
        self._tokens_decoded = 0

    @property
    def evaluations(self) -> int:
        return self._evaluations

    @property
    def tokens_decoded(self) -> int:
        return self._tokens_decoded

    def charge(self, n: int = 1) -> None:
        """Record `n` model evaluations."""
        if n < 0:
            raise ValueError(f"cannot charge a negative amount {n}")
        with self._lock:
            self._evaluations += int(n)

    def count_tokens(self, n: int = 1) -> None:
        """Record `n` decoding steps."""
        if n < 0:
            raise ValueError(f"cannot count a negative amount {n}")
        with self._lock:
            self._tokens_decoded += int(n)

    def snapshot(self) -> tuple[int, int]:
        with self._lock:
            return self._evaluations, self._tokens_decoded

    @property
    def per_token(self) -> float:
        """Average evaluations per decoded token, NaN before the first token."""
        evaluations, tokens = self.snapshot()
        if tokens == 0:
            return float("nan")
        return evaluations / tokens

    def __repr__(self):
        return (
            f"BudgetLedger(evaluations={self._evaluations}, "
            f"tokens_decoded={self._tokens_decoded})"
        )


def apply_temperature(prior: npt.ArrayLike, tau: float) -> np.ndarray:
    """Temper a prior: ``p**(1/tau)``, renormalized along the last axis.

    Zero entries stay zero, so one-hot priors are fixed points.

    >>> np.round(apply_temperature([0.5, 0.3, 0.2], 0.5), 4)
    array([0.6579, 0.2368, 0.1053])
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    prior = np.asarray(prior, dtype=np.float64)
    if tau == 1.0:
        return prior / prior.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        log_prior = np.log(prior)
    return softmax(log_prior / tau, axis=-1)


def one_hot(index: int, size: int) -> np.ndarray:
    result = np.zeros(size, dtype=np.float64)
    result[index] = 1.0
    return result


class Model:
    """Base class for policy/value providers."""

    vocab_size: int
    eos_id: int
    max_len: int

    @property
    def ledger(self) -> BudgetLedger:
        raise NotImplementedError()

    def with_ledger(self, ledger: BudgetLedger) -> Model:
        """A copy of this provider charging to `ledger`."""
        raise NotImplementedError()

    def evaluate_root(
        self,
        states: typing.Sequence[DecodeState],
    ) -> tuple[np.ndarray, np.ndarray, list[ModelState]]:
        """Evaluate a batch of states from scratch.

        Returns
        -------
        priors : np.ndarray
            Shape ``(B, V)``
        values : np.ndarray
            Shape ``(B,)``
        model_states : list
            One incremental handle per state
        """
        raise NotImplementedError()

    def evaluate_step(
        self,
        model_states: typing.Sequence[ModelState],
        actions: npt.ArrayLike,
    ) -> tuple[np.ndarray, np.ndarray, list[ModelState], np.ndarray]:
        """Advance each model state by one action and evaluate the result.

        Terminal states are absorbing: advancing one returns the same state.

        Returns
        -------
        priors, values, next_model_states, terminal_flags
        """
        raise NotImplementedError()

    def decode_state(self, model_state: ModelState) -> DecodeState:
        """The MDP state an incremental handle belongs to."""
        raise NotImplementedError()

    def initial_state(self, source: typing.Iterable[int]) -> DecodeState:
        return DecodeState.initial(source, max_len=self.max_len, eos_id=self.eos_id)

    def evaluate(self, state: DecodeState) -> PolicyValueOutput:
        """Evaluate a single state."""
        priors, values, _ = self.evaluate_root([state])
        return PolicyValueOutput(prior=priors[0], value=float(values[0]))


class TabularModel(Model):
    """A policy that depends on the last `context_order` output tokens.

    Priors are produced on demand by `prior_fn` from the context tuple and
    cached. Terminal states get a one-hot prior on the end-of-sequence
    token. The value head scores the greedy completion of a state under
    `value_metric` without charging the ledger, as a single network
    evaluation would; without a metric the value is zero.

    Use :meth:`from_prior`, :meth:`from_table` or :func:`make_seeded_model`
    to build one.
    """

    def __init__(
        self,
        prior_fn: Callable[[Sequence], np.ndarray],
        *,
        vocab_size: int,
        max_len: int,
        context_order: int,
        eos_id: int | None = None,
        value_metric: Metric | None = None,
        value_reference: Sequence | None = None,
        ledger: BudgetLedger | None = None,
    ):
        if vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {vocab_size}")
        if max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {max_len}")
        if context_order < 0:
            raise ValueError(f"context_order must be >= 0, got {context_order}")
        self.vocab_size = int(vocab_size)
        self.max_len = int(max_len)
        self.context_order = int(context_order)
        self.eos_id = self.vocab_size - 1 if eos_id is None else int(eos_id)
        if not 0 <= self.eos_id < self.vocab_size:
            raise ValueError(f"eos_id {self.eos_id} outside vocabulary")
        self._prior_fn = prior_fn
        self._prior_cache: dict[Sequence, np.ndarray] = {}
        self._value_cache: dict[DecodeState, float] = {}
        self.value_metric = value_metric
        self.value_reference = (
            None if value_reference is None else tuple(value_reference)
        )
        if value_metric is not None and value_metric.privileged and value_reference is None:
            raise ConfigurationError(
                f"value metric {value_metric.name!r} is privileged and needs a reference"
            )
        self._ledger = BudgetLedger() if ledger is None else ledger
        self._eos_prior = one_hot(self.eos_id, self.vocab_size)
        self._eos_prior.setflags(write=False)

    @classmethod
    def from_prior(
        cls,
        prior: npt.ArrayLike,
        *,
        max_len: int,
        eos_id: int | None = None,
        **kwargs,
    ) -> TabularModel:
        """A model with the same prior at every non-terminal state.

        >>> m0 = TabularModel.from_prior([0.5, 0.3, 0.2], max_len=3)
        >>> m0.evaluate(m0.initial_state([0, 1])).prior
        array([0.5, 0.3, 0.2])
        """
        prior = check_probability_vector(prior)
        prior.setflags(write=False)
        return cls(
            lambda ctx: prior,
            vocab_size=prior.size,
            max_len=max_len,
            context_order=0,
            eos_id=eos_id,
            **kwargs,
        )

    @classmethod
    def from_table(
        cls,
        table: dict[Sequence, npt.ArrayLike],
        *,
        context_order: int,
        max_len: int,
        eos_id: int | None = None,
        **kwargs,
    ) -> TabularModel:
        """A model with explicit priors keyed by context tuples."""
        checked = {
            tuple(ctx): check_probability_vector(p) for ctx, p in table.items()
        }
        sizes = {p.size for p in checked.values()}
        if len(sizes) != 1:
            raise ValueError(f"all priors need the same size, got sizes {sizes}")

        def _lookup(ctx):
            try:
                return checked[ctx]
            except KeyError:
                raise ConfigurationError(f"no prior for context {ctx}") from None
        return cls(
            _lookup,
            vocab_size=sizes.pop(),
            max_len=max_len,
            context_order=context_order,
            eos_id=eos_id,
            **kwargs,
        )

    @property
    def ledger(self) -> BudgetLedger:
        return self._ledger

    def with_ledger(self, ledger: BudgetLedger) -> TabularModel:
        result = copy.copy(self)
        result._ledger = ledger
        # values depend on max_len, a copy must not write into our cache
        result._value_cache = {}
        return result

    def with_value(
        self,
        metric: Metric | None,
        reference: Sequence | None = None,
    ) -> TabularModel:
        """A copy whose value head scores completions under `metric`."""
        if metric is not None and metric.privileged and reference is None:
            raise ConfigurationError(
                f"value metric {metric.name!r} is privileged and needs a reference"
            )
        result = copy.copy(self)
        result.value_metric = metric
        result.value_reference = None if reference is None else tuple(reference)
        result._value_cache = {}
        return result

    def context(self, state: DecodeState) -> Sequence:
        if self.context_order == 0:
            return ()
        return state.prefix[-self.context_order:]

    def policy(self, state: DecodeState) -> np.ndarray:
        """Prior at `state` without charging the ledger."""
        if state.terminal:
            return self._eos_prior
        ctx = self.context(state)
        prior = self._prior_cache.get(ctx)
        if prior is None:
            prior = np.asarray(self._prior_fn(ctx), dtype=np.float64)
            if prior.shape != (self.vocab_size, ):
                raise ValueError(f"prior for context {ctx} has shape {prior.shape}")
            self._prior_cache[ctx] = prior
        return prior

    def value(self, state: DecodeState) -> float:
        """Value head: score of the greedy completion of `state`, uncharged."""
        if self.value_metric is None:
            return 0.0
        cached = self._value_cache.get(state)
        if cached is not None:
            return cached
        completed = state
        while not completed.terminal:
            completed = completed.step(argmax_lowest(self.policy(completed)))
        result = terminal_reward(completed, self.value_metric, self.value_reference)
        self._value_cache[state] = result
        return result

    def _evaluate_states(self, states: typing.Sequence[DecodeState]):
        self._ledger.charge(len(states))
        priors = np.stack([self.policy(s) for s in states]) if states else np.zeros(
            (0, self.vocab_size)
        )
        values = np.array([self.value(s) for s in states], dtype=np.float64)
        return priors, values

    def evaluate_root(self, states):
        states = list(states)
        priors, values = self._evaluate_states(states)
        return priors, values, states

    def evaluate_step(self, model_states, actions):
        actions = np.asarray(actions, dtype=np.int64).reshape((-1, ))
        if len(actions) != len(model_states):
            raise ValueError(
                f"got {len(actions)} actions for {len(model_states)} model states"
            )
        next_states = []
        for state, action in zip(model_states, actions):
            if not 0 <= action < self.vocab_size:
                raise ValueError(f"action {action} outside vocabulary")
            # terminal states are absorbing
            next_states.append(state if state.terminal else state.step(int(action)))
        priors, values = self._evaluate_states(next_states)
        terminal = np.array([s.terminal for s in next_states], dtype=bool)
        return priors, values, next_states, terminal

    def decode_state(self, model_state):
        return model_state


def make_seeded_model(
    seed: int,
    vocab_size: int,
    max_len: int,
    context_order: int = 1,
    *,
    metric: Metric | None = None,
    reference: Sequence | None = None,
    value_noise: float = 0.0,
    logit_scale: float = 1.0,
    eos_id: int | None = None,
) -> Model:
    """A reproducible random tabular model.

    The prior at a state is the softmax of normal logits (scaled by
    `logit_scale`) drawn from a generator keyed by `seed` and the last
    `context_order` output tokens. With `value_noise` > 0 the value head
    is wrapped in :class:`PerturbedValueModel`.

    >>> a = make_seeded_model(7, 3, max_len=3)
    >>> b = make_seeded_model(7, 3, max_len=3)
    >>> s = a.initial_state([0])
    >>> bool((a.evaluate(s).prior == b.evaluate(s).prior).all())
    True
    """
    seed = int(seed)

    def _prior(ctx: Sequence) -> np.ndarray:
        rng = np.random.default_rng(seed_sequence(seed, vocab_size, *ctx))
        return softmax(rng.normal(size=vocab_size) * logit_scale)

    model: Model = TabularModel(
        _prior,
        vocab_size=vocab_size,
        max_len=max_len,
        context_order=context_order,
        eos_id=eos_id,
        value_metric=metric,
        value_reference=reference,
    )
    if value_noise > 0:
        model = PerturbedValueModel(
            model, amplitude=value_noise, seed=derive_seed(seed, "value-noise"),
        )
    log.debug(
        "seeded model %d: vocab_size=%d max_len=%d context_order=%d value_noise=%g",
        seed, vocab_size, max_len, context_order, value_noise,
    )
    return model


class ValueTransformModel(Model):
    """Wraps a provider and transforms the values it returns."""

    def __init__(self, inner: Model):
        self.inner = inner
        self.vocab_size = inner.vocab_size
        self.eos_id = inner.eos_id
        self.max_len = inner.max_len

    @property
    def ledger(self) -> BudgetLedger:
        return self.inner.ledger

    def with_ledger(self, ledger):
        result = copy.copy(self)
        result.inner = self.inner.with_ledger(ledger)
        return result

    def transform(self, states: list[DecodeState], values: np.ndarray) -> np.ndarray:
        raise NotImplementedError()

    def evaluate_root(self, states):
        states = list(states)
        priors, values, model_states = self.inner.evaluate_root(states)
        return priors, self.transform(states, values), model_states

    def evaluate_step(self, model_states, actions):
        priors, values, next_states, terminal = self.inner.evaluate_step(
            model_states, actions,
        )
        decoded = [self.inner.decode_state(ms) for ms in next_states]
        return priors, self.transform(decoded, values), next_states, terminal

    def decode_state(self, model_state):
        return self.inner.decode_state(model_state)

    def __getattr__(self, name):
        # delegate model specific helpers like `policy` or `with_value`
        if name == "inner":
            raise AttributeError(name)
        return getattr(self.inner, name)


class PerturbedValueModel(ValueTransformModel):
    """Adds seeded uniform noise in ``[-amplitude, amplitude]`` to values.

    The noise of a state is a function of the seed and the state, so
    incremental and from-scratch evaluation agree. Values are clamped to
    [0, 1].
    """

    def __init__(self, inner: Model, *, amplitude: float, seed: int):
        super().__init__(inner)
        if amplitude < 0:
            raise ValueError(f"amplitude must be non-negative, got {amplitude}")
        self.amplitude = float(amplitude)
        self.seed = int(seed)

    def noise(self, state: DecodeState) -> float:
        # the vocabulary size separates source and prefix tokens in the key
        rng = np.random.default_rng(seed_sequence(
            self.seed, *state.source, self.vocab_size, *state.prefix,
        ))
        return float(rng.uniform(-self.amplitude, self.amplitude))

    def transform(self, states, values):
        return np.array([
            clamp_score(v + self.noise(s)) for s, v in zip(states, values)
        ], dtype=np.float64)


class AffineValueModel(ValueTransformModel):
    """Maps values through ``scale * v + offset``."""

    def __init__(self, inner: Model, *, scale: float, offset: float):
        super().__init__(inner)
        if not scale > 0:
            raise ValueError(f"scale must be positive, got {scale}")
        self.scale = float(scale)
        self.offset = float(offset)

    def transform(self, states, values):
        return self.scale * np.asarray(values, dtype=np.float64) + self.offset


def rollout_value(
    state: DecodeState,
    model: Model,
    metric: Metric,
    reference: Sequence | None = None,
) -> float:
    """Score of the greedy completion of `state`.

    Every evaluation made while completing the prefix is charged to the
    model's ledger. A terminal state is scored as is, at no cost.
    """
    if state.terminal:
        return terminal_reward(state, metric, reference)
    priors, _, model_states = model.evaluate_root([state])
    while True:
        action = argmax_lowest(priors[0])
        current = model.decode_state(model_states[0])
        if current.step(action).terminal:
            return terminal_reward(current.step(action), metric, reference)
        priors, _, model_states, _ = model.evaluate_step(model_states, [action])


class ValueFunction:
    """Estimates the value of a batch of decoding states."""

    def __call__(self, states: typing.Sequence[DecodeState]) -> np.ndarray:
        raise NotImplementedError()


class ModelValue(ValueFunction):
    """The value head of a provider; one evaluation per state."""

    def __init__(self, model: Model):
        self.model = model

    def __call__(self, states):
        if len(states) == 0:
            return np.zeros(0)
        _, values, _ = self.model.evaluate_root(states)
        return values


class RolloutValue(ValueFunction):
    """Greedy rollouts scored by `metric`; rollout evaluations are charged."""

    def __init__(self, model: Model, metric: Metric, reference: Sequence | None = None):
        if metric.privileged and reference is None:
            raise ConfigurationError(
                f"metric {metric.name!r} is privileged and needs a reference"
            )
        self.model = model
        self.metric = metric
        self.reference = reference

    def __call__(self, states):
        return np.array([
            rollout_value(s, self.model, self.metric, self.reference) for s in states
        ], dtype=np.float64)
