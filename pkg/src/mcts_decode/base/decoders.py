"""Non-tree decoders: greedy, beam search, value-guided beam search,
ancestral sampling and reranking of sampled pools.

All decoders return :class:`Candidate` records holding the terminal
:class:`~mcts_decode.base.mdp.DecodeState` and the untempered
log-likelihood of the sequence under the generating model. Model
evaluations are charged by the model itself; the decoders count decoding
steps on the same ledger.
"""
from __future__ import annotations

import logging
import math
import time
import typing
from dataclasses import dataclass
from typing import Literal, NamedTuple

import numpy as np

from mcts_decode.base.mdp import DecodeState, Sequence
from mcts_decode.base.models import Model, ModelState, ValueFunction, apply_temperature
from mcts_decode.base.utils import ConfigurationError, ContractViolation, argmax_lowest

if typing.TYPE_CHECKING:
    from mcts_decode.base.scoring import Metric

log = logging.getLogger(__name__)

# keeps the log value transform away from log(0)
LOG_VALUE_EPS = 1e-12

LengthPenalty = Literal["gnmt", "average"]


def length_normalization(t: int, theta: float, kind: LengthPenalty = "gnmt") -> float:
    """Length normalization factor for a sequence of `t` emitted tokens.

    ``"gnmt"`` is ``(6 / (t + 5)) ** theta``, ``"average"`` is
    ``(1 / t) ** theta``. Both are 1 for ``t = 1``.

    >>> length_normalization(4, 1.0)
    0.6666666666666666
    """
    if t < 1:
        raise ValueError(f"length must be >= 1, got {t}")
    if kind == "gnmt":
        return (6.0 / (t + 5)) ** theta
    elif kind == "average":
        return (1.0 / t) ** theta
    raise ValueError(f"unknown length penalty {kind}")


@dataclass(frozen=True)
class BeamConfig:
    """Beam size `k`, length-normalization exponent `theta`, temperature `tau`."""

    k: int
    theta: float = 0.0
    tau: float = 1.0
    length_penalty: LengthPenalty = "gnmt"

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError(f"beam size must be >= 1, got {self.k}")
        if self.theta < 0:
            raise ConfigurationError(f"theta must be >= 0, got {self.theta}")
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if self.length_penalty not in ("gnmt", "average"):
            raise ConfigurationError(f"unknown length penalty {self.length_penalty}")

    def normalized(self, log_prob: float, t: int) -> float:
        return length_normalization(t, self.theta, self.length_penalty) * log_prob


@dataclass(frozen=True)
class VgbsConfig:
    """Configuration of value-guided beam search.

    Hypotheses are ranked by ``(alpha / t) * log_prob + (1 - alpha) * f(v)``
    where ``f`` is the identity for ``value_transform="linear"`` and
    ``log((v - value_floor) / (value_ceiling - value_floor))`` for
    ``"log"``.
    """

    k: int
    alpha: float
    tau: float = 1.0
    value_transform: Literal["linear", "log"] = "linear"
    value_floor: float = 0.0
    value_ceiling: float = 1.0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError(f"beam size must be >= 1, got {self.k}")
        if not 0 <= self.alpha <= 1:
            raise ConfigurationError(f"alpha must be in [0, 1], got {self.alpha}")
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if self.value_transform not in ("linear", "log"):
            raise ConfigurationError(f"unknown value transform {self.value_transform}")
        if not self.value_floor < self.value_ceiling:
            raise ConfigurationError(
                f"value_floor {self.value_floor} must be below "
                f"value_ceiling {self.value_ceiling}"
            )

    def transform(self, value: float) -> float:
        if self.value_transform == "linear":
            return value
        scaled = (value - self.value_floor) / (self.value_ceiling - self.value_floor)
        return math.log(max(scaled, LOG_VALUE_EPS))

    def score(self, log_prob: float, value: float, t: int) -> float:
        return (self.alpha / t) * log_prob + (1 - self.alpha) * self.transform(value)

    @property
    def evaluations_per_step(self) -> int:
        return self.k + self.k * self.k


@dataclass(frozen=True)
class SamplingConfig:
    n: int
    tau: float = 1.0
    argmax: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError(f"number of samples must be >= 1, got {self.n}")
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")


class Candidate(NamedTuple):
    """A finished decoding result.

    `score` and `value` are filled in by reranking or by the harness.
    """

    state: DecodeState
    log_likelihood: float
    score: float | None = None
    value: float | None = None

    @property
    def sequence(self) -> Sequence:
        """The emitted tokens, including a final end-of-sequence token."""
        return self.state.prefix

    @property
    def output(self) -> Sequence:
        return self.state.output

    @property
    def length(self) -> int:
        """Emitted tokens including the (possibly implicit) end token."""
        return len(self.state.output) + 1


def sequence_length(state: DecodeState) -> int:
    """Length `t` used for normalization: finished states count their end token."""
    if state.terminal:
        return len(state.output) + 1
    return len(state.prefix)


def _log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(p)


def _top_continuations(tempered: np.ndarray, k: int) -> np.ndarray:
    """Up to `k` token ids with non-zero probability, best first, lowest id on ties."""
    order = np.argsort(-tempered, kind="stable")[:k]
    return order[tempered[order] > 0]


def greedy_decode(model: Model, state: DecodeState) -> Candidate:
    """Append the most likely token until the state is terminal.

    Ties go to the lowest token id. Costs one evaluation per emitted token.
    """
    if state.terminal:
        raise ContractViolation(f"cannot decode from terminal state {state.prefix}")
    priors, _, model_states = model.evaluate_root([state])
    log_likelihood = 0.0
    current = state
    while True:
        action = argmax_lowest(priors[0])
        log_likelihood += math.log(priors[0][action])
        model.ledger.count_tokens(1)
        current = current.step(action)
        if current.terminal:
            return Candidate(state=current, log_likelihood=log_likelihood)
        priors, _, model_states, _ = model.evaluate_step(model_states, [action])


class _Hypothesis(NamedTuple):
    state: DecodeState
    log_likelihood: float
    tempered_log_likelihood: float
    # model state of the parent and the action leading here; the hypothesis
    # itself is only evaluated once it survives the beam
    parent_model_state: ModelState
    action: int
    rank_score: float = 0.0
    value: float | None = None


def _evaluate_survivors(model, live, pad_to=None):
    model_states = [h.parent_model_state for h in live]
    actions = [h.action for h in live]
    if pad_to is not None and len(live) < pad_to:
        model_states += [model_states[-1]] * (pad_to - len(live))
        actions += [actions[-1]] * (pad_to - len(live))
    priors, _, next_states, _ = model.evaluate_step(model_states, actions)
    return priors[:len(live)], next_states[:len(live)]


def _expand(hyp_states, priors, live, k, tau):
    proposals = []
    for hyp, model_state, prior in zip(live, hyp_states, priors):
        tempered = apply_temperature(prior, tau)
        log_prior = _log(prior)
        log_tempered = _log(tempered)
        for action in _top_continuations(tempered, k):
            action = int(action)
            proposals.append(_Hypothesis(
                state=hyp.state.step(action),
                log_likelihood=hyp.log_likelihood + float(log_prior[action]),
                tempered_log_likelihood=(
                    hyp.tempered_log_likelihood + float(log_tempered[action])
                ),
                parent_model_state=model_state,
                action=action,
            ))
    return proposals


def _rank(pool: list[_Hypothesis], k: int) -> list[_Hypothesis]:
    return sorted(pool, key=lambda h: (-h.rank_score, h.state.prefix))[:k]


def beam_search(model: Model, state: DecodeState, cfg: BeamConfig) -> Candidate:
    """Length-normalized beam search.

    Each live prefix proposes its top-k tempered continuations; the live
    proposals and the finished hypotheses compete under
    ``length_normalization(t) * log_prob`` and the best k survive. Finished
    hypotheses are never expanded. The search stops once no live
    hypothesis is left; the best finished one is returned.

    Examples
    --------
    >>> m0 = TabularModel.from_prior([0.5, 0.3, 0.2], max_len=3)
    >>> beam_search(m0, m0.initial_state([0]), BeamConfig(k=8)).output
    ()
    >>> beam_search(m0, m0.initial_state([0]), BeamConfig(k=8, theta=1)).output
    (0, 0, 0)
    """
    if state.terminal:
        raise ContractViolation(f"cannot decode from terminal state {state.prefix}")
    t0 = time.perf_counter()
    priors, _, model_states = model.evaluate_root([state])
    live = [_Hypothesis(state, 0.0, 0.0, None, -1)]
    finished: list[_Hypothesis] = []
    steps = 0
    while live:
        model.ledger.count_tokens(1)
        steps += 1
        proposals = [
            h._replace(rank_score=cfg.normalized(
                h.tempered_log_likelihood, sequence_length(h.state),
            ))
            for h in _expand(model_states, priors, live, cfg.k, cfg.tau)
        ]
        beam = _rank(proposals + finished, cfg.k)
        finished = [h for h in beam if h.state.terminal]
        live = [h for h in beam if not h.state.terminal]
        if live:
            priors, model_states = _evaluate_survivors(model, live)
    best = finished[0]
    log.debug("beam search k=%d: %d steps in %.3fs", cfg.k, steps, time.perf_counter() - t0)
    return Candidate(state=best.state, log_likelihood=best.log_likelihood)


def value_guided_beam_search(
    model: Model,
    value_fn: ValueFunction,
    state: DecodeState,
    cfg: VgbsConfig,
) -> Candidate:
    """Beam search ranked by a mix of likelihood and value.

    Every proposal is scored with the value of its post-action state.
    Batches have a fixed shape of k policy slots and k² value slots per
    step, padded with repeats, so a model-backed `value_fn` costs exactly
    ``k + k²`` evaluations per step.

    The returned candidate carries the value of its terminal state.
    """
    if state.terminal:
        raise ContractViolation(f"cannot decode from terminal state {state.prefix}")
    k = cfg.k
    t0 = time.perf_counter()
    priors, _, model_states = model.evaluate_root([state] * k)
    priors, model_states = priors[:1], model_states[:1]
    live = [_Hypothesis(state, 0.0, 0.0, None, -1)]
    finished: list[_Hypothesis] = []
    steps = 0
    while live:
        model.ledger.count_tokens(1)
        steps += 1
        proposals = _expand(model_states, priors, live, k, cfg.tau)
        value_states = [h.state for h in proposals]
        values = value_fn(value_states + [value_states[-1]] * (k * k - len(proposals)))
        proposals = [
            h._replace(
                value=float(v),
                rank_score=cfg.score(h.tempered_log_likelihood, float(v), sequence_length(h.state)),
            )
            for h, v in zip(proposals, values)
        ]
        beam = _rank(proposals + finished, k)
        finished = [h for h in beam if h.state.terminal]
        live = [h for h in beam if not h.state.terminal]
        if live:
            priors, model_states = _evaluate_survivors(model, live, pad_to=k)
    best = finished[0]
    log.debug(
        "value guided beam search k=%d alpha=%s: %d steps in %.3fs",
        k, cfg.alpha, steps, time.perf_counter() - t0,
    )
    return Candidate(state=best.state, log_likelihood=best.log_likelihood, value=best.value)


def sample_sequences(
    model: Model,
    state: DecodeState,
    n: int,
    tau: float = 1.0,
    seed: int = 0,
    *,
    argmax: bool = False,
) -> list[Candidate]:
    """Draw `n` ancestral samples from the tempered policy.

    Sample ``i`` uses the ``i``-th child of ``SeedSequence(seed)``, so the
    pool for ``n`` is a prefix of the pool for any larger ``n``. With
    `argmax` every step takes the most likely token instead of sampling.
    Samples advance in lockstep; each lockstep position counts as one
    decoded token.
    """
    if n < 1:
        raise ValueError(f"number of samples must be >= 1, got {n}")
    if state.terminal:
        raise ContractViolation(f"cannot decode from terminal state {state.prefix}")
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]
    priors, _, model_states = model.evaluate_root([state] * n)
    states = [state] * n
    log_likelihoods = [0.0] * n
    active = list(range(n))
    while active:
        model.ledger.count_tokens(1)
        continuing = []
        continuing_states = []
        actions = []
        for row, i in enumerate(active):
            prior = priors[row]
            if argmax:
                action = argmax_lowest(prior)
            else:
                tempered = apply_temperature(prior, tau)
                action = int(rngs[i].choice(tempered.size, p=tempered))
            log_likelihoods[i] += math.log(prior[action])
            states[i] = states[i].step(action)
            if not states[i].terminal:
                continuing.append(i)
                continuing_states.append(model_states[row])
                actions.append(action)
        active = continuing
        if active:
            priors, _, model_states, _ = model.evaluate_step(continuing_states, actions)
    return [
        Candidate(state=s, log_likelihood=ll) for s, ll in zip(states, log_likelihoods)
    ]


class ByScore(NamedTuple):
    """Rerank by the metric score of each candidate."""

    metric: Metric
    reference: Sequence | None = None

    def annotate(self, candidates: list[Candidate]) -> list[Candidate]:
        if self.metric.privileged and self.reference is None:
            raise ConfigurationError(
                f"metric {self.metric.name!r} is privileged and needs a reference"
            )
        return [
            c._replace(score=self.metric.score(
                c.output, source=c.state.source, reference=self.reference,
            ))
            for c in candidates
        ]

    def key(self, candidate: Candidate) -> float:
        return candidate.score


class ByValue(NamedTuple):
    """Rerank by a value estimate of each finished candidate."""

    value_fn: ValueFunction

    def annotate(self, candidates: list[Candidate]) -> list[Candidate]:
        values = self.value_fn([c.state for c in candidates])
        return [c._replace(value=float(v)) for c, v in zip(candidates, values)]

    def key(self, candidate: Candidate) -> float:
        return candidate.value


def rerank(candidates: typing.Sequence[Candidate], by: ByScore | ByValue) -> Candidate:
    """The candidate maximizing the criterion `by`.

    Ties go to the higher log-likelihood, then to the earlier candidate in
    the pool. The returned candidate has its score or value filled in.
    """
    if len(candidates) == 0:
        raise ValueError("cannot rerank an empty candidate pool")
    annotated = by.annotate(list(candidates))
    best_index = max(
        range(len(annotated)),
        key=lambda i: (by.key(annotated[i]), annotated[i].log_likelihood, -i),
    )
    return annotated[best_index]
