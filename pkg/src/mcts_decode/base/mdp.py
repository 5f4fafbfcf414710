"""The deterministic token-level decoding MDP.

A state is a source sequence together with the output prefix built so far.
Taking an action appends a token; a state is terminal once the prefix ends
with the end-of-sequence token or has reached the maximum output length.
The reward is zero everywhere except at terminal states, where it is the
score of the finished output under a :class:`~mcts_decode.base.scoring.Metric`.
"""
from __future__ import annotations

import typing
from typing import NamedTuple

from mcts_decode.base.utils import ConfigurationError, ContractViolation

if typing.TYPE_CHECKING:
    from mcts_decode.base.scoring import Metric

TokenId = int
Sequence = tuple[int, ...]


def clamp_score(value: float) -> float:
    """Clamp `value` to the closed score interval [0, 1]."""
    return float(min(1.0, max(0.0, value)))


def as_sequence(tokens: typing.Iterable[int]) -> Sequence:
    """Convert any iterable of token ids into an immutable sequence."""
    seq = tuple(int(t) for t in tokens)
    if any(t < 0 for t in seq):
        raise ValueError(f"token ids must be non-negative, got {seq}")
    return seq


class DecodeState(NamedTuple):
    """A state of the decoding MDP.

    Build the initial state with :meth:`initial` and advance it with
    :meth:`step` (or the module level :func:`step`).

    >>> s = DecodeState.initial(source=[0, 1], max_len=2, eos_id=2)
    >>> s = s.step(0)
    >>> s.prefix, s.terminal
    ((0,), False)
    >>> s.step(2).terminal
    True
    """

    source: Sequence
    prefix: Sequence
    terminal: bool
    max_len: int
    eos_id: int

    @classmethod
    def initial(
        cls,
        source: typing.Iterable[int],
        *,
        max_len: int,
        eos_id: int,
    ) -> DecodeState:
        """The state with an empty prefix."""
        if max_len < 0:
            raise ValueError(f"max_len must be non-negative, got {max_len}")
        return cls(
            source=as_sequence(source),
            prefix=(),
            # a zero-length cap only admits the empty output
            terminal=max_len == 0,
            max_len=int(max_len),
            eos_id=int(eos_id),
        )

    @property
    def output(self) -> Sequence:
        """The prefix without the final end-of-sequence token."""
        if self.prefix and self.prefix[-1] == self.eos_id:
            return self.prefix[:-1]
        return self.prefix

    @property
    def ended_with_eos(self) -> bool:
        return bool(self.prefix) and self.prefix[-1] == self.eos_id

    def step(self, action: TokenId) -> DecodeState:
        return step(self, action)


def step(state: DecodeState, action: TokenId) -> DecodeState:
    """Append `action` to the prefix of a non-terminal state."""
    if state.terminal:
        raise ContractViolation(
            f"cannot step terminal state with prefix {state.prefix}"
        )
    action = int(action)
    if action < 0:
        raise ValueError(f"invalid token id {action}")
    prefix = state.prefix + (action,)
    terminal = action == state.eos_id or len(prefix) >= state.max_len
    return state._replace(prefix=prefix, terminal=terminal)


def terminal_reward(
    state: DecodeState,
    metric: Metric,
    reference: typing.Iterable[int] | None = None,
) -> float:
    """Score of a terminal state.

    Privileged metrics compare the output to `reference`, unprivileged
    metrics compare it to the source. The end-of-sequence token is not part
    of the scored output.
    """
    if not state.terminal:
        raise ContractViolation(
            f"reward is only defined at terminal states, prefix {state.prefix}"
        )
    if metric.privileged and reference is None:
        raise ConfigurationError(
            f"metric {metric.name!r} is privileged and needs a reference"
        )
    return metric.score(state.output, source=state.source, reference=reference)
