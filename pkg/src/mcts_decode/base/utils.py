"""Shared helpers: error types, seed derivation and deterministic argmax."""
from __future__ import annotations

import hashlib
from typing import Any

import numpy as np
import numpy.typing as npt

# Upper bound on the number of terminated sequences an oracle will enumerate.
ENUMERATION_LIMIT = 10**6


class ConfigurationError(ValueError):
    """An invalid or incompatible configuration was requested."""


class ContractViolation(ValueError):
    """A documented precondition of an operation was broken by the caller."""


class EnumerationLimitError(ValueError):
    """An exact oracle refused an instance that is too large to enumerate."""


def derive_seed(*parts: Any) -> int:
    """Derive a stable 63-bit seed from arbitrary printable parts.

    The result only depends on the string representation of `parts`, so
    it is stable across processes and Python versions (unlike :func:`hash`).

    >>> derive_seed(0, "a") == derive_seed(0, "a")
    True
    >>> derive_seed(0, "a") == derive_seed(0, "b")
    False
    """
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(repr(part).encode("utf8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little") >> 1


def seed_sequence(seed: int, *keys: int) -> np.random.SeedSequence:
    """Seed sequence keyed by a base seed and a tuple of non-negative ints."""
    return np.random.SeedSequence([int(seed), len(keys), *(int(k) for k in keys)])


def argmax_lowest(values: npt.ArrayLike, mask: npt.ArrayLike | None = None) -> int:
    """Index of the maximum, ties broken by the lowest index.

    Entries where `mask` is False are never selected. Returns -1 if the
    mask excludes every entry.
    """
    values = np.asarray(values, dtype=np.float64)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            return -1
        values = np.where(mask, values, -np.inf)
    # np.argmax returns the first occurrence of the maximum
    return int(np.argmax(values))


def check_probability_vector(prior: npt.ArrayLike, atol: float = 1e-9) -> np.ndarray:
    """Validate and return `prior` as a float64 array."""
    prior = np.asarray(prior, dtype=np.float64)
    if prior.ndim != 1 or prior.size == 0:
        raise ValueError(f"prior must be a non-empty vector, got shape {prior.shape}")
    if np.any(prior < 0) or not np.isfinite(prior).all():
        raise ValueError(f"prior must be finite and non-negative, got {prior}")
    if abs(prior.sum() - 1.0) > atol:
        raise ValueError(f"prior must sum to 1, sums to {prior.sum()!r}")
    return prior
