"""Sequence-level metrics used as terminal rewards.

Includes corpus BLEU, a BERTScore-style greedy alignment score over
pluggable token embeddings (against the reference, or against the source
for the multilingual variant), and two small metrics for which exact
oracles are cheap to compute.

All metrics return scores in [0, 1].
"""
from __future__ import annotations

import math
import typing
from collections import Counter
from functools import lru_cache
from typing import Callable, Literal, NamedTuple

import numba
import numpy as np
from scipy.spatial.distance import cdist

from mcts_decode.base.mdp import Sequence, clamp_score
from mcts_decode.base.utils import ConfigurationError, seed_sequence


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) + 1 - n))


def bleu(
    candidates: typing.Sequence[Sequence],
    references: typing.Sequence[Sequence],
    max_n: int = 4,
) -> float:
    """Corpus-level BLEU without smoothing.

    The geometric mean of the clipped n-gram precisions for n = 1..max_n,
    multiplied by the brevity penalty ``exp(min(0, 1 - r/c))`` with total
    reference length r and total candidate length c. A zero precision
    gives a score of zero.

    Parameters
    ----------
    candidates
        One token sequence per corpus item
    references
        One reference sequence per corpus item
    max_n
        Largest n-gram order

    Examples
    --------
    >>> bleu([(1, 2, 3, 4)], [(1, 2, 3, 4)])
    1.0
    >>> round(bleu([(0,) * 7], [(0, 1, 2, 3, 0, 4)], max_n=1), 6)
    0.285714
    """
    if len(candidates) != len(references):
        raise ValueError(
            f"got {len(candidates)} candidates but {len(references)} references"
        )
    if len(candidates) == 0:
        raise ValueError("cannot compute BLEU of an empty corpus")
    if max_n < 1:
        raise ValueError(f"max_n must be >= 1, got {max_n}")

    clipped = [0] * max_n
    totals = [0] * max_n
    c_len = 0
    r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            cand_counts = _ngrams(cand, n)
            ref_counts = _ngrams(ref, n)
            clipped[n - 1] += sum(
                min(count, ref_counts[gram]) for gram, count in cand_counts.items()
            )
            totals[n - 1] += sum(cand_counts.values())

    if c_len == 0 or any(c == 0 for c in clipped):
        return 0.0
    log_precision = math.fsum(
        math.log(c / t) for c, t in zip(clipped, totals)
    ) / max_n
    brevity_penalty = math.exp(min(0.0, 1.0 - r_len / c_len))
    return clamp_score(brevity_penalty * math.exp(log_precision))


class EmbeddingProvider:
    """Maps token ids to vectors of a fixed dimension."""

    dim: int

    def embed(self, tokens: Sequence) -> np.ndarray:
        """Return an array of shape ``(len(tokens), dim)``."""
        raise NotImplementedError()


class SeededEmbeddings(EmbeddingProvider):
    """Deterministic random unit vectors, one per token id.

    The vector of a token only depends on `seed` and the token id, so any
    vocabulary size is supported.
    """

    def __init__(self, seed: int = 0, dim: int = 16):
        if dim < 1:
            raise ValueError(f"dim must be positive, got {dim}")
        self.seed = int(seed)
        self.dim = int(dim)

    def embed(self, tokens: Sequence) -> np.ndarray:
        if len(tokens) == 0:
            return np.zeros((0, self.dim))
        return np.stack([_seeded_vector(self.seed, self.dim, t) for t in tokens])


@lru_cache(maxsize=65536)
def _seeded_vector(seed: int, dim: int, token: int) -> np.ndarray:
    rng = np.random.default_rng(seed_sequence(seed, dim, token))
    vec = rng.normal(size=dim)
    vec /= np.linalg.norm(vec)
    vec.setflags(write=False)
    return vec


class TableEmbeddings(EmbeddingProvider):
    """Embeddings looked up in an explicit ``(V, dim)`` table."""

    def __init__(self, table: np.ndarray):
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != 2 or not np.isfinite(table).all():
            raise ValueError("embedding table must be a finite 2D array")
        self.table = table
        self.dim = table.shape[1]

    def embed(self, tokens: Sequence) -> np.ndarray:
        return self.table[np.asarray(tokens, dtype=np.int64)].reshape((-1, self.dim))


def cosine_similarities(candidate_emb: np.ndarray, anchor_emb: np.ndarray) -> np.ndarray:
    """All pairwise cosine similarities, zero for zero-norm vectors."""
    sim = 1.0 - cdist(candidate_emb, anchor_emb, metric="cosine")
    return np.clip(np.nan_to_num(sim, nan=0.0), -1.0, 1.0)


@numba.njit(cache=True)
def _greedy_alignment_mean(sim):
    n, m = sim.shape
    k = min(n, m)
    row_used = np.zeros(n, dtype=np.bool_)
    col_used = np.zeros(m, dtype=np.bool_)
    total = 0.0
    for _ in range(k):
        best = -np.inf
        bi = -1
        bj = -1
        for i in range(n):
            if row_used[i]:
                continue
            for j in range(m):
                if col_used[j]:
                    continue
                if sim[i, j] > best:
                    best = sim[i, j]
                    bi = i
                    bj = j
        row_used[bi] = True
        col_used[bj] = True
        total += best
    return total / k


def bert_style_score(
    candidate: Sequence,
    anchor: Sequence,
    embedder: EmbeddingProvider,
    *,
    matching: Literal["greedy", "max"] = "greedy",
) -> float:
    """Embedding alignment score between `candidate` and `anchor`.

    With ``matching="greedy"`` the tokens are aligned one-to-one by
    repeatedly taking the most similar unmatched pair; the mean similarity
    of the aligned pairs is mapped from [-1, 1] to [0, 1] and multiplied
    by ``min(len)/max(len)``.

    ``matching="max"`` is the many-to-one F1 of the usual BERTScore:
    precision and recall are the means of the row and column maxima,
    each mapped to [0, 1] before taking their harmonic mean.

    Use the reference as `anchor` for the monolingual score and the source
    for the multilingual one.

    Parameters
    ----------
    candidate, anchor
        Token sequences; an empty one gives 0.0
    embedder
        Provides one vector per token
    matching
        'greedy' or 'max'

    Examples
    --------
    >>> emb = TableEmbeddings(np.eye(2))
    >>> bert_style_score((0,), (1,), emb)
    0.5
    >>> bert_style_score((0, 1), (1, 0), emb)
    1.0
    """
    if len(candidate) == 0 or len(anchor) == 0:
        return 0.0
    sim = cosine_similarities(embedder.embed(candidate), embedder.embed(anchor))
    if matching == "greedy":
        mean_sim = _greedy_alignment_mean(sim)
        length_penalty = min(len(candidate), len(anchor)) / max(len(candidate), len(anchor))
        return clamp_score((mean_sim + 1.0) / 2.0 * length_penalty)
    elif matching == "max":
        precision = (sim.max(axis=1).mean() + 1.0) / 2.0
        recall = (sim.max(axis=0).mean() + 1.0) / 2.0
        if precision + recall == 0:
            return 0.0
        return clamp_score(2 * precision * recall / (precision + recall))
    raise ValueError(f"unknown matching {matching}")


def toy_occupancy(candidate: Sequence, target: int, horizon: int) -> float:
    """Fraction of `horizon` filled with the `target` token.

    >>> toy_occupancy((1, 0), target=0, horizon=3)
    0.3333333333333333
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    return clamp_score(sum(1 for t in candidate if t == target) / horizon)


def toy_coverage(candidate: Sequence, source: Sequence) -> float:
    """Fraction of distinct source tokens that appear in `candidate`.

    >>> toy_coverage((0, 0, 0), (0, 1))
    0.5
    """
    distinct_source = set(source)
    if not distinct_source:
        raise ValueError("coverage needs a non-empty source")
    return clamp_score(len(distinct_source & set(candidate)) / len(distinct_source))


class Metric(NamedTuple):
    """A scoring function tagged with whether it needs a reference.

    `fn` receives the candidate output and the anchor: the reference for
    privileged metrics, the source for unprivileged ones.
    """

    name: str
    privileged: bool
    fn: Callable[[Sequence, Sequence], float]

    @property
    def kind(self) -> str:
        return "privileged" if self.privileged else "unprivileged"

    def score(
        self,
        candidate: Sequence,
        *,
        source: Sequence,
        reference: Sequence | None = None,
    ) -> float:
        """Score `candidate`, clamped to [0, 1]."""
        if self.privileged:
            if reference is None:
                raise ConfigurationError(
                    f"metric {self.name!r} is privileged and needs a reference"
                )
            anchor = tuple(reference)
        else:
            anchor = tuple(source)
        return clamp_score(self.fn(tuple(candidate), anchor))

    @classmethod
    def bleu(cls, max_n: int = 4) -> Metric:
        """Sentence-level BLEU against the reference."""
        def _fn(cand, ref):
            return bleu([cand], [ref], max_n=max_n)
        return cls(name="bleu", privileged=True, fn=_fn)

    @classmethod
    def bert_score(
        cls,
        embedder: EmbeddingProvider,
        matching: Literal["greedy", "max"] = "greedy",
    ) -> Metric:
        """Alignment score against the reference."""
        def _fn(cand, ref):
            return bert_style_score(cand, ref, embedder, matching=matching)
        return cls(name="bert", privileged=True, fn=_fn)

    @classmethod
    def multilingual_bert_score(
        cls,
        embedder: EmbeddingProvider,
        matching: Literal["greedy", "max"] = "greedy",
    ) -> Metric:
        """Alignment score against the source."""
        def _fn(cand, src):
            return bert_style_score(cand, src, embedder, matching=matching)
        return cls(name="mlbert", privileged=False, fn=_fn)

    @classmethod
    def occupancy(cls, target: int, horizon: int) -> Metric:
        if horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {horizon}")

        def _fn(cand, src):
            return toy_occupancy(cand, target=target, horizon=horizon)
        return cls(name="occupancy", privileged=False, fn=_fn)

    @classmethod
    def coverage(cls) -> Metric:
        def _fn(cand, src):
            return toy_coverage(cand, src)
        return cls(name="coverage", privileged=False, fn=_fn)
