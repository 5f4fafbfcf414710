"""Run decoding algorithms over datasets and budget sweeps.

A :class:`RunConfig` names a synthetic model, a metric, a list of
algorithms and a list of budgets. :func:`run_experiment` decodes every
instance under every (algorithm, budget) cell with a fresh
:class:`~mcts_decode.base.models.BudgetLedger` and collects the results
in a :class:`~mcts_decode.harness.report.Report`.
"""
from __future__ import annotations

import dataclasses
import logging
import time
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Literal

from mcts_decode.base.decoders import (
    BeamConfig, ByScore, ByValue, Candidate, SamplingConfig, VgbsConfig, beam_search,
    greedy_decode, rerank, sample_sequences, value_guided_beam_search,
)
from mcts_decode.base.mcts import SearchConfig, decode_mcts
from mcts_decode.base.models import (
    BudgetLedger, Model, ModelValue, PerturbedValueModel, RolloutValue, TabularModel,
    ValueFunction, make_seeded_model,
)
from mcts_decode.base.scoring import EmbeddingProvider, Metric, SeededEmbeddings, bleu
from mcts_decode.base.utils import ConfigurationError, derive_seed
from mcts_decode.harness.dataset import Instance
from mcts_decode.harness.report import Report, ReportEntry

log = logging.getLogger(__name__)

AlgorithmKind = Literal[
    "greedy", "beam", "vgbs", "mcts", "sample_rerank", "sample_rerank_value",
]
ALGORITHM_KINDS = typing.get_args(AlgorithmKind)
METRIC_NAMES = ("bleu", "bert", "mlbert", "occupancy", "coverage")


def vgbs_beam_size(budget: int) -> int:
    """Smallest beam size k with ``k + k**2 >= budget``.

    >>> [vgbs_beam_size(n) for n in (1, 2, 6, 7, 50)]
    [1, 1, 2, 3, 7]
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    k = 1
    while k + k * k < budget:
        k += 1
    return k


@dataclass(frozen=True)
class ModelSpec:
    """A seeded tabular model, or a fixed context-free `prior` if given."""

    seed: int = 0
    vocab_size: int = 3
    max_len: int = 3
    context_order: int = 1
    value_noise: float = 0.0
    logit_scale: float = 1.0
    prior: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigurationError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.max_len < 1:
            raise ConfigurationError(f"max_len must be >= 1, got {self.max_len}")
        if self.value_noise < 0:
            raise ConfigurationError(f"value_noise must be >= 0, got {self.value_noise}")
        if self.prior is not None and len(self.prior) != self.vocab_size:
            raise ConfigurationError(
                f"prior has {len(self.prior)} entries for vocabulary size {self.vocab_size}"
            )

    def build(self, metric: Metric | None = None, reference=None) -> Model:
        """The model with its value head scoring completions under `metric`."""
        if self.prior is None:
            return make_seeded_model(
                self.seed, self.vocab_size, self.max_len, self.context_order,
                metric=metric, reference=reference, value_noise=self.value_noise,
                logit_scale=self.logit_scale,
            )
        model: Model = TabularModel.from_prior(
            self.prior, max_len=self.max_len, value_metric=metric, value_reference=reference,
        )
        if self.value_noise > 0:
            model = PerturbedValueModel(
                model, amplitude=self.value_noise,
                seed=derive_seed(self.seed, "value-noise"),
            )
        return model


@dataclass(frozen=True)
class MetricSpec:
    name: str = "occupancy"
    max_n: int = 4
    target: int = 0
    horizon: int = 3
    embedding_seed: int = 0
    embedding_dim: int = 16
    matching: Literal["greedy", "max"] = "greedy"

    def __post_init__(self):
        if self.name not in METRIC_NAMES:
            raise ConfigurationError(
                f"unknown metric {self.name}, expected one of {METRIC_NAMES}"
            )

    def embedder(self) -> EmbeddingProvider:
        return SeededEmbeddings(seed=self.embedding_seed, dim=self.embedding_dim)

    def build(self) -> Metric:
        if self.name == "bleu":
            return Metric.bleu(self.max_n)
        elif self.name == "bert":
            return Metric.bert_score(self.embedder(), self.matching)
        elif self.name == "mlbert":
            return Metric.multilingual_bert_score(self.embedder(), self.matching)
        elif self.name == "occupancy":
            return Metric.occupancy(self.target, self.horizon)
        return Metric.coverage()


@dataclass(frozen=True)
class AlgorithmSpec:
    """One decoding algorithm; the budget of a sweep cell is mapped onto it.

    Budgets map to the beam size for ``beam``, the smallest k with
    ``k + k**2 >= budget`` for ``vgbs``, the number of simulations for
    ``mcts`` and the pool size for the sampling algorithms; ``greedy``
    ignores it.
    """

    kind: AlgorithmKind
    name: str | None = None
    theta: float = 0.0
    tau: float = 1.0
    length_penalty: Literal["gnmt", "average"] = "gnmt"
    alpha: float = 0.5
    value_transform: Literal["linear", "log"] = "linear"
    # value estimate of vgbs and sample_rerank_value
    value_fn: Literal["model", "rollout"] = "model"
    # sampling takes the most likely token at every step
    argmax: bool = False
    c_puct: float = 1.0
    num_sparse_actions: int | None = None
    backup: Literal["average", "max"] = "average"
    root_selection: Literal["visit_count", "max_value"] = "visit_count"
    value_source: Literal["model", "rollout"] = "model"

    def __post_init__(self):
        if self.kind not in ALGORITHM_KINDS:
            raise ConfigurationError(
                f"unknown algorithm {self.kind}, expected one of {ALGORITHM_KINDS}"
            )
        if self.value_fn not in ("model", "rollout"):
            raise ConfigurationError(f"unknown value function {self.value_fn}")
        if self.backup not in ("average", "max"):
            raise ConfigurationError(f"unknown backup {self.backup}")

    @property
    def label(self) -> str:
        return self.name or self.kind

    @property
    def uses_metric_at_decode_time(self) -> bool:
        """Whether decoding itself scores candidates or rollouts with the metric."""
        if self.kind == "sample_rerank":
            return True
        if self.kind == "mcts":
            return self.value_source == "rollout"
        if self.kind in ("vgbs", "sample_rerank_value"):
            return self.value_fn == "rollout"
        return False

    def config_for(self, budget: int, vocab_size: int):
        if budget < 1:
            raise ConfigurationError(f"budget must be >= 1, got {budget}")
        if self.kind == "beam":
            return BeamConfig(
                k=budget, theta=self.theta, tau=self.tau, length_penalty=self.length_penalty,
            )
        elif self.kind == "vgbs":
            k = vgbs_beam_size(budget)
            if k + k * k != budget:
                log.warning(
                    "budget %d is not of the form k + k^2, using beam size %d", budget, k,
                )
            return VgbsConfig(
                k=k, alpha=self.alpha, tau=self.tau, value_transform=self.value_transform,
            )
        elif self.kind == "mcts":
            num_sparse = vocab_size if self.num_sparse_actions is None else min(
                self.num_sparse_actions, vocab_size,
            )
            return SearchConfig(
                num_simulations=budget,
                num_sparse_actions=num_sparse,
                c_puct=self.c_puct,
                tau=self.tau,
                backup=self.backup,
                root_selection=self.root_selection,
                value_source=self.value_source,
            )
        elif self.kind in ("sample_rerank", "sample_rerank_value"):
            return SamplingConfig(n=budget, tau=self.tau, argmax=self.argmax)
        return None


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec
    metric: MetricSpec
    algorithms: tuple[AlgorithmSpec, ...]
    budgets: tuple[int, ...] = (1, )
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not self.algorithms:
            raise ConfigurationError("at least one algorithm is needed")
        labels = [a.label for a in self.algorithms]
        if len(set(labels)) != len(labels):
            raise ConfigurationError(f"algorithm labels must be unique, got {labels}")
        if not self.budgets or any(b < 1 for b in self.budgets):
            raise ConfigurationError(f"budgets must be positive, got {self.budgets}")
        if len(set(self.budgets)) != len(self.budgets):
            raise ConfigurationError(f"budgets must be unique, got {self.budgets}")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")

    @classmethod
    def from_dict(cls, obj: dict) -> RunConfig:
        try:
            model = obj.get("model", {})
            if model.get("prior") is not None:
                model = dict(model, prior=tuple(model["prior"]))
            return cls(
                model=ModelSpec(**model),
                metric=MetricSpec(**obj.get("metric", {})),
                algorithms=tuple(AlgorithmSpec(**a) for a in obj["algorithms"]),
                budgets=tuple(obj.get("budgets", (1, ))),
                seed=obj.get("seed", 0),
                workers=obj.get("workers", 1),
            )
        except (KeyError, TypeError) as e:
            raise ConfigurationError(f"invalid run configuration: {e}") from e

    def to_dict(self) -> dict:
        result = dataclasses.asdict(self)
        result["algorithms"] = list(result["algorithms"])
        result["budgets"] = list(result["budgets"])
        if result["model"]["prior"] is not None:
            result["model"]["prior"] = list(result["model"]["prior"])
        return result


def check_compatibility(cfg: RunConfig, dataset: typing.Sequence[Instance]) -> None:
    """Reject algorithm/metric pairings that cannot run at decode time.

    Privileged metrics need the reference, which is not available while
    decoding unseen inputs, so no algorithm may score candidates or
    rollouts with them.
    """
    metric = cfg.metric.build()
    if not metric.privileged:
        return
    for algorithm in cfg.algorithms:
        if algorithm.uses_metric_at_decode_time:
            raise ConfigurationError(
                f"algorithm {algorithm.label!r} scores with the metric while decoding, "
                f"which is not possible for the privileged metric {metric.name!r}"
            )
    missing = [instance.id for instance in dataset if instance.reference is None]
    if missing:
        raise ConfigurationError(
            f"metric {metric.name!r} needs references, missing for instances {missing}"
        )


def cell_seed(global_seed: int, instance_id: str, algorithm: AlgorithmSpec, budget: int) -> int:
    """Seed of one (instance, algorithm, budget) cell.

    Sampling algorithms leave out the budget, so their pools nest across
    the budget axis.
    """
    if algorithm.kind in ("sample_rerank", "sample_rerank_value"):
        return derive_seed(global_seed, instance_id, algorithm.label)
    return derive_seed(global_seed, instance_id, algorithm.label, budget)


def _value_fn(algorithm, model, metric, reference) -> ValueFunction:
    if algorithm.value_fn == "rollout":
        return RolloutValue(model, metric, reference)
    return ModelValue(model)


def decode_instance(
    model: Model,
    instance: Instance,
    metric: Metric,
    algorithm: AlgorithmSpec,
    budget: int,
    seed: int,
) -> Candidate:
    """Decode one instance with one algorithm; charges `model`'s ledger."""
    state = model.initial_state(instance.source)
    config = algorithm.config_for(budget, model.vocab_size)
    # only privileged metrics are scored against the reference
    reference = instance.reference if metric.privileged else None
    if algorithm.kind == "greedy":
        return greedy_decode(model, state)
    elif algorithm.kind == "beam":
        return beam_search(model, state, config)
    elif algorithm.kind == "vgbs":
        return value_guided_beam_search(
            model, _value_fn(algorithm, model, metric, reference), state, config,
        )
    elif algorithm.kind == "mcts":
        return decode_mcts(
            model, [state], config, metric=metric, references=[reference],
        )[0]
    pool = sample_sequences(model, state, config.n, config.tau, seed, argmax=config.argmax)
    if algorithm.kind == "sample_rerank":
        return rerank(pool, ByScore(metric, reference))
    return rerank(pool, ByValue(_value_fn(algorithm, model, metric, reference)))


def _run_instance(cfg: RunConfig, metric: Metric, instance: Instance) -> list[ReportEntry]:
    base_model = cfg.model.build(metric, instance.reference if metric.privileged else None)
    entries = []
    for algorithm in cfg.algorithms:
        for budget in cfg.budgets:
            ledger = BudgetLedger()
            model = base_model.with_ledger(ledger)
            seed = cell_seed(cfg.seed, instance.id, algorithm, budget)
            candidate = decode_instance(model, instance, metric, algorithm, budget, seed)
            score = metric.score(
                candidate.output, source=instance.source, reference=instance.reference,
            )
            evaluations, tokens = ledger.snapshot()
            entries.append(ReportEntry(
                instance_id=instance.id,
                algorithm=algorithm.label,
                budget=budget,
                output=candidate.output,
                score=score,
                log_likelihood=candidate.log_likelihood,
                evaluations=evaluations,
                tokens_decoded=tokens,
            ))
    log.debug("decoded instance %s", instance.id)
    return entries


def run_experiment(cfg: RunConfig, dataset: typing.Sequence[Instance]) -> Report:
    """Decode every instance in every (algorithm, budget) cell.

    Instances are distributed over `cfg.workers` threads. Entries are
    ordered by instance id, then by algorithm and budget in configuration
    order, independent of completion order.

    Raises
    ------
    ConfigurationError
        Before any decoding, for incompatible algorithm/metric pairings
    """
    check_compatibility(cfg, dataset)
    metric = cfg.metric.build()
    t0 = time.perf_counter()
    log.info(
        "running %d algorithms x %d budgets over %d instances",
        len(cfg.algorithms), len(cfg.budgets), len(dataset),
    )
    if cfg.workers > 1 and len(dataset) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as executor:
            results = list(executor.map(
                lambda instance: _run_instance(cfg, metric, instance), dataset,
            ))
    else:
        results = [_run_instance(cfg, metric, instance) for instance in dataset]
    order = {a.label: i for i, a in enumerate(cfg.algorithms)}
    budget_order = {b: i for i, b in enumerate(cfg.budgets)}
    entries = sorted(
        (e for entries in results for e in entries),
        key=lambda e: (e.instance_id, order[e.algorithm], budget_order[e.budget]),
    )
    log.info("experiment finished in %.3fs", time.perf_counter() - t0)
    return Report(
        metric=metric.name,
        algorithms=tuple(a.label for a in cfg.algorithms),
        budgets=tuple(cfg.budgets),
        entries=tuple(entries),
        corpus_scores=_corpus_scores(cfg, dataset, entries),
    )


def _corpus_scores(cfg, dataset, entries):
    if cfg.metric.name != "bleu" or not entries:
        return ()
    references = {instance.id: instance.reference for instance in dataset}
    result = []
    for algorithm in cfg.algorithms:
        for budget in cfg.budgets:
            cell = [
                e for e in entries if e.algorithm == algorithm.label and e.budget == budget
            ]
            result.append((algorithm.label, budget, bleu(
                [e.output for e in cell],
                [references[e.instance_id] for e in cell],
                max_n=cfg.metric.max_n,
            )))
    return tuple(result)
