"""Experiment reports: per-instance entries, aggregates and their output."""
from __future__ import annotations

import json
import logging
import math
import os
import typing
from typing import Literal, NamedTuple

import numpy as np

from mcts_decode.base.mdp import Sequence

log = logging.getLogger(__name__)


class ReportEntry(NamedTuple):
    """Result of one instance in one (algorithm, budget) cell."""

    instance_id: str
    algorithm: str
    budget: int
    output: Sequence
    score: float
    log_likelihood: float
    evaluations: int
    tokens_decoded: int

    @property
    def evaluations_per_token(self) -> float:
        if self.tokens_decoded == 0:
            return float("nan")
        return self.evaluations / self.tokens_decoded

    @classmethod
    def from_dict(cls, obj: dict) -> ReportEntry:
        return cls(**dict(obj, output=tuple(obj["output"])))

    def to_dict(self) -> dict:
        return dict(self._asdict(), output=list(self.output))


class Aggregate(NamedTuple):
    algorithm: str
    budget: int
    num_instances: int
    mean_score: float
    mean_evaluations_per_token: float
    corpus_score: float | None = None


class Report(NamedTuple):
    """All entries of an experiment, ordered by instance id.

    `corpus_scores` holds corpus-level statistics per
    (algorithm, budget) cell for metrics that have one (BLEU).
    """

    metric: str
    algorithms: tuple[str, ...]
    budgets: tuple[int, ...]
    entries: tuple[ReportEntry, ...]
    corpus_scores: tuple[tuple[str, int, float], ...] = ()

    @property
    def num_instances(self) -> int:
        return len({e.instance_id for e in self.entries})

    def cell(self, algorithm: str, budget: int) -> list[ReportEntry]:
        return [e for e in self.entries if e.algorithm == algorithm and e.budget == budget]

    def aggregates(self) -> list[Aggregate]:
        """Means over instances per cell; empty for an empty report."""
        if not self.entries:
            return []
        corpus = {(a, b): s for a, b, s in self.corpus_scores}
        result = []
        for algorithm in self.algorithms:
            for budget in self.budgets:
                entries = self.cell(algorithm, budget)
                if not entries:
                    continue
                result.append(Aggregate(
                    algorithm=algorithm,
                    budget=budget,
                    num_instances=len(entries),
                    mean_score=math.fsum(e.score for e in entries) / len(entries),
                    mean_evaluations_per_token=math.fsum(
                        e.evaluations_per_token for e in entries
                    ) / len(entries),
                    corpus_score=corpus.get((algorithm, budget)),
                ))
        return result

    def mean_scores(self) -> np.ndarray:
        """Grid of mean scores, rows are budgets and columns algorithms."""
        grid = np.full((len(self.budgets), len(self.algorithms)), np.nan)
        for agg in self.aggregates():
            grid[self.budgets.index(agg.budget), self.algorithms.index(agg.algorithm)] = (
                agg.mean_score
            )
        return grid

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "algorithms": list(self.algorithms),
            "budgets": list(self.budgets),
            "entries": [e.to_dict() for e in self.entries],
            "corpus_scores": [list(c) for c in self.corpus_scores],
            "aggregates": [agg._asdict() for agg in self.aggregates()],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> Report:
        return cls(
            metric=obj["metric"],
            algorithms=tuple(obj["algorithms"]),
            budgets=tuple(obj["budgets"]),
            entries=tuple(ReportEntry.from_dict(e) for e in obj["entries"]),
            corpus_scores=tuple(tuple(c) for c in obj.get("corpus_scores", [])),
        )


def format_table(report: Report) -> str:
    """Mean scores as a text grid: one row per budget, one column per algorithm.

    Scores are rendered with four decimals, empty cells as ``-``.
    """
    header = ["budget"] + list(report.algorithms)
    rows = [header]
    grid = report.mean_scores()
    for i, budget in enumerate(report.budgets):
        rows.append([str(budget)] + [
            "-" if np.isnan(v) else f"{v:.4f}" for v in grid[i]
        ])
    widths = [max(len(row[j]) for row in rows) for j in range(len(header))]
    lines = [
        "  ".join(cell.rjust(width) for cell, width in zip(row, widths))
        for row in rows
    ]
    return "\n".join(lines) + "\n"


def dumps_report(report: Report) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"


def emit_report(
    report: Report,
    path: str | os.PathLike,
    format: Literal["json", "table"] = "json",
) -> None:
    """Write `report` as JSON or as a text table."""
    if format == "json":
        text = dumps_report(report)
    elif format == "table":
        text = format_table(report)
    else:
        raise ValueError(f"unknown report format {format}")
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    log.info("wrote %s report to %s", format, path)


def load_report(path: str | os.PathLike) -> Report:
    with open(path, encoding="utf-8") as f:
        return Report.from_dict(json.load(f))


def plot_scaling(
    report: Report,
    path: str | os.PathLike,
    *,
    algorithms: typing.Sequence[str] | None = None,
) -> None:
    """Save a figure of mean score against budget, one line per algorithm."""
    from matplotlib.figure import Figure

    fig = Figure(figsize=(6, 4))
    ax = fig.add_subplot(1, 1, 1)
    grid = report.mean_scores()
    for j, algorithm in enumerate(report.algorithms):
        if algorithms is not None and algorithm not in algorithms:
            continue
        ax.plot(report.budgets, grid[:, j], marker="o", label=algorithm)
    ax.set_xscale("log")
    ax.set_xlabel("budget")
    ax.set_ylabel(f"mean {report.metric}")
    ax.legend()
    fig.savefig(path)
    log.info("wrote scaling figure to %s", path)
