"""Export search trees as Graphviz DOT graphs."""
from __future__ import annotations

import logging
import os

from mcts_decode.base.mcts import TreeSnapshot

log = logging.getLogger(__name__)


def _token_label(token: int, eos_id: int | None) -> str:
    if token < 0:
        return "root"
    if token == eos_id:
        return "EOS"
    return str(token)


def tree_to_dot(snapshot: TreeSnapshot, *, eos_id: int | None = None) -> str:
    """DOT source of a search tree.

    Nodes appear in creation order and are labeled with the token of the
    incoming edge, the visit count and the aggregated value; edges are
    labeled with the stored (tempered, truncated) prior.
    """
    lines = ["digraph search {", '  node [shape=box, fontname="monospace"];']
    for i in range(snapshot.num_nodes):
        label = "\\n".join([
            _token_label(int(snapshot.tokens[i]), eos_id),
            f"N={int(snapshot.visit_counts[i])}",
            f"V={snapshot.values[i]:.4f}",
        ])
        style = ", style=dashed" if snapshot.is_terminal[i] else ""
        lines.append(f'  n{i} [label="{label}"{style}];')
    for i in range(1, snapshot.num_nodes):
        lines.append(
            f'  n{int(snapshot.parents[i])} -> n{i} '
            f'[label="{snapshot.edge_priors[i]:.4f}"];'
        )
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_tree(
    snapshot: TreeSnapshot,
    path: str | os.PathLike,
    *,
    eos_id: int | None = None,
) -> None:
    """Write the DOT graph of `snapshot` to `path`."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(tree_to_dot(snapshot, eos_id=eos_id))
    log.info("wrote tree with %d nodes to %s", snapshot.num_nodes, path)
