"""Line-delimited JSON datasets of decoding instances."""
from __future__ import annotations

import json
import logging
import os
import typing
from typing import NamedTuple

from mcts_decode.base.mdp import Sequence, as_sequence

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    """A dataset file could not be parsed."""


class Instance(NamedTuple):
    """One source sequence to decode, with an optional reference output."""

    id: str
    source: Sequence
    reference: Sequence | None = None

    @classmethod
    def from_dict(cls, obj: dict) -> Instance:
        if not isinstance(obj, dict):
            raise ValueError(f"expected an object, got {type(obj).__name__}")
        if not isinstance(obj.get("id"), str):
            raise ValueError("field 'id' must be a string")
        if not isinstance(obj.get("source"), list):
            raise ValueError("field 'source' must be an array of integers")
        reference = obj.get("reference")
        if reference is not None and not isinstance(reference, list):
            raise ValueError("field 'reference' must be an array of integers")
        for tokens in (obj["source"], reference or []):
            if not all(isinstance(t, int) and not isinstance(t, bool) for t in tokens):
                raise ValueError("token ids must be integers")
        return cls(
            id=obj["id"],
            source=as_sequence(obj["source"]),
            reference=None if reference is None else as_sequence(reference),
        )

    def to_dict(self) -> dict:
        result = {"id": self.id, "source": list(self.source)}
        if self.reference is not None:
            result["reference"] = list(self.reference)
        return result


def parse_dataset(lines: typing.Iterable[str | bytes]) -> list[Instance]:
    """Parse one instance per non-blank line; line numbers start at 1.

    Byte lines are decoded as UTF-8.
    """
    instances = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        try:
            if isinstance(line, bytes):
                line = line.decode("utf-8")
            if not line.strip():
                continue
            instance = Instance.from_dict(json.loads(line))
        except ValueError as e:
            raise DatasetError(f"line {lineno}: {e}") from e
        if instance.id in seen:
            raise DatasetError(f"line {lineno}: duplicate instance id {instance.id!r}")
        seen.add(instance.id)
        instances.append(instance)
    return instances


def load_dataset(path: str | os.PathLike) -> list[Instance]:
    """Read a UTF-8 file with one JSON instance object per line.

    Each object has a string ``id``, an integer array ``source`` and an
    optional integer array ``reference``.
    """
    with open(path, "rb") as f:
        instances = parse_dataset(f)
    log.info("loaded %d instances from %s", len(instances), path)
    return instances


def write_dataset(instances: typing.Iterable[Instance], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for instance in instances:
            f.write(json.dumps(instance.to_dict()) + "\n")
