"""Ranked fact lists and the ``qa_id fact_id rank score`` dump format."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class RankedExplanation:
    qa_id: str
    fact_ids: tuple[str, ...]
    scores: tuple[float, ...]

    def __post_init__(self):
        if len(self.fact_ids) != len(self.scores):
            raise ValueError("fact_ids and scores must have equal length")

    def __len__(self) -> int:
        return len(self.fact_ids)

    @property
    def pairs(self) -> list[tuple[str, float]]:
        return list(zip(self.fact_ids, self.scores))

    def rank_of(self) -> dict[str, int]:
        return {fid: i for i, fid in enumerate(self.fact_ids, 1)}


def order_by_score(ids: Sequence[str], scores: np.ndarray) -> np.ndarray:
    """Indices sorting by descending score, ties broken by ascending fact id."""
    id_rank = np.empty(len(ids), dtype=np.int64)
    id_rank[np.argsort(np.asarray(ids, dtype=object), kind="stable")] = np.arange(len(ids))
    return np.lexsort((id_rank, -np.asarray(scores, dtype=np.float64)))


def write_dump(rankings: Iterable[RankedExplanation], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rankings:
            for rank, (fid, score) in enumerate(zip(r.fact_ids, r.scores), 1):
                fh.write(f"{r.qa_id}\t{fid}\t{rank}\t{score:.12g}\n")


def read_dump(path) -> "OrderedDict[str, RankedExplanation]":
    rows: "OrderedDict[str, list[tuple[int, str, float]]]" = OrderedDict()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected qa_id, fact_id, rank, score")
            qa_id, fid, rank, score = parts
            rows.setdefault(qa_id, []).append((int(rank), fid, float(score)))
    out = OrderedDict()
    for qa_id, items in rows.items():
        items.sort()
        out[qa_id] = RankedExplanation(qa_id, tuple(i[1] for i in items), tuple(i[2] for i in items))
    return out


def rank_lookup(dump: "dict[str, RankedExplanation]") -> dict[tuple[str, str], int]:
    """``(qa_id, fact_id) -> 1-based rank`` over a whole dump."""
    lookup = {}
    for qa_id, r in dump.items():
        for rank, fid in enumerate(r.fact_ids, 1):
            lookup[(qa_id, fid)] = rank
    return lookup
