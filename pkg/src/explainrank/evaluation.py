"""Ranking metrics, significance testing and the evaluation report.

Two readings of precision/recall at k are reported side by side:

* exact: a gold fact only counts when predicted at its own gold position
* set: any gold fact inside the top k counts
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy import special

from .corpus import QaInstance
from .ranking import RankedExplanation

logger = logging.getLogger(__name__)

K_GRID = tuple(range(2, 51, 2))


def average_precision(ranked: Sequence[str], gold: Iterable[str]) -> float:
    """Mean over gold facts of the precision at the rank where each is found."""
    gold = set(gold)
    if not gold:
        raise ValueError("average precision needs a non-empty gold set")
    hits = 0
    total = 0.0
    for pos, fid in enumerate(ranked, 1):
        if fid in gold:
            hits += 1
            total += hits / pos
            if hits == len(gold):
                break
    return total / len(gold)


def mean_ap(aps: Iterable[float]) -> float:
    aps = list(aps)
    if not aps:
        raise ValueError("mean_ap needs at least one value")
    return float(math.fsum(aps) / len(aps))


def pr_at_k_exact(ranked: Sequence[str], gold: Sequence[str], k: int) -> tuple[float, float]:
    if k < 1:
        raise ValueError("k must be >= 1")
    m = min(k, len(gold), len(ranked))
    hits = sum(1 for i in range(m) if ranked[i] == gold[i])
    return hits / k, hits / len(gold)


def pr_at_k_set(ranked: Sequence[str], gold: Iterable[str], k: int) -> tuple[float, float]:
    if k < 1:
        raise ValueError("k must be >= 1")
    gold = set(gold)
    hits = len(gold.intersection(ranked[:k]))
    return hits / k, hits / len(gold)


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired t-test on per-instance scores; returns (t, p)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("paired_t_test needs two equal-length sequences of at least 2 values")
    d = a - b
    n = d.size
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            raise ValueError("zero variance: all paired differences are zero")
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    df = n - 1
    # two-sided tail of Student's t through the regularized incomplete beta
    p = float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))
    return t, min(1.0, p)


@dataclass
class EvalReport:
    ap: dict[str, float]
    map: float
    exact_precision: dict[int, float]
    exact_recall: dict[int, float]
    set_precision: dict[int, float]
    set_recall: dict[int, float]
    map_by_length: dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        def keyed(d):
            return {str(k): v for k, v in d.items()}

        return {
            "map": self.map,
            "ap": self.ap,
            "exact_precision": keyed(self.exact_precision),
            "exact_recall": keyed(self.exact_recall),
            "set_precision": keyed(self.set_precision),
            "set_recall": keyed(self.set_recall),
            "map_by_length": keyed(self.map_by_length),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        def ints(x):
            return {int(k): float(v) for k, v in x.items()}

        return cls(
            {k: float(v) for k, v in d["ap"].items()},
            float(d["map"]),
            ints(d["exact_precision"]),
            ints(d["exact_recall"]),
            ints(d["set_precision"]),
            ints(d["set_recall"]),
            ints(d.get("map_by_length", {})),
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))

    def curves_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "exact_precision", "exact_recall", "set_precision", "set_recall"])
        for k in sorted(self.exact_precision):
            w.writerow([k] + [f"{v:.6f}" for v in (
                self.exact_precision[k], self.exact_recall[k], self.set_precision[k], self.set_recall[k]
            )])
        return buf.getvalue()

    def by_length_csv(self) -> str:
        return map_by_length_csv(self.map_by_length)


def map_by_length(aps: Mapping[str, float], lengths: Mapping[str, int]) -> dict[int, float]:
    """mAP per gold-explanation length, keys ascending."""
    buckets: dict[int, list[float]] = {}
    for qa_id, ap in aps.items():
        buckets.setdefault(int(lengths[qa_id]), []).append(ap)
    return {n: mean_ap(v) for n, v in sorted(buckets.items())}


def map_by_length_csv(table: Mapping[int, float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["length", "map"])
    for n, v in sorted(table.items()):
        w.writerow([n, f"{v:.6f}"])
    return buf.getvalue()


def evaluate(
    rankings: Mapping[str, RankedExplanation],
    instances: Sequence[QaInstance],
    k_grid: Sequence[int] = K_GRID,
) -> EvalReport:
    """Score predicted rankings against every annotated instance."""
    annotated = [qa for qa in instances if qa.gold is not None]
    if not annotated:
        raise ValueError("no annotated instances to evaluate")
    missing = [qa.qa_id for qa in annotated if qa.qa_id not in rankings]
    if missing:
        raise KeyError(f"no predicted ranking for {len(missing)} instances, e.g. {missing[:3]}")
    aps: dict[str, float] = {}
    sums = {key: np.zeros(len(k_grid)) for key in ("ep", "er", "sp", "sr")}
    for qa in annotated:
        ranked = rankings[qa.qa_id].fact_ids
        gold = qa.gold.fact_ids
        aps[qa.qa_id] = average_precision(ranked, gold)
        for j, k in enumerate(k_grid):
            ep, er = pr_at_k_exact(ranked, gold, k)
            sp_, sr = pr_at_k_set(ranked, gold, k)
            sums["ep"][j] += ep
            sums["er"][j] += er
            sums["sp"][j] += sp_
            sums["sr"][j] += sr
    n = len(annotated)

    def curve(key):
        return {int(k): float(sums[key][j] / n) for j, k in enumerate(k_grid)}

    return EvalReport(
        ap=aps,
        map=mean_ap(aps.values()),
        exact_precision=curve("ep"),
        exact_recall=curve("er"),
        set_precision=curve("sp"),
        set_recall=curve("sr"),
        map_by_length=map_by_length(aps, {qa.qa_id: len(qa.gold) for qa in annotated}),
    )


@dataclass(frozen=True)
class AblationRow:
    groups: tuple[str, ...]
    learner: str
    dev_map: float
    test_map: Optional[float] = None

    @property
    def label(self) -> str:
        return "+".join(self.groups)


def ablation_run(
    base: Sequence[str],
    addons: Sequence[str],
    learners: Sequence[str],
    run: Callable[[tuple[str, ...], str], tuple[float, Optional[float]]],
) -> list[AblationRow]:
    """Base groups alone, then base plus each addon group in turn, for every learner.

    ``run(groups, learner)`` trains and returns (dev mAP, test mAP or None).
    """
    rows = []
    sets = [tuple(base)] + [tuple(base) + (g,) for g in addons if g not in base]
    for groups in sets:
        for learner in learners:
            dev, test = run(groups, learner)
            logger.info("ablation %s / %s: dev %.4f", "+".join(groups), learner, dev)
            rows.append(AblationRow(groups, learner, float(dev), None if test is None else float(test)))
    return rows


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["groups", "learner", "dev_map", "test_map"])
    for r in rows:
        w.writerow([r.label, r.learner, f"{r.dev_map:.6f}", "" if r.test_map is None else f"{r.test_map:.6f}"])
    return buf.getvalue()
