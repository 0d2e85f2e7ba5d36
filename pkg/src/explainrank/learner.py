"""Rank targets, negative sampling and the two linear learners.

Both learners fit one weight vector over the shared feature space:

* pointwise: epsilon-insensitive support vector regression on the integer
  rank targets, ``1/2 |w|^2 + C sum max(0, |y - w.x - b| - eps)``
* pairwise: hinge loss on within-query difference vectors,
  ``1/2 |w|^2 + C sum max(0, 1 - l (w.d))``, no bias

Training runs dual coordinate descent (one coordinate per example or pair,
seeded visiting order) and stops once the relative duality gap drops below
``tol``. The primal objective is recorded after every epoch and the best
iterate seen so far is returned, so the recorded history never increases.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numba
import numpy as np
import scipy.sparse as sp

from .corpus import GoldExplanation, QaInstance, Tablestore
from .ranking import RankedExplanation, order_by_score
from .seeding import substream

logger = logging.getLogger(__name__)

MODES = ("pointwise", "pairwise")
MODEL_MAGIC = b"XRLM"
MODEL_VERSION = 1

DEFAULT_C_GRID = (0.005, 0.05, 0.1, 1.0, 10.0, 50.0, 100.0)
DEFAULT_NEG_GRID = (500, 600, 700, 800, 900, 1000)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# targets and sampling


@dataclass(frozen=True)
class RankTargets:
    qa_id: str
    gold: dict  # fact_id -> target >= 2; everything else is 1

    def target(self, fact_id: str) -> int:
        return self.gold.get(fact_id, 1)

    def array(self, fact_ids: Sequence[str]) -> np.ndarray:
        return np.array([self.gold.get(f, 1) for f in fact_ids], dtype=np.float64)


def assign_rank_targets(gold: GoldExplanation, store: Tablestore, qa_id: str = "") -> RankTargets:
    """Gold fact i of n (0-based) gets n + 1 - i; every other fact gets 1."""
    ids = gold.fact_ids
    missing = [f for f in ids if f not in store]
    if missing:
        raise KeyError(f"gold facts not in the tablestore: {missing}")
    n = len(ids)
    return RankTargets(qa_id, {fid: n + 1 - i for i, fid in enumerate(ids)})


def sample_negatives(qa: QaInstance, store: Tablestore, n_neg: int, seed: int) -> list[str]:
    """``n_neg`` distinct non-gold fact ids, in store order.

    The draw is a seeded permutation prefix, so a smaller ``n_neg`` always
    yields a subset of a larger one under the same seed.
    """
    gold = set(qa.gold.fact_ids) if qa.gold is not None else set()
    pool = [f.fact_id for f in store if f.fact_id not in gold]
    if not 0 <= n_neg <= len(pool):
        raise ValueError(f"n_neg={n_neg} but only {len(pool)} non-gold facts are available for {qa.qa_id}")
    rng = substream(seed, f"negatives/{qa.qa_id}")
    chosen = np.sort(rng.permutation(len(pool))[:n_neg])
    return [pool[i] for i in chosen]


# ---------------------------------------------------------------------------
# config and model


@dataclass
class TrainConfig:
    mode: str = "pointwise"
    C: float = 0.005
    epsilon: float = 0.1
    n_neg: int = 900
    seed: int = 0
    max_epochs: int = 200
    tol: float = 1e-3
    pair_cap: int = 50_000
    bias_scale: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (self.C > 0 and math.isfinite(self.C)):
            raise ValueError(f"C must be positive and finite, got {self.C}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.n_neg < 1:
            raise ValueError(f"n_neg must be >= 1, got {self.n_neg}")
        if self.max_epochs < 1 or self.tol <= 0 or self.pair_cap < 1 or self.bias_scale <= 0:
            raise ValueError("max_epochs, tol, pair_cap and bias_scale must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class LinearModel:
    w: np.ndarray
    b: float = 0.0
    mode: str = "pointwise"
    digest: str = ""
    history: list = field(default_factory=list, compare=False)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if not (np.all(np.isfinite(self.w)) and math.isfinite(self.b)):
            raise TrainingError("model has non-finite weights")

    def __eq__(self, other):
        if not isinstance(other, LinearModel):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    @property
    def n_features(self) -> int:
        return int(self.w.size)

    def decision(self, X) -> np.ndarray:
        if X.shape[1] != self.w.size:
            raise ValueError(f"feature matrix has {X.shape[1]} columns, model expects {self.w.size}")
        return np.asarray(X @ self.w).ravel() + self.b

    def to_bytes(self) -> bytes:
        header = json.dumps(
            {"n_features": self.n_features, "mode": self.mode, "digest": self.digest}, sort_keys=True
        ).encode("utf-8")
        return b"".join(
            [
                MODEL_MAGIC,
                struct.pack("<HI", MODEL_VERSION, len(header)),
                header,
                self.w.astype("<f8").tobytes(),
                struct.pack("<d", self.b),
            ]
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "LinearModel":
        if data[:4] != MODEL_MAGIC:
            raise ValueError("not a model file (bad magic)")
        version, hlen = struct.unpack_from("<HI", data, 4)
        if version != MODEL_VERSION:
            raise ValueError(f"unsupported model version {version}")
        off = 10
        header = json.loads(data[off : off + hlen].decode("utf-8"))
        off += hlen
        n = header["n_features"]
        if len(data) != off + 8 * n + 8:
            raise ValueError("model file length does not match its header")
        w = np.frombuffer(data[off : off + 8 * n], dtype="<f8").astype(np.float64)
        (b,) = struct.unpack_from("<d", data, off + 8 * n)
        return cls(w, b, header["mode"], header["digest"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "LinearModel":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# objectives in the stated (primal) form


def svr_objective(w, b, X, y, C, epsilon, bias_penalty: float = 0.0) -> float:
    r = np.asarray(y, dtype=np.float64) - (np.asarray(X @ w).ravel() + b)
    loss = np.maximum(0.0, np.abs(r) - epsilon).sum()
    return 0.5 * float(w @ w) + 0.5 * bias_penalty * b * b + C * float(loss)


def svr_subgradient(w, b, X, y, C, epsilon, bias_penalty: float = 0.0):
    r = np.asarray(y, dtype=np.float64) - (np.asarray(X @ w).ravel() + b)
    s = np.where(np.abs(r) > epsilon, np.sign(r), 0.0)
    gw = w - C * np.asarray(X.T @ s).ravel()
    gb = bias_penalty * b - C * s.sum()
    return gw, gb


def hinge_objective(w, D, labels, C) -> float:
    m = np.asarray(labels, dtype=np.float64) * np.asarray(D @ w).ravel()
    return 0.5 * float(w @ w) + C * float(np.maximum(0.0, 1.0 - m).sum())


def hinge_subgradient(w, D, labels, C):
    lab = np.asarray(labels, dtype=np.float64)
    active = (lab * np.asarray(D @ w).ravel()) < 1.0
    return w - C * np.asarray(D.T @ (lab * active)).ravel()


# ---------------------------------------------------------------------------
# numba kernels


@numba.njit(cache=True)
def _row_dot(indptr, indices, data, i, w):
    s = 0.0
    for k in range(indptr[i], indptr[i + 1]):
        s += data[k] * w[indices[k]]
    return s


@numba.njit(cache=True)
def _svr_epoch(indptr, indices, data, y, qdiag, beta, w, wb, B, C, eps, order):
    for i in order:
        q = qdiag[i]
        if q <= 0.0:
            continue
        g = _row_dot(indptr, indices, data, i, w) + wb * B - y[i]
        z = beta[i] - g / q
        thr = eps / q
        if z > thr:
            nb = z - thr
        elif z < -thr:
            nb = z + thr
        else:
            nb = 0.0
        if nb > C:
            nb = C
        elif nb < -C:
            nb = -C
        d = nb - beta[i]
        if d != 0.0:
            beta[i] = nb
            for k in range(indptr[i], indptr[i + 1]):
                w[indices[k]] += d * data[k]
            wb += d * B
    return wb


@numba.njit(cache=True)
def _svr_losses(indptr, indices, data, y, w, b, eps):
    total = 0.0
    for i in range(y.shape[0]):
        r = y[i] - _row_dot(indptr, indices, data, i, w) - b
        a = abs(r) - eps
        if a > 0.0:
            total += a
    return total


@numba.njit(cache=True)
def _pair_sqnorm(indptr, indices, data, a, b):
    # |x_a - x_b|^2 via a merge of two sorted rows
    s = 0.0
    p, pe = indptr[a], indptr[a + 1]
    q, qe = indptr[b], indptr[b + 1]
    while p < pe or q < qe:
        if q >= qe or (p < pe and indices[p] < indices[q]):
            s += data[p] * data[p]
            p += 1
        elif p >= pe or indices[q] < indices[p]:
            s += data[q] * data[q]
            q += 1
        else:
            v = data[p] - data[q]
            s += v * v
            p += 1
            q += 1
    return s


@numba.njit(cache=True)
def _pair_sqnorms(indptr, indices, data, first, second):
    out = np.empty(first.shape[0])
    for p in range(first.shape[0]):
        out[p] = _pair_sqnorm(indptr, indices, data, first[p], second[p])
    return out


@numba.njit(cache=True)
def _hinge_epoch(indptr, indices, data, first, second, labels, qdiag, alpha, w, C, order):
    for p in order:
        q = qdiag[p]
        if q <= 0.0:
            continue
        a, b, l = first[p], second[p], labels[p]
        m = l * (_row_dot(indptr, indices, data, a, w) - _row_dot(indptr, indices, data, b, w))
        na = alpha[p] - (m - 1.0) / q
        if na < 0.0:
            na = 0.0
        elif na > C:
            na = C
        d = (na - alpha[p]) * l
        if d != 0.0:
            alpha[p] = na
            for k in range(indptr[a], indptr[a + 1]):
                w[indices[k]] += d * data[k]
            for k in range(indptr[b], indptr[b + 1]):
                w[indices[k]] -= d * data[k]
    return 0


@numba.njit(cache=True)
def _hinge_losses(indptr, indices, data, first, second, labels, w):
    total = 0.0
    for p in range(first.shape[0]):
        m = labels[p] * (
            _row_dot(indptr, indices, data, first[p], w) - _row_dot(indptr, indices, data, second[p], w)
        )
        if m < 1.0:
            total += 1.0 - m
    return total


def _csr(X) -> sp.csr_matrix:
    X = sp.csr_matrix(X, dtype=np.float64)
    X.sort_indices()
    return X


def _csr_arrays(X: sp.csr_matrix):
    return X.indptr.astype(np.int64), X.indices.astype(np.int64), X.data


def _check_finite(value: float, epoch: int, what: str) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"{what} objective became non-finite at epoch {epoch}")


# ---------------------------------------------------------------------------
# training


def train_pointwise(X, y, cfg: TrainConfig) -> LinearModel:
    """epsilon-SVR on rows of ``X`` with raw targets ``y``.

    The bias is learned as the weight of a constant feature of value
    ``cfg.bias_scale``; the dual then carries a small ``b^2 / (2 B^2)`` term.
    """
    if cfg.mode != "pointwise":
        raise ValueError("train_pointwise needs mode='pointwise'")
    X = _csr(X)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] != y.size:
        raise ValueError("X and y disagree on the number of rows")
    if not np.all(np.isfinite(y)):
        raise TrainingError("non-finite regression targets")
    indptr, indices, data = _csr_arrays(X)
    B = float(cfg.bias_scale)
    qdiag = np.asarray(X.multiply(X).sum(axis=1)).ravel() + B * B
    beta = np.zeros(y.size)
    w = np.zeros(X.shape[1])
    wb = 0.0
    rng = substream(cfg.seed, "train/pointwise")

    best = (math.inf, w.copy(), 0.0)
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        wb = _svr_epoch(indptr, indices, data, y, qdiag, beta, w, wb, B, cfg.C, cfg.epsilon, rng.permutation(y.size))
        b = wb * B
        primal = 0.5 * float(w @ w) + 0.5 * wb * wb + cfg.C * _svr_losses(indptr, indices, data, y, w, b, cfg.epsilon)
        dual = float(y @ beta) - cfg.epsilon * float(np.abs(beta).sum()) - 0.5 * float(w @ w) - 0.5 * wb * wb
        _check_finite(primal, epoch, "pointwise")
        if primal < best[0]:
            best = (primal, w.copy(), b)
        history.append(best[0])
        gap = (best[0] - dual) / max(abs(best[0]), 1e-12)
        if gap < cfg.tol:
            logger.debug("pointwise converged at epoch %d (gap %.2e)", epoch, gap)
            break
    else:
        logger.info("pointwise stopped at max_epochs=%d (gap %.2e)", cfg.max_epochs, gap)
    return LinearModel(best[1], best[2], "pointwise", cfg.digest(), history)


@dataclass(frozen=True)
class PairSet:
    """Row-index pairs ``(first, second)`` with label +1 if first outranks second, else -1."""

    first: np.ndarray
    second: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.first.size)

    def differences(self, X) -> sp.csr_matrix:
        X = _csr(X)
        return _csr(X[self.first] - X[self.second])

    def shifted(self, offset: int) -> "PairSet":
        return PairSet(self.first + offset, self.second + offset, self.labels)

    def flipped(self) -> "PairSet":
        return PairSet(self.second, self.first, -self.labels)

    @staticmethod
    def concat(sets: Sequence["PairSet"]) -> "PairSet":
        if not sets:
            empty = np.zeros(0, dtype=np.int64)
            return PairSet(empty, empty, np.zeros(0))
        return PairSet(
            np.concatenate([s.first for s in sets]),
            np.concatenate([s.second for s in sets]),
            np.concatenate([s.labels for s in sets]),
        )


def make_pairs(targets, rng: np.random.Generator, cap: int = 50_000) -> PairSet:
    """One pair per unordered candidate pair with unequal targets.

    Orientation is a coin flip from ``rng``; above ``cap`` pairs a uniform
    subsample of size ``cap`` is kept.
    """
    t = np.asarray(targets, dtype=np.float64)
    firsts, seconds = [], []
    for i in range(t.size - 1):
        js = np.flatnonzero(t[i + 1 :] != t[i]) + i + 1
        if js.size:
            firsts.append(np.full(js.size, i, dtype=np.int64))
            seconds.append(js)
    if not firsts:
        empty = np.zeros(0, dtype=np.int64)
        return PairSet(empty, empty, np.zeros(0))
    a = np.concatenate(firsts)
    b = np.concatenate(seconds)
    flip = rng.random(a.size) < 0.5
    a, b = np.where(flip, b, a), np.where(flip, a, b)
    if a.size > cap:
        keep = np.sort(rng.choice(a.size, size=cap, replace=False))
        a, b = a[keep], b[keep]
    labels = np.sign(t[a] - t[b])
    return PairSet(a, b, labels)


def train_pairwise(X, pairs: PairSet, cfg: TrainConfig) -> LinearModel:
    """Hinge loss on ``x_first - x_second`` with the pair's label. No bias."""
    if cfg.mode != "pairwise":
        raise ValueError("train_pairwise needs mode='pairwise'")
    X = _csr(X)
    indptr, indices, data = _csr_arrays(X)
    first = np.asarray(pairs.first, dtype=np.int64)
    second = np.asarray(pairs.second, dtype=np.int64)
    labels = np.asarray(pairs.labels, dtype=np.float64)
    if first.size and (max(first.max(), second.max()) >= X.shape[0] or min(first.min(), second.min()) < 0):
        raise ValueError("pair index outside the feature matrix")
    qdiag = _pair_sqnorms(indptr, indices, data, first, second)
    alpha = np.zeros(first.size)
    w = np.zeros(X.shape[1])
    rng = substream(cfg.seed, "train/pairwise")

    best = (math.inf, w.copy())
    history = []
    gap = math.inf
    for epoch in range(1, cfg.max_epochs + 1):
        _hinge_epoch(indptr, indices, data, first, second, labels, qdiag, alpha, w, cfg.C, rng.permutation(first.size))
        ww = float(w @ w)
        primal = 0.5 * ww + cfg.C * _hinge_losses(indptr, indices, data, first, second, labels, w)
        dual = float(alpha.sum()) - 0.5 * ww
        _check_finite(primal, epoch, "pairwise")
        if primal < best[0]:
            best = (primal, w.copy())
        history.append(best[0])
        gap = (best[0] - dual) / max(abs(best[0]), 1e-12)
        if gap < cfg.tol:
            logger.debug("pairwise converged at epoch %d (gap %.2e)", epoch, gap)
            break
    else:
        logger.info("pairwise stopped at max_epochs=%d (gap %.2e)", cfg.max_epochs, gap)
    return LinearModel(best[1], 0.0, "pairwise", cfg.digest(), history)


# ---------------------------------------------------------------------------
# prediction and tuning


def rank_tablestore(model: LinearModel, qa_id: str, X, fact_ids: Sequence[str]) -> RankedExplanation:
    """Score every fact with ``w.x + b``; descending score, ties to the smaller fact id."""
    if X.shape[0] != len(fact_ids):
        raise ValueError("one feature row per fact is required")
    scores = model.decision(X)
    order = order_by_score(fact_ids, scores)
    return RankedExplanation(qa_id, tuple(fact_ids[i] for i in order), tuple(float(scores[i]) for i in order))


@dataclass
class TuneResult:
    best_C: float
    best_n_neg: int
    best_score: float
    table: list  # (C, n_neg, score) in grid order


def tune(
    c_grid: Sequence[float],
    neg_grid: Sequence[int],
    evaluate: Callable[[float, int], float],
) -> TuneResult:
    """Exhaustive grid search; ``evaluate(C, n_neg)`` trains and returns dev mAP.

    Ties keep the smaller C, then the smaller n_neg.
    """
    points = [(float(c), int(n)) for c in sorted(set(c_grid)) for n in sorted(set(neg_grid))]
    if not points:
        raise ValueError("tuning grid is empty")
    table = []
    best = None
    for c, n in points:
        score = float(evaluate(c, n))
        if not math.isfinite(score):
            raise TrainingError(f"non-finite dev score at C={c}, n_neg={n}")
        logger.info("tune C=%g n_neg=%d -> %.4f", c, n, score)
        table.append((c, n, score))
        if best is None or score > best[2]:
            best = (c, n, score)
    return TuneResult(best[0], best[1], best[2], table)
