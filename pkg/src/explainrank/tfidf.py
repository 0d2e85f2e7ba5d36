"""TF-IDF vector space over the tablestore and the three TF-IDF rankers.

* baseline: question plus every answer choice, surface tokens, stopwords kept
* optimized: question plus correct answer, content lemmas only
* iterated: optimized, then repeatedly pull the best remaining fact and fold
  its lemmas into the query before re-ranking what is left

Scores are cosines between L2-normalized tf*idf vectors with
``idf(t) = ln((1 + N) / (1 + df(t))) + 1``. Ties go to the smaller fact id.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numba
import numpy as np
import scipy.sparse as sp

from .corpus import QaInstance, Tablestore
from .ranking import RankedExplanation
from .textproc import ProcessedText, TextProcessor, default_processor

logger = logging.getLogger(__name__)

VIEWS = ("lemma", "surface")


@dataclass(frozen=True)
class SparseVector:
    """Sorted ``(index, weight)`` pairs with no stored zeros."""

    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.shape != val.shape:
            raise ValueError("indices and values must have the same shape")
        if idx.size > 1 and np.any(np.diff(idx) <= 0):
            raise ValueError("indices must be strictly increasing")
        keep = val != 0.0
        object.__setattr__(self, "indices", idx[keep])
        object.__setattr__(self, "values", val[keep])

    @classmethod
    def from_pairs(cls, pairs) -> "SparseVector":
        pairs = sorted(pairs)
        return cls(np.array([p[0] for p in pairs], dtype=np.int64), np.array([p[1] for p in pairs], dtype=np.float64))

    def pairs(self) -> list[tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.values.tolist()))

    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.values, self.values)))

    def normalized(self) -> "SparseVector":
        n = self.norm()
        return self if n == 0.0 else SparseVector(self.indices, self.values / n)

    def dot(self, other: "SparseVector") -> float:
        common, ia, ib = np.intersect1d(self.indices, other.indices, assume_unique=True, return_indices=True)
        if common.size == 0:
            return 0.0
        return float(np.dot(self.values[ia], other.values[ib]))


def cosine(a: SparseVector, b: SparseVector) -> float:
    na, nb = a.norm(), b.norm()
    if na == 0.0 or nb == 0.0:
        return 0.0
    return min(1.0, max(0.0, a.dot(b) / (na * nb)))


def view_terms(text: ProcessedText, view: str) -> list[str]:
    if view == "lemma":
        return text.content_lemmas
    if view == "surface":
        return list(text.tokens)
    raise ValueError(f"unknown view {view!r}; expected one of {VIEWS}")


class TfidfModel:
    """Fitted vocabulary, idf weights and unit-normalized document vectors.

    Documents are held sorted by id so that arg-max ties resolve to the
    smallest id without extra bookkeeping.
    """

    def __init__(self, doc_ids, vocab, idf, tf, view):
        self.doc_ids: list[str] = list(doc_ids)
        self.vocab: dict[str, int] = vocab
        self.idf: np.ndarray = idf
        self.view = view
        self.tf: sp.csr_matrix = tf
        weighted = sp.csr_matrix(tf.multiply(idf[None, :]))
        norms = np.sqrt(np.asarray(weighted.multiply(weighted).sum(axis=1)).ravel())
        scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
        self.matrix: sp.csr_matrix = sp.csr_matrix(sp.diags(scale) @ weighted)
        self.matrix.sort_indices()
        self._csc = self.matrix.tocsc()
        self._csc.sort_indices()
        self._row = {fid: i for i, fid in enumerate(self.doc_ids)}

    def __len__(self) -> int:
        return len(self.doc_ids)

    def doc_vector(self, fact_id: str) -> SparseVector:
        row = self.matrix.getrow(self._row[fact_id])
        return SparseVector(row.indices.astype(np.int64), row.data)

    @property
    def doc_vectors(self) -> list[SparseVector]:
        return [self.doc_vector(fid) for fid in self.doc_ids]

    def term_weights(self, terms: Sequence[str]) -> np.ndarray:
        """Dense unnormalized tf*idf weights of a bag of terms; unknown terms are dropped."""
        q = np.zeros(len(self.vocab), dtype=np.float64)
        for term, count in Counter(terms).items():
            idx = self.vocab.get(term)
            if idx is not None:
                q[idx] += count
        return q * self.idf

    def vectorize(self, terms: Sequence[str]) -> SparseVector:
        q = self.term_weights(terms)
        nz = np.flatnonzero(q)
        return SparseVector(nz, q[nz]).normalized()

    def scores(self, terms: Sequence[str]) -> np.ndarray:
        """Cosine of every document (in ``doc_ids`` order) against the query terms."""
        q = self.term_weights(terms)
        norm = np.linalg.norm(q)
        if norm == 0.0:
            return np.zeros(len(self.doc_ids))
        return self.matrix @ (q / norm)

    def rank_terms(self, qa_id: str, terms: Sequence[str]) -> RankedExplanation:
        s = self.scores(terms)
        order = np.argsort(-s, kind="stable")
        return RankedExplanation(qa_id, tuple(self.doc_ids[i] for i in order), tuple(float(s[i]) for i in order))


def fit(documents: Sequence[ProcessedText], doc_ids: Optional[Sequence[str]] = None, view: str = "lemma") -> TfidfModel:
    """Fit idf and document vectors; ``view`` picks content lemmas or raw tokens."""
    if not documents:
        raise ValueError("fit needs at least one document")
    if view not in VIEWS:
        raise ValueError(f"unknown view {view!r}")
    if doc_ids is None:
        doc_ids = [str(i) for i in range(len(documents))]
    if len(doc_ids) != len(documents):
        raise ValueError("doc_ids and documents differ in length")
    order = sorted(range(len(doc_ids)), key=lambda i: doc_ids[i])
    ids = [doc_ids[i] for i in order]
    bags = [Counter(view_terms(documents[i], view)) for i in order]

    vocab_terms = sorted({t for bag in bags for t in bag})
    vocab = {t: i for i, t in enumerate(vocab_terms)}
    rows, cols, vals = [], [], []
    for r, bag in enumerate(bags):
        for term, count in bag.items():
            rows.append(r)
            cols.append(vocab[term])
            vals.append(float(count))
    tf = sp.csr_matrix((vals, (rows, cols)), shape=(len(ids), len(vocab)), dtype=np.float64)
    tf.sort_indices()
    df = np.bincount(np.asarray(cols, dtype=np.int64), minlength=len(vocab)).astype(np.float64)
    n = float(len(ids))
    idf = np.log((1.0 + n) / (1.0 + df)) + 1.0
    return TfidfModel(ids, vocab, idf, tf, view)


def fit_store(store: Tablestore, view: str = "lemma") -> TfidfModel:
    return fit([f.processed for f in store], [f.fact_id for f in store], view)


def _require_view(model: TfidfModel, view: str, ranker: str) -> None:
    if model.view != view:
        raise ValueError(f"{ranker} expects a model fitted on the {view!r} view, got {model.view!r}")


def baseline_query(qa: QaInstance, processor: Optional[TextProcessor] = None) -> list[str]:
    proc = processor or default_processor()
    if not qa.distractors:
        logger.debug("%s: no answer choices, baseline query falls back to question + answer", qa.qa_id)
    terms = list(qa.q_processed.tokens) + list(qa.ca_processed.tokens)
    for choice in qa.distractors:
        terms.extend(proc.process(choice).tokens)
    return terms


def optimized_query(qa: QaInstance) -> list[str]:
    return qa.q_processed.content_lemmas + qa.ca_processed.content_lemmas


def rank_baseline(qa: QaInstance, model: TfidfModel, processor: Optional[TextProcessor] = None) -> RankedExplanation:
    _require_view(model, "surface", "rank_baseline")
    return model.rank_terms(qa.qa_id, baseline_query(qa, processor))


def rank_optimized(qa: QaInstance, model: TfidfModel) -> RankedExplanation:
    _require_view(model, "lemma", "rank_optimized")
    return model.rank_terms(qa.qa_id, optimized_query(qa))


@numba.njit(cache=True)
def _iterate(csc_ptr, csc_idx, csc_val, tf_ptr, tf_idx, tf_val, idf, query, depth):
    n = tf_ptr.shape[0] - 1
    dots = np.zeros(n)
    for t in range(query.shape[0]):
        w = query[t]
        if w != 0.0:
            for k in range(csc_ptr[t], csc_ptr[t + 1]):
                dots[csc_idx[k]] += csc_val[k] * w
    qsq = 0.0
    for t in range(query.shape[0]):
        qsq += query[t] * query[t]

    taken = np.zeros(n, dtype=np.bool_)
    picked = np.empty(depth, dtype=np.int64)
    picked_score = np.empty(depth)
    last = dots.copy()
    last_qsq = qsq
    for it in range(depth):
        best = -1
        best_val = -np.inf
        for i in range(n):
            if not taken[i] and dots[i] > best_val:
                best_val = dots[i]
                best = i
        if it == depth - 1:
            last[:] = dots
            last_qsq = qsq
        picked[it] = best
        picked_score[it] = best_val / math.sqrt(qsq) if qsq > 0.0 else 0.0
        taken[best] = True
        for k in range(tf_ptr[best], tf_ptr[best + 1]):
            t = tf_idx[k]
            delta = tf_val[k] * idf[t]
            qsq += (query[t] + delta) ** 2 - query[t] ** 2
            query[t] += delta
            for j in range(csc_ptr[t], csc_ptr[t + 1]):
                dots[csc_idx[j]] += csc_val[j] * delta
    return picked, picked_score, last, taken, last_qsq


def rank_iterated(qa: QaInstance, model: TfidfModel, depth: Optional[int] = None) -> RankedExplanation:
    """Greedy query expansion; ``depth`` defaults to the whole store.

    Facts left after ``depth`` expansions keep the order of the final
    iteration's ranking (the one that selected the last expanded fact).
    """
    _require_view(model, "lemma", "rank_iterated")
    n = len(model)
    depth = n if depth is None else depth
    if not 0 <= depth <= n:
        raise ValueError(f"depth must lie in [0, {n}], got {depth}")
    if depth == 0:
        return rank_optimized(qa, model)
    query = model.term_weights(optimized_query(qa))
    csc = model._csc
    picked, picked_score, last, taken, last_qsq = _iterate(
        csc.indptr.astype(np.int64),
        csc.indices.astype(np.int64),
        csc.data,
        model.tf.indptr.astype(np.int64),
        model.tf.indices.astype(np.int64),
        model.tf.data,
        model.idf,
        query,
        depth,
    )
    ids = [model.doc_ids[i] for i in picked]
    scores = [float(s) for s in picked_score]
    if depth < n:
        rest = np.flatnonzero(~taken)
        order = rest[np.argsort(-last[rest], kind="stable")]
        norm = math.sqrt(last_qsq)
        ids.extend(model.doc_ids[i] for i in order)
        scores.extend(float(last[i] / norm) if norm > 0 else 0.0 for i in order)
    return RankedExplanation(qa.qa_id, tuple(ids), tuple(scores))

