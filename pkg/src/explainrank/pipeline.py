"""End-to-end experiment wiring: training sets, model fitting, full-store ranking."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import tfidf
from .corpus import QaInstance, SplitSet, Tablestore
from .evaluation import evaluate
from .features import (
    Assembler,
    ConceptResource,
    EmbeddingResource,
    FeatureConfig,
    FeatureSpace,
    Providers,
    TripleResource,
    build_space_and_matrix,
)
from .learner import (
    LinearModel,
    PairSet,
    TrainConfig,
    assign_rank_targets,
    make_pairs,
    rank_tablestore,
    sample_negatives,
    train_pairwise,
    train_pointwise,
)
from .ranking import RankedExplanation
from .seeding import substream

logger = logging.getLogger(__name__)

TFIDF_SYSTEMS = ("tfidf_baseline", "tfidf_optimized", "tfidf_iterated")
LEARNED_SYSTEMS = {"svr": "pointwise", "ltr": "pairwise"}
SYSTEMS = tuple(LEARNED_SYSTEMS) + TFIDF_SYSTEMS


class TfidfRankTable:
    """(qa_id, fact_id) -> 1-based iterated TF-IDF rank, filled per instance on demand."""

    def __init__(self, store: Tablestore, model: tfidf.TfidfModel, depth: Optional[int] = None):
        self.store = store
        self.model = model
        self.depth = depth
        self.instances: dict[str, QaInstance] = {}
        self._ranks: dict[str, np.ndarray] = {}

    def register(self, instances: Iterable[QaInstance]) -> None:
        for qa in instances:
            self.instances[qa.qa_id] = qa

    def ranking(self, qa: QaInstance) -> RankedExplanation:
        return tfidf.rank_iterated(qa, self.model, self.depth)

    def _row(self, qa_id: str) -> Optional[np.ndarray]:
        row = self._ranks.get(qa_id)
        if row is None:
            qa = self.instances.get(qa_id)
            if qa is None:
                return None
            row = np.empty(len(self.store), dtype=np.int32)
            for rank, fid in enumerate(self.ranking(qa).fact_ids, 1):
                row[self.store.position(fid)] = rank
            self._ranks[qa_id] = row
        return row

    def get(self, key, default=None):
        qa_id, fact_id = key
        row = self._row(qa_id)
        if row is None or fact_id not in self.store:
            return default
        return int(row[self.store.position(fact_id)])

    def __getitem__(self, key):
        value = self.get(key)
        if value is None:
            raise KeyError(key)
        return value


@dataclass
class TrainingSet:
    X: sp.csr_matrix
    y: np.ndarray
    space: FeatureSpace
    qa_ids: list[str]
    offsets: np.ndarray  # rows of instance i are offsets[i]:offsets[i+1]
    is_gold: np.ndarray
    fact_ids: list[str]

    def subset(self, keep: np.ndarray) -> "TrainingSet":
        idx = np.flatnonzero(keep)
        counts = [int(keep[lo:hi].sum()) for lo, hi in zip(self.offsets[:-1], self.offsets[1:])]
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return TrainingSet(
            self.X[idx], self.y[idx], self.space, self.qa_ids, offsets, self.is_gold[idx],
            [self.fact_ids[i] for i in idx],
        )

    def pairs(self, seed: int, cap: int) -> PairSet:
        sets = []
        for i, qa_id in enumerate(self.qa_ids):
            lo, hi = self.offsets[i], self.offsets[i + 1]
            p = make_pairs(self.y[lo:hi], substream(seed, f"pairs/{qa_id}"), cap)
            sets.append(p.shifted(int(lo)))
        return PairSet.concat(sets)


@dataclass
class Resources:
    concepts: Optional[ConceptResource] = None
    triples: Optional[TripleResource] = None
    embeddings: Optional[EmbeddingResource] = None


class Experiment:
    def __init__(
        self,
        store: Tablestore,
        splits: SplitSet,
        feature_config: Optional[FeatureConfig] = None,
        resources: Optional[Resources] = None,
        seed: int = 0,
        tfidf_depth: Optional[int] = None,
    ):
        self.store = store
        self.splits = splits
        self.feature_config = feature_config or FeatureConfig()
        self.resources = resources or Resources()
        self.seed = seed
        self.tfidf_depth = tfidf_depth
        self._tfidf: dict[str, tfidf.TfidfModel] = {}
        self._rank_table: Optional[TfidfRankTable] = None

    # -- tf-idf -----------------------------------------------------------

    def tfidf_model(self, view: str) -> tfidf.TfidfModel:
        if view not in self._tfidf:
            self._tfidf[view] = tfidf.fit_store(self.store, view)
        return self._tfidf[view]

    def rank_table(self) -> TfidfRankTable:
        if self._rank_table is None:
            table = TfidfRankTable(self.store, self.tfidf_model("lemma"), self.tfidf_depth)
            for _, instances in self.splits.items():
                table.register(instances)
            self._rank_table = table
        return self._rank_table

    def tfidf_rankings(self, system: str, instances: Sequence[QaInstance]) -> dict[str, RankedExplanation]:
        if system == "tfidf_baseline":
            model = self.tfidf_model("surface")
            return {qa.qa_id: tfidf.rank_baseline(qa, model) for qa in instances}
        if system == "tfidf_optimized":
            model = self.tfidf_model("lemma")
            return {qa.qa_id: tfidf.rank_optimized(qa, model) for qa in instances}
        if system == "tfidf_iterated":
            table = self.rank_table()
            return {qa.qa_id: table.ranking(qa) for qa in instances}
        raise ValueError(f"unknown TF-IDF system {system!r}")

    # -- features and training ---------------------------------------------

    def providers(self, groups: Optional[Sequence[str]] = None) -> Providers:
        cfg = self.feature_config if groups is None else replace(self.feature_config, groups=tuple(groups))
        ranks = self.rank_table() if "tfr" in cfg.groups else None
        return Providers(cfg, self.resources.concepts, self.resources.triples, self.resources.embeddings, ranks)

    def training_set(self, n_neg: int, providers: Providers) -> TrainingSet:
        triples, y, is_gold, qa_ids, offsets = [], [], [], [], [0]
        for qa in self.splits.train:
            if qa.gold is None:
                continue
            targets = assign_rank_targets(qa.gold, self.store, qa.qa_id)
            facts = qa.gold.fact_ids + sample_negatives(qa, self.store, n_neg, self.seed)
            for fid in facts:
                triples.append((qa, self.store[fid]))
                y.append(targets.target(fid))
                is_gold.append(fid in targets.gold)
            qa_ids.append(qa.qa_id)
            offsets.append(len(triples))
        if not triples:
            raise ValueError("training split has no annotated instances")
        space, X = build_space_and_matrix(triples, providers)
        return TrainingSet(
            X, np.asarray(y, dtype=np.float64), space, qa_ids, np.asarray(offsets, dtype=np.int64),
            np.asarray(is_gold), [f.fact_id for _, f in triples],
        )

    def restrict_negatives(self, data: TrainingSet, n_neg: int) -> TrainingSet:
        """Rows for a smaller negative count, reusing a training set built with more."""
        keep = data.is_gold.copy()
        qa_by_id = {qa.qa_id: qa for qa in self.splits.train}
        for i, qa_id in enumerate(data.qa_ids):
            wanted = set(sample_negatives(qa_by_id[qa_id], self.store, n_neg, self.seed))
            lo, hi = data.offsets[i], data.offsets[i + 1]
            for r in range(lo, hi):
                if not data.is_gold[r] and data.fact_ids[r] in wanted:
                    keep[r] = True
        return data.subset(keep)

    @staticmethod
    def fit(data: TrainingSet, cfg: TrainConfig) -> LinearModel:
        if cfg.mode == "pointwise":
            return train_pointwise(data.X, data.y, cfg)
        return train_pairwise(data.X, data.pairs(cfg.seed, cfg.pair_cap), cfg)

    def train(self, cfg: TrainConfig, groups: Optional[Sequence[str]] = None):
        providers = self.providers(groups)
        data = self.training_set(cfg.n_neg, providers)
        model = self.fit(data, cfg)
        return model, data.space, providers

    # -- prediction ---------------------------------------------------------

    def score_split(
        self,
        models: Sequence[LinearModel],
        space: FeatureSpace,
        providers: Providers,
        instances: Sequence[QaInstance],
    ) -> list[dict[str, RankedExplanation]]:
        """Rank the whole store for every instance under each model, building features once."""
        assembler = Assembler(providers, space)
        facts = list(self.store)
        fact_ids = [f.fact_id for f in facts]
        out: list[dict[str, RankedExplanation]] = [{} for _ in models]
        for qa in instances:
            X = assembler.matrix([(qa, f) for f in facts])
            for j, model in enumerate(models):
                out[j][qa.qa_id] = rank_tablestore(model, qa.qa_id, X, fact_ids)
        return out

    def evaluate_models(self, models, space, providers, split: str = "dev") -> list[float]:
        instances = getattr(self.splits, split)
        rankings = self.score_split(models, space, providers, instances)
        return [evaluate(r, instances).map for r in rankings]
