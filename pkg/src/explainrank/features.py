"""Feature groups for (question, correct answer, fact) triples.

Six groups, each owning a contiguous block of the feature space:

========  ==========================================================
``lex``   lemmas, affixes and shared lemmas/affixes, fact table type
``cn``    concept expansions and relation facts from a concept dump
``oie``   subject / predicate / object lemmas from a triple dump
``mh``    positional lexical matches aimed at multi-hop focus words
``tfr``   rank of the fact under iterated TF-IDF
``emb``   precomputed 768-d triple embeddings, copied verbatim
========  ==========================================================

Feature names are ``"<group>:<name>"``. One-hot features carry 1.0; only
the embedding block carries real values.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .corpus import Fact, QaInstance
from .textproc import ProcessedText, affixes, default_processor, zone_of

logger = logging.getLogger(__name__)

GROUPS = ("lex", "cn", "oie", "mh", "tfr", "emb")
EMBED_DIM = 768
EMBED_MAGIC = b"XRE1"
ROLES = ("q", "ca", "f")


# ---------------------------------------------------------------------------
# sentence keys shared by the triple and embedding dumps


def sentence_key(role: str, ident: str) -> str:
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    return f"{role}:{ident}"


def triple_key(qa_id: str, fact_id: str) -> str:
    return f"{qa_id}|{fact_id}"


# ---------------------------------------------------------------------------
# external resources


@dataclass
class ConceptResource:
    """term -> (concepts ordered most precise first, relation facts such as ``IsA_beverage``)."""

    entries: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, term) -> bool:
        return term in self.entries

    def concepts(self, term: str) -> tuple[str, ...]:
        return self.entries.get(term, ((), ()))[0]

    def relations(self, term: str) -> tuple[str, ...]:
        return self.entries.get(term, ((), ()))[1]

    @classmethod
    def load(cls, path) -> "ConceptResource":
        ranked: dict[str, list[tuple[int, int, str]]] = {}
        rels: dict[str, list[str]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ValueError(f"{path}:{lineno}: expected term, rank|REL, value")
                term, kind, value = (p.strip() for p in parts)
                term = term.lower()
                if kind == "REL":
                    rels.setdefault(term, []).append(value)
                    ranked.setdefault(term, [])
                else:
                    try:
                        rank = int(kind)
                    except ValueError:
                        raise ValueError(f"{path}:{lineno}: concept rank {kind!r} is not an integer") from None
                    ranked.setdefault(term, []).append((rank, lineno, value.lower()))
                    rels.setdefault(term, [])
        entries = {}
        for term in ranked:
            concepts = tuple(v for _, _, v in sorted(ranked[term]))
            entries[term] = (concepts, tuple(rels[term]))
        return cls(entries)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for term, (concepts, relations) in self.entries.items():
                for rank, concept in enumerate(concepts, 1):
                    fh.write(f"{term}\t{rank}\t{concept}\n")
                for rel in relations:
                    fh.write(f"{term}\tREL\t{rel}\n")


@dataclass(frozen=True)
class RelationTriple:
    subject: tuple[str, ...]
    predicate: str
    object: tuple[str, ...]


@dataclass
class TripleResource:
    """sentence key -> relation triples with lemmatized arguments."""

    entries: dict[str, list[RelationTriple]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, key: str) -> Optional[list[RelationTriple]]:
        return self.entries.get(key)

    @classmethod
    def load(cls, path) -> "TripleResource":
        entries: dict[str, list[RelationTriple]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 4:
                    raise ValueError(f"{path}:{lineno}: expected key, subject, predicate, object")
                key, subj, pred, obj = parts
                entries.setdefault(key.strip(), []).append(
                    RelationTriple(tuple(subj.lower().split()), pred.strip().lower(), tuple(obj.lower().split()))
                )
        return cls(entries)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for key, triples in self.entries.items():
                for t in triples:
                    fh.write(f"{key}\t{' '.join(t.subject)}\t{t.predicate}\t{' '.join(t.object)}\n")


class EmbeddingResource:
    """key -> float32 vector of ``EMBED_DIM`` values.

    Binary layout (little-endian): magic ``XRE1``, uint32 count, uint32 dim,
    then per record a uint32 key length, the UTF-8 key and ``dim`` float32s.
    The TSV form is ``key<TAB>v1<TAB>...<TAB>v768``.
    """

    def __init__(self, vectors: Optional[Mapping[str, np.ndarray]] = None, dim: int = EMBED_DIM):
        self.dim = dim
        self.vectors: dict[str, np.ndarray] = {}
        for key, vec in (vectors or {}).items():
            self.add(key, vec)

    def add(self, key: str, vec) -> None:
        arr = np.asarray(vec, dtype=np.float32)
        if arr.shape != (self.dim,):
            raise ValueError(f"embedding for {key!r} has shape {arr.shape}, expected ({self.dim},)")
        self.vectors[key] = arr

    def __len__(self) -> int:
        return len(self.vectors)

    def __contains__(self, key) -> bool:
        return key in self.vectors

    def get(self, key: str) -> Optional[np.ndarray]:
        return self.vectors.get(key)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, EmbeddingResource)
            and self.dim == other.dim
            and self.vectors.keys() == other.vectors.keys()
            and all(np.array_equal(v, other.vectors[k]) for k, v in self.vectors.items())
        )

    def save_binary(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(EMBED_MAGIC + struct.pack("<II", len(self.vectors), self.dim))
            for key, vec in self.vectors.items():
                raw = key.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)) + raw)
                fh.write(vec.astype("<f4").tobytes())

    @classmethod
    def load_binary(cls, path) -> "EmbeddingResource":
        data = Path(path).read_bytes()
        if data[:4] != EMBED_MAGIC:
            raise ValueError(f"{path}: bad magic {data[:4]!r}")
        count, dim = struct.unpack_from("<II", data, 4)
        if dim != EMBED_DIM:
            raise ValueError(f"{path}: embedding dim {dim}, expected {EMBED_DIM}")
        res = cls(dim=dim)
        off = 12
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", data, off)
            off += 4
            key = data[off : off + klen].decode("utf-8")
            off += klen
            end = off + 4 * dim
            if end > len(data):
                raise ValueError(f"{path}: truncated record for {key!r}")
            res.vectors[key] = np.frombuffer(data[off:end], dtype="<f4").astype(np.float32)
            off = end
        if off != len(data):
            raise ValueError(f"{path}: {len(data) - off} trailing bytes")
        return res

    def save_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for key, vec in self.vectors.items():
                fh.write(key + "\t" + "\t".join(repr(float(x)) for x in vec) + "\n")

    @classmethod
    def load_tsv(cls, path) -> "EmbeddingResource":
        res = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != EMBED_DIM + 1:
                    raise ValueError(f"{path}:{lineno}: expected key and {EMBED_DIM} values, got {len(parts) - 1}")
                res.add(parts[0], [float(x) for x in parts[1:]])
        return res

    @classmethod
    def load(cls, path) -> "EmbeddingResource":
        path = Path(path)
        with open(path, "rb") as fh:
            head = fh.read(4)
        return cls.load_binary(path) if head == EMBED_MAGIC else cls.load_tsv(path)


# ---------------------------------------------------------------------------
# extractors


def _yes(flag: bool) -> str:
    return "yes" if flag else "no"


def _lexical_unary(role: str, text: ProcessedText) -> set[str]:
    out = set()
    for lem in text.content_lemmas:
        out.add(f"lex:{role}={lem}")
        for a in affixes(lem):
            out.add(f"lex:{role}_{a}")
    return out


def _affix_set(text: ProcessedText) -> set[str]:
    out = set()
    for lem in text.content_lemmas:
        out |= affixes(lem)
    return out


def _lexical_cross(q: ProcessedText, ca: ProcessedText, f: ProcessedText) -> set[str]:
    lq, lca, lf = set(q.content_lemmas), set(ca.content_lemmas), set(f.content_lemmas)
    aq, aca, af = _affix_set(q), _affix_set(ca), _affix_set(f)
    out = {f"lex:shared_qf={x}" for x in lq & lf}
    out |= {f"lex:shared_caf={x}" for x in lca & lf}
    out |= {f"lex:shared_qcaf={x}" for x in lq & lca & lf}
    out |= {f"lex:shared_qf_{x}" for x in aq & af}
    out |= {f"lex:shared_caf_{x}" for x in aca & af}
    out |= {f"lex:shared_qcaf_{x}" for x in aq & aca & af}
    return out


def extract_lexical(q: ProcessedText, ca: ProcessedText, f: ProcessedText, table_type: Optional[str] = None) -> set[str]:
    out = _lexical_unary("q", q) | _lexical_unary("ca", ca) | _lexical_unary("f", f) | _lexical_cross(q, ca, f)
    if table_type is not None:
        out.add(f"lex:tabletype={table_type}")
    return out


def _concept_words(text: ProcessedText) -> list[tuple[str, str]]:
    return [(lem, tok) for lem, tok, keep in zip(text.lemmas, text.tokens, text.content_mask) if keep]


def _concept_bag(text: ProcessedText, resource: ConceptResource, top_k: int, coverage: Optional[Counter]):
    concepts, relations = set(), set()
    for lem, tok in _concept_words(text):
        term = lem if lem in resource else tok if tok in resource else None
        if term is None:
            if coverage is not None:
                coverage["concept_miss"] += 1
            continue
        if coverage is not None:
            coverage["concept_hit"] += 1
        concepts.update(resource.concepts(term)[:top_k])
        relations.update(resource.relations(term))
    return concepts, relations


def _concept_unary(role, text, resource, top_k, coverage) -> set[str]:
    concepts, relations = _concept_bag(text, resource, top_k, coverage)
    return {f"cn:{role}={c}" for c in concepts} | {f"cn:{role}_rel={r}" for r in relations}


def _concept_cross(q, ca, f, resource, top_k) -> set[str]:
    # a shared item counts only if at least one side reached it through a concept
    cq = _concept_bag(q, resource, top_k, None)[0]
    cca = _concept_bag(ca, resource, top_k, None)[0]
    cf = _concept_bag(f, resource, top_k, None)[0]
    lq, lca, lf = set(q.content_lemmas), set(ca.content_lemmas), set(f.content_lemmas)
    bq, bca, bf = cq | lq, cca | lca, cf | lf
    out = {f"cn:shared_qf={x}" for x in (bq & bf) - (lq & lf)}
    out |= {f"cn:shared_caf={x}" for x in (bca & bf) - (lca & lf)}
    out |= {f"cn:shared_qcaf={x}" for x in (bq & bca & bf) - (lq & lca & lf)}
    return out


def extract_concept(
    q: ProcessedText,
    ca: ProcessedText,
    f: ProcessedText,
    resource: ConceptResource,
    top_k: int = 50,
    coverage: Optional[Counter] = None,
) -> set[str]:
    """Concept expansions per side, concept-mediated overlaps and relation facts.

    Terms missing from the resource contribute nothing and are tallied in
    ``coverage["concept_miss"]``.
    """
    out = set()
    for role, text in (("q", q), ("ca", ca), ("f", f)):
        out |= _concept_unary(role, text, resource, top_k, coverage)
    return out | _concept_cross(q, ca, f, resource, top_k)


def _openie_parts(key, resource, stopwords, coverage):
    triples = resource.get(key)
    if triples is None:
        if coverage is not None:
            coverage["openie_miss"] += 1
        return set(), set(), set()
    subj, obj, pred = set(), set(), set()
    for t in triples:
        subj.update(w for w in t.subject if w not in stopwords)
        obj.update(w for w in t.object if w not in stopwords)
        if t.predicate:
            pred.add("_".join(t.predicate.split()))
    return subj, obj, pred


def _openie_unary(role, key, resource, stopwords, coverage) -> set[str]:
    subj, obj, pred = _openie_parts(key, resource, stopwords, coverage)
    return (
        {f"oie:subj_{role}={w}" for w in subj}
        | {f"oie:obj_{role}={w}" for w in obj}
        | {f"oie:pred_{role}={p}" for p in pred}
    )


def _openie_cross(q_key, ca_key, f_key, resource, stopwords) -> set[str]:
    sq, oq, _ = _openie_parts(q_key, resource, stopwords, None)
    sca, oca, _ = _openie_parts(ca_key, resource, stopwords, None)
    sf, of, _ = _openie_parts(f_key, resource, stopwords, None)
    out = {f"oie:shared_subj_qf={w}" for w in sq & sf}
    out |= {f"oie:shared_subj_caf={w}" for w in sca & sf}
    out |= {f"oie:shared_subj_qcaf={w}" for w in sq & sca & sf}
    out |= {f"oie:shared_obj_qf={w}" for w in oq & of}
    out |= {f"oie:shared_obj_caf={w}" for w in oca & of}
    out |= {f"oie:shared_obj_qcaf={w}" for w in oq & oca & of}
    return out


def extract_openie(
    q_key: str,
    ca_key: str,
    f_key: str,
    resource: TripleResource,
    stopwords: Optional[frozenset] = None,
    coverage: Optional[Counter] = None,
) -> set[str]:
    stop = default_processor().stopwords if stopwords is None else stopwords
    out = set()
    for role, key in (("q", q_key), ("ca", ca_key), ("f", f_key)):
        out |= _openie_unary(role, key, resource, stop, coverage)
    return out | _openie_cross(q_key, ca_key, f_key, resource, stop)


def length_bin(n: int) -> str:
    if n <= 5:
        return str(n)
    for hi in (10, 15, 20, 30, 40):
        if n <= hi:
            return f"le{hi}"
    return "gt40"


def _multihop_unary(role: str, text: ProcessedText, verbs: frozenset) -> set[str]:
    out = {f"mh:len_{role}={length_bin(text.length)}"}
    for pos, lem in enumerate(text.lemmas):
        if lem in verbs:
            out.add(f"mh:verbpos_{role}={min(pos, 20)}")
    return out


def _content_seq(text: ProcessedText) -> list[tuple[str, str]]:
    return [(lem, tok) for lem, tok, keep in zip(text.lemmas, text.tokens, text.content_mask) if keep]


def _same(a: tuple[str, str], b: tuple[str, str]) -> bool:
    return a[0] == b[0] or a[1] == b[1]


def _multihop_cross(q: ProcessedText, ca: ProcessedText, f: ProcessedText, verbs: frozenset) -> set[str]:
    out = set()
    f_lemmas = set(f.lemmas)
    f_tokens = set(f.tokens)
    shared_verbs = {lem for lem in q.lemmas if lem in verbs and lem in f_lemmas}
    for pos, lem in enumerate(f.lemmas):
        if lem in shared_verbs:
            out.add(f"mh:shared_verb_zone={zone_of(pos, f.length).value}")

    fseq = _content_seq(f)
    caseq = _content_seq(ca)
    if 1 <= len(caseq) <= 2:
        all_in = all(lem in f_lemmas for lem, _ in caseq) or all(tok in f_tokens for _, tok in caseq)
        n = len(caseq)
        first = len(fseq) >= n and all(_same(a, b) for a, b in zip(caseq, fseq[:n]))
        last = len(fseq) >= n and all(_same(a, b) for a, b in zip(caseq, fseq[-n:]))
        out.add(f"mh:ca_all_in_f={_yes(all_in)}")
        out.add(f"mh:ca_first_in_f={_yes(first)}")
        out.add(f"mh:ca_last_in_f={_yes(last)}")

    qseq = _content_seq(q)
    if qseq and fseq:
        q_first, q_last = qseq[0], qseq[-1]
        out.add(f"mh:f_has_last_q={_yes(q_last[0] in f_lemmas or q_last[1] in f_tokens)}")
        out.add(f"mh:last_q_first_in_f={_yes(_same(q_last, fseq[0]))}")
        out.add(f"mh:last_q_last_in_f={_yes(_same(q_last, fseq[-1]))}")
        out.add(f"mh:first_q_first_in_f={_yes(_same(q_first, fseq[0]))}")
    return out


def extract_multihop(
    q: ProcessedText, ca: ProcessedText, f: ProcessedText, verbs: Optional[frozenset] = None
) -> set[str]:
    verbs = default_processor().verbs if verbs is None else verbs
    return _multihop_unary("q", q, verbs) | _multihop_unary("ca", ca, verbs) | _multihop_cross(q, ca, f, verbs)


def extract_tfidf_rank(rank: int, ceiling: int = 1000) -> set[str]:
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    exact = str(rank) if rank <= ceiling else f"{ceiling}+"
    return {
        f"tfr:rank={exact}",
        f"tfr:bin50={math.ceil(rank / 50)}",
        f"tfr:bin100={math.ceil(rank / 100)}",
        f"tfr:top100={_yes(rank <= 100)}",
        f"tfr:top500={_yes(rank <= 500)}",
        f"tfr:top1000={_yes(rank <= 1000)}",
    }


def extract_embedding(qa_id: str, fact_id: str, resource: EmbeddingResource, coverage: Optional[Counter] = None) -> np.ndarray:
    vec = resource.get(triple_key(qa_id, fact_id))
    if vec is None:
        if coverage is not None:
            coverage["embedding_miss"] += 1
        return np.zeros(EMBED_DIM)
    return vec.astype(np.float64)


def extract_segment_embedding(qa_id: str, fact_id: str, resource: EmbeddingResource, coverage: Optional[Counter] = None) -> np.ndarray:
    """Separate q, ca and f vectors concatenated (3 x 768); kept only for comparison runs."""
    parts = []
    for role, ident in (("q", qa_id), ("ca", qa_id), ("f", fact_id)):
        vec = resource.get(sentence_key(role, ident))
        if vec is None:
            if coverage is not None:
                coverage["embedding_miss"] += 1
            vec = np.zeros(EMBED_DIM, dtype=np.float32)
        parts.append(vec.astype(np.float64))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# feature space


class FrozenSpaceError(RuntimeError):
    pass


class FeatureSpace:
    """Dense name -> index map with a group tag per index."""

    def __init__(self):
        self.names: list[str] = []
        self.index: dict[str, int] = {}
        self.groups: list[str] = []
        self.frozen = False

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name) -> bool:
        return name in self.index

    def add(self, name: str) -> int:
        if name in self.index:
            return self.index[name]
        if self.frozen:
            raise FrozenSpaceError(f"cannot add {name!r} to a frozen feature space")
        group = name.split(":", 1)[0]
        if group not in GROUPS:
            raise ValueError(f"feature {name!r} has unknown group {group!r}")
        self.index[name] = len(self.names)
        self.names.append(name)
        self.groups.append(group)
        return self.index[name]

    def freeze(self) -> "FeatureSpace":
        self.frozen = True
        self._group_ids = np.array([GROUPS.index(g) for g in self.groups], dtype=np.int8)
        return self

    def group_ids(self) -> np.ndarray:
        if not hasattr(self, "_group_ids"):
            return np.array([GROUPS.index(g) for g in self.groups], dtype=np.int8)
        return self._group_ids

    def group_counts(self) -> dict[str, int]:
        counts = Counter(self.groups)
        return {g: counts.get(g, 0) for g in GROUPS}

    def group_indices(self, group: str) -> np.ndarray:
        return np.flatnonzero(self.group_ids() == GROUPS.index(group))

    def to_json(self) -> str:
        return json.dumps({"names": self.names, "frozen": self.frozen}, ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> "FeatureSpace":
        data = json.loads(text)
        space = cls()
        for name in data["names"]:
            space.add(name)
        if data.get("frozen", True):
            space.freeze()
        return space

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "FeatureSpace":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class FeatureVector:
    indices: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return int(self.indices.size)

    def pairs(self) -> list[tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.values.tolist()))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, FeatureVector)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )


# ---------------------------------------------------------------------------
# providers


@dataclass
class FeatureConfig:
    groups: tuple[str, ...] = GROUPS
    concept_top_k: int = 50
    rank_ceiling: int = 1000
    embed_mode: str = "triple"  # "segments" = 3 x 768 separate vectors, unvalidated

    def __post_init__(self):
        unknown = set(self.groups) - set(GROUPS)
        if unknown:
            raise ValueError(f"unknown feature groups: {sorted(unknown)}")
        if self.embed_mode not in ("triple", "segments"):
            raise ValueError(f"embed_mode must be 'triple' or 'segments', got {self.embed_mode!r}")
        self.groups = tuple(g for g in GROUPS if g in self.groups)

    @property
    def embed_width(self) -> int:
        return EMBED_DIM * (3 if self.embed_mode == "segments" else 1)


class Providers:
    """Enabled groups plus the resources they read.

    Per-QA and per-fact feature sets are cached, so only the cross
    features are recomputed for each triple. The ``coverage`` counter
    tallies resource misses.
    """

    def __init__(
        self,
        config: Optional[FeatureConfig] = None,
        concepts: Optional[ConceptResource] = None,
        triples: Optional[TripleResource] = None,
        embeddings: Optional[EmbeddingResource] = None,
        tfidf_ranks: Optional[Mapping[tuple[str, str], int]] = None,
        processor=None,
    ):
        self.config = config or FeatureConfig()
        self.concepts = concepts if concepts is not None else ConceptResource()
        self.triples = triples if triples is not None else TripleResource()
        self.embeddings = embeddings
        self.tfidf_ranks = tfidf_ranks if tfidf_ranks is not None else {}
        self.processor = processor or default_processor()
        self.coverage: Counter = Counter()
        self._qa_cache: dict[str, frozenset] = {}
        self._fact_cache: dict[str, frozenset] = {}

    @property
    def groups(self) -> tuple[str, ...]:
        return self.config.groups

    def with_groups(self, groups: Iterable[str]) -> "Providers":
        cfg = FeatureConfig(tuple(groups), self.config.concept_top_k, self.config.rank_ceiling, self.config.embed_mode)
        return Providers(cfg, self.concepts, self.triples, self.embeddings, self.tfidf_ranks, self.processor)

    def qa_names(self, qa: QaInstance) -> frozenset:
        cached = self._qa_cache.get(qa.qa_id)
        if cached is not None:
            return cached
        g, cfg, proc = self.groups, self.config, self.processor
        out = set()
        for role, text in (("q", qa.q_processed), ("ca", qa.ca_processed)):
            if "lex" in g:
                out |= _lexical_unary(role, text)
            if "cn" in g:
                out |= _concept_unary(role, text, self.concepts, cfg.concept_top_k, self.coverage)
            if "oie" in g:
                out |= _openie_unary(role, sentence_key(role, qa.qa_id), self.triples, proc.stopwords, self.coverage)
            if "mh" in g:
                out |= _multihop_unary(role, text, proc.verbs)
        result = frozenset(out)
        self._qa_cache[qa.qa_id] = result
        return result

    def fact_names(self, fact: Fact) -> frozenset:
        cached = self._fact_cache.get(fact.fact_id)
        if cached is not None:
            return cached
        g, cfg, proc = self.groups, self.config, self.processor
        out = set()
        if "lex" in g:
            out |= _lexical_unary("f", fact.processed)
            out.add(f"lex:tabletype={fact.table_type}")
        if "cn" in g:
            out |= _concept_unary("f", fact.processed, self.concepts, cfg.concept_top_k, self.coverage)
        if "oie" in g:
            out |= _openie_unary("f", sentence_key("f", fact.fact_id), self.triples, proc.stopwords, self.coverage)
        result = frozenset(out)
        self._fact_cache[fact.fact_id] = result
        return result

    def pair_names(self, qa: QaInstance, fact: Fact) -> set[str]:
        g, cfg, proc = self.groups, self.config, self.processor
        q, ca, f = qa.q_processed, qa.ca_processed, fact.processed
        out = set()
        if "lex" in g:
            out |= _lexical_cross(q, ca, f)
        if "cn" in g:
            out |= _concept_cross(q, ca, f, self.concepts, cfg.concept_top_k)
        if "oie" in g:
            out |= _openie_cross(
                sentence_key("q", qa.qa_id), sentence_key("ca", qa.qa_id), sentence_key("f", fact.fact_id),
                self.triples, proc.stopwords,
            )
        if "mh" in g:
            out |= _multihop_cross(q, ca, f, proc.verbs)
        if "tfr" in g:
            rank = self.tfidf_ranks.get((qa.qa_id, fact.fact_id))
            if rank is None:
                self.coverage["tfidf_rank_miss"] += 1
            else:
                out |= extract_tfidf_rank(rank, cfg.rank_ceiling)
        return out

    def names(self, qa: QaInstance, fact: Fact) -> set[str]:
        return set(self.qa_names(qa)) | set(self.fact_names(fact)) | self.pair_names(qa, fact)

    def dense(self, qa: QaInstance, fact: Fact) -> Optional[np.ndarray]:
        if "emb" not in self.groups:
            return None
        if self.embeddings is None:
            self.coverage["embedding_miss"] += 1
            return np.zeros(self.config.embed_width)
        if self.config.embed_mode == "segments":
            return extract_segment_embedding(qa.qa_id, fact.fact_id, self.embeddings, self.coverage)
        return extract_embedding(qa.qa_id, fact.fact_id, self.embeddings, self.coverage)


def build_space(triples: Iterable[tuple[QaInstance, Fact]], providers: Providers) -> FeatureSpace:
    """Register every feature name seen on the training triples, group by group, then freeze."""
    seen: dict[str, set[str]] = {g: set() for g in GROUPS}
    for qa, fact in triples:
        for name in providers.names(qa, fact):
            seen[name.split(":", 1)[0]].add(name)
    space = FeatureSpace()
    for group in GROUPS:
        if group == "emb":
            if "emb" in providers.groups:
                for i in range(providers.config.embed_width):
                    space.add(f"emb:{i}")
            continue
        for name in sorted(seen[group]):
            space.add(name)
    space.freeze()
    logger.info("feature space: %s", space.group_counts())
    return space


class Assembler:
    """Maps triples to sparse vectors over a frozen space; unknown names are dropped."""

    def __init__(self, providers: Providers, space: FeatureSpace):
        if not space.frozen:
            raise ValueError("assemble needs a frozen feature space")
        self.providers = providers
        self.space = space
        self._qa_idx: dict[str, np.ndarray] = {}
        self._fact_idx: dict[str, np.ndarray] = {}
        emb = space.group_indices("emb")
        self._emb_start = int(emb[0]) if emb.size else None
        self._emb_width = int(emb.size)

    def _indices(self, names) -> np.ndarray:
        index = self.space.index
        return np.array(sorted(index[n] for n in names if n in index), dtype=np.int64)

    def assemble(self, qa: QaInstance, fact: Fact) -> FeatureVector:
        qi = self._qa_idx.get(qa.qa_id)
        if qi is None:
            qi = self._qa_idx[qa.qa_id] = self._indices(self.providers.qa_names(qa))
        fi = self._fact_idx.get(fact.fact_id)
        if fi is None:
            fi = self._fact_idx[fact.fact_id] = self._indices(self.providers.fact_names(fact))
        pi = self._indices(self.providers.pair_names(qa, fact))
        idx = np.unique(np.concatenate([qi, fi, pi]))
        vals = np.ones(idx.size)
        dense = self.providers.dense(qa, fact)
        if dense is not None and self._emb_start is not None:
            if dense.size != self._emb_width:
                raise ValueError(f"embedding width {dense.size} does not match the space block {self._emb_width}")
            nz = np.flatnonzero(dense)
            idx = np.concatenate([idx, self._emb_start + nz])
            vals = np.concatenate([vals, dense[nz]])
            order = np.argsort(idx, kind="stable")
            idx, vals = idx[order], vals[order]
        return FeatureVector(idx, vals)

    def matrix(self, triples: Sequence[tuple[QaInstance, Fact]]) -> sp.csr_matrix:
        indptr = [0]
        cols, vals = [], []
        for qa, fact in triples:
            vec = self.assemble(qa, fact)
            cols.append(vec.indices)
            vals.append(vec.values)
            indptr.append(indptr[-1] + vec.indices.size)
        if cols:
            c, v = np.concatenate(cols), np.concatenate(vals)
        else:
            c, v = np.zeros(0, dtype=np.int64), np.zeros(0)
        return sp.csr_matrix((v, c, np.asarray(indptr, dtype=np.int64)), shape=(len(indptr) - 1, len(self.space)))


def assemble(qa: QaInstance, fact: Fact, providers: Providers, space: FeatureSpace) -> FeatureVector:
    return Assembler(providers, space).assemble(qa, fact)


def build_space_and_matrix(
    triples: Sequence[tuple[QaInstance, Fact]], providers: Providers
) -> tuple[FeatureSpace, sp.csr_matrix]:
    """One pass over the training triples yielding the frozen space and their matrix.

    Names get provisional ids in order of appearance and are renumbered into
    group blocks at the end, so each triple's features are computed once.
    """
    provisional: dict[str, int] = {}
    rows: list[np.ndarray] = []
    dense_rows: list[Optional[np.ndarray]] = []
    for qa, fact in triples:
        ids = [provisional.setdefault(n, len(provisional)) for n in providers.names(qa, fact)]
        rows.append(np.asarray(ids, dtype=np.int64))
        dense_rows.append(providers.dense(qa, fact))

    space = FeatureSpace()
    ordered = sorted(provisional, key=lambda n: (GROUPS.index(n.split(":", 1)[0]), n))
    for name in ordered:
        space.add(name)
    width = providers.config.embed_width if "emb" in providers.groups else 0
    emb_start = len(space)
    for i in range(width):
        space.add(f"emb:{i}")
    space.freeze()
    logger.info("feature space: %s", space.group_counts())

    remap = np.empty(len(provisional), dtype=np.int64)
    for name, pid in provisional.items():
        remap[pid] = space.index[name]
    indptr = [0]
    cols, vals = [], []
    for ids, dense in zip(rows, dense_rows):
        c = np.sort(remap[ids])
        v = np.ones(c.size)
        if dense is not None and width:
            nz = np.flatnonzero(dense)
            c = np.concatenate([c, emb_start + nz])
            v = np.concatenate([v, dense[nz]])
        cols.append(c)
        vals.append(v)
        indptr.append(indptr[-1] + c.size)
    c = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    v = np.concatenate(vals) if vals else np.zeros(0)
    X = sp.csr_matrix((v, c, np.asarray(indptr, dtype=np.int64)), shape=(len(rows), len(space)))
    return space, X
