"""Tablestore, QA splits and gold explanations.

Tables are UTF-8 TSV files with a header row. The fact id lives in the
``UID`` column (its header may be bracketed, e.g. ``[SKIP] UID``); the fact
text is every non-bracketed column joined in column order.

Splits are TSV with the columns
``qa_id, question, answer, choices, gold`` where ``choices`` is
``;``-separated and ``gold`` is a space-separated list of ``fact_id|ROLE``.
"""

from __future__ import annotations

import csv
import enum
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .textproc import ProcessedText, TextProcessor, default_processor

logger = logging.getLogger(__name__)

MAX_EXPLANATION_LENGTH = 21
SPLIT_COLUMNS = ("qa_id", "question", "answer", "choices", "gold")


class CorpusError(ValueError):
    """Malformed or inconsistent corpus input."""


class Role(enum.Enum):
    CENTRAL = "CENTRAL"
    GROUNDING = "GROUNDING"
    LEXGLUE = "LEXGLUE"


@dataclass(frozen=True)
class Fact:
    fact_id: str
    table_type: str
    text: str
    processed: ProcessedText = field(repr=False)


class Tablestore:
    """Ordered, immutable collection of facts with an id index."""

    def __init__(self, facts: Sequence[Fact]):
        if not facts:
            raise CorpusError("tablestore is empty")
        self.facts: tuple[Fact, ...] = tuple(facts)
        by_id = {}
        for fact in self.facts:
            if fact.fact_id in by_id:
                raise CorpusError(f"duplicate fact id {fact.fact_id!r}")
            by_id[fact.fact_id] = fact
        self.by_id: Mapping[str, Fact] = by_id
        self._position = {f.fact_id: i for i, f in enumerate(self.facts)}

    def __len__(self) -> int:
        return len(self.facts)

    def __iter__(self):
        return iter(self.facts)

    def __contains__(self, fact_id) -> bool:
        return fact_id in self.by_id

    def __getitem__(self, fact_id: str) -> Fact:
        return self.by_id[fact_id]

    def __eq__(self, other) -> bool:
        return isinstance(other, Tablestore) and self.facts == other.facts

    def position(self, fact_id: str) -> int:
        return self._position[fact_id]

    @property
    def ids(self) -> list[str]:
        return [f.fact_id for f in self.facts]

    @property
    def table_types(self) -> list[str]:
        return sorted({f.table_type for f in self.facts})


@dataclass(frozen=True)
class GoldExplanation:
    entries: tuple[tuple[str, Role], ...]

    def __post_init__(self):
        if not 1 <= len(self.entries) <= MAX_EXPLANATION_LENGTH:
            raise CorpusError(
                f"gold explanation must hold 1..{MAX_EXPLANATION_LENGTH} facts, got {len(self.entries)}"
            )
        ids = [fid for fid, _ in self.entries]
        dupes = [fid for fid, n in Counter(ids).items() if n > 1]
        if dupes:
            raise CorpusError(f"duplicate fact ids in gold explanation: {dupes}")

    @property
    def fact_ids(self) -> list[str]:
        return [fid for fid, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class QaInstance:
    qa_id: str
    question: str
    correct_answer: str
    distractors: tuple[str, ...] = ()
    gold: Optional[GoldExplanation] = None
    q_processed: ProcessedText = field(default=None, repr=False)
    ca_processed: ProcessedText = field(default=None, repr=False)

    def __post_init__(self):
        if not self.question.strip() or not self.correct_answer.strip():
            raise CorpusError(f"{self.qa_id}: question and answer must be non-empty")
        proc = default_processor()
        if self.q_processed is None:
            object.__setattr__(self, "q_processed", proc.process(self.question))
        if self.ca_processed is None:
            object.__setattr__(self, "ca_processed", proc.process(self.correct_answer))


@dataclass(frozen=True)
class SplitSet:
    train: list[QaInstance]
    dev: list[QaInstance]
    test: list[QaInstance]

    def __post_init__(self):
        seen: dict[str, str] = {}
        for name in ("train", "dev", "test"):
            for qa in getattr(self, name):
                if qa.qa_id in seen:
                    raise CorpusError(f"qa_id {qa.qa_id!r} appears in both {seen[qa.qa_id]} and {name}")
                seen[qa.qa_id] = name

    def items(self):
        return (("train", self.train), ("dev", self.dev), ("test", self.test))


def _read_tsv(path: Path) -> list[list[str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [row for row in csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)]


def _is_bracketed(header: str) -> bool:
    return header.strip().startswith("[")


def _strip_brackets(header: str) -> str:
    h = header.strip()
    if h.startswith("[") and "]" in h:
        h = h[h.index("]") + 1 :]
    return h.strip()


def load_tablestore(
    path,
    id_column: str = "UID",
    content_columns: Optional[Mapping[str, Sequence[str]]] = None,
    processor: Optional[TextProcessor] = None,
) -> Tablestore:
    """Load every ``*.tsv`` / ``*.txt`` table in ``path``.

    ``content_columns`` optionally maps a table stem (upper-cased) to the exact
    header names to use as text for that table, overriding the bracket rule.
    """
    root = Path(path)
    if not root.is_dir():
        raise CorpusError(f"tablestore directory not found: {root}")
    proc = processor or default_processor()
    overrides = {k.upper(): list(v) for k, v in (content_columns or {}).items()}
    files = sorted(
        (p for p in root.iterdir() if p.suffix in (".tsv", ".txt") and p.is_file()),
        key=lambda p: (p.stem.upper(), p.name),
    )
    if not files:
        raise CorpusError(f"no table files in {root}")

    facts: list[Fact] = []
    origin: dict[str, str] = {}
    for table_file in files:
        table_type = table_file.stem.upper()
        rows = _read_tsv(table_file)
        if not rows:
            continue
        header = rows[0]
        id_idx = [i for i, h in enumerate(header) if _strip_brackets(h).upper() == id_column.upper()]
        if not id_idx:
            raise CorpusError(f"{table_file}: no {id_column!r} column in header")
        id_idx = id_idx[0]
        if table_type in overrides:
            wanted = overrides[table_type]
            missing = [c for c in wanted if c not in header]
            if missing:
                raise CorpusError(f"{table_file}: override columns not in header: {missing}")
            text_idx = [header.index(c) for c in wanted]
        else:
            text_idx = [i for i, h in enumerate(header) if i != id_idx and not _is_bracketed(h)]

        for lineno, row in enumerate(rows[1:], 2):
            if not any(cell.strip() for cell in row):
                continue
            location = f"{table_file.name}:{lineno}"
            fact_id = row[id_idx].strip() if id_idx < len(row) else ""
            if not fact_id:
                raise CorpusError(f"{location}: missing fact id")
            text = " ".join(row[i].strip() for i in text_idx if i < len(row) and row[i].strip())
            if not text:
                raise CorpusError(f"{location}: fact {fact_id!r} has empty text")
            if fact_id in origin:
                raise CorpusError(f"duplicate fact id {fact_id!r} at {origin[fact_id]} and {location}")
            origin[fact_id] = location
            facts.append(Fact(fact_id, table_type, text, proc.process(text)))
    logger.info("loaded %d facts from %d tables", len(facts), len(files))
    return Tablestore(facts)


def write_tablestore(store: Tablestore, path) -> None:
    """Write one ``<TABLE_TYPE>.tsv`` per table type with an id and a text column."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    grouped: dict[str, list[Fact]] = defaultdict(list)
    for fact in store:
        grouped[fact.table_type].append(fact)
    for table_type in sorted(grouped):
        with open(root / f"{table_type}.tsv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("[SKIP] UID\tTEXT\n")
            for fact in grouped[table_type]:
                fh.write(f"{fact.fact_id}\t{fact.text}\n")


def parse_gold(field_text: str, store: Tablestore, where: str = "") -> Optional[GoldExplanation]:
    field_text = field_text.strip()
    if not field_text:
        return None
    entries = []
    for item in field_text.split():
        fact_id, sep, role_token = item.rpartition("|")
        if not sep:
            raise CorpusError(f"{where}: gold entry {item!r} is not fact_id|ROLE")
        try:
            role = Role(role_token.upper())
        except ValueError:
            raise CorpusError(f"{where}: unknown role {role_token!r} in {item!r}") from None
        if fact_id not in store:
            raise CorpusError(f"{where}: gold fact {fact_id!r} not in tablestore")
        entries.append((fact_id, role))
    try:
        return GoldExplanation(tuple(entries))
    except CorpusError as exc:
        raise CorpusError(f"{where}: {exc}") from None


def load_split(path, store: Tablestore, processor: Optional[TextProcessor] = None) -> list[QaInstance]:
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"split file not found: {path}")
    proc = processor or default_processor()
    instances = []
    seen = set()
    for lineno, row in enumerate(_read_tsv(path), 1):
        if not row or not any(c.strip() for c in row):
            continue
        if lineno == 1 and row[0].strip().lower() == "qa_id":
            continue
        where = f"{path.name}:{lineno}"
        if len(row) < 3:
            raise CorpusError(f"{where}: expected at least qa_id, question and answer columns")
        row = row + [""] * (len(SPLIT_COLUMNS) - len(row))
        qa_id, question, answer, choices, gold = (c.strip() for c in row[:5])
        if qa_id in seen:
            raise CorpusError(f"{where}: duplicate qa_id {qa_id!r}")
        seen.add(qa_id)
        distractors = tuple(c.strip() for c in choices.split(";") if c.strip())
        try:
            qa = QaInstance(
                qa_id,
                question,
                answer,
                distractors,
                parse_gold(gold, store, where),
                proc.process(question),
                proc.process(answer),
            )
        except CorpusError as exc:
            msg = str(exc)
            raise CorpusError(msg if msg.startswith(where) else f"{where}: {msg}") from None
        instances.append(qa)
    return instances


def write_split(instances: Iterable[QaInstance], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(SPLIT_COLUMNS) + "\n")
        for qa in instances:
            gold = " ".join(f"{fid}|{role.value}" for fid, role in qa.gold.entries) if qa.gold else ""
            fh.write("\t".join([qa.qa_id, qa.question, qa.correct_answer, ";".join(qa.distractors), gold]) + "\n")


def load_splits(train, dev, test, store: Tablestore, processor: Optional[TextProcessor] = None) -> SplitSet:
    return SplitSet(
        load_split(train, store, processor),
        load_split(dev, store, processor),
        load_split(test, store, processor),
    )


@dataclass
class CorpusStats:
    total_qa: int
    total_facts: int
    mean_facts: float
    role_totals: dict[str, int]
    role_means: dict[str, float]
    length_histogram: dict[int, int]
    table_percentages: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "total_qa": self.total_qa,
            "total_facts": self.total_facts,
            "mean_facts": self.mean_facts,
            "role_totals": self.role_totals,
            "role_means": self.role_means,
            "length_histogram": {str(k): v for k, v in self.length_histogram.items()},
            "table_percentages": self.table_percentages,
        }

    def format(self) -> str:
        lines = [
            f"Total QA pairs      {self.total_qa}",
            f"Total facts used    {self.total_facts}",
            f"Facts per QA pair   {self.mean_facts:.2f}",
        ]
        for role in Role:
            lines.append(
                f"  {role.value:<10} total {self.role_totals[role.value]:>6}  per QA {self.role_means[role.value]:.2f}"
            )
        for table_type, pct in list(self.table_percentages.items())[:10]:
            lines.append(f"  {table_type:<24} {pct:6.2f}%")
        return "\n".join(lines)


def corpus_stats(instances: Sequence[QaInstance], store: Optional[Tablestore] = None) -> CorpusStats:
    """Explanation statistics over annotated instances.

    Table percentages (share of all gold fact uses drawn from each table
    type, descending) are included when ``store`` is given.
    """
    if not instances:
        raise CorpusError("corpus_stats needs at least one instance")
    role_totals = {role.value: 0 for role in Role}
    lengths = Counter()
    table_counts = Counter()
    total = 0
    for qa in instances:
        if qa.gold is None:
            raise CorpusError(f"{qa.qa_id}: corpus_stats needs gold explanations")
        lengths[len(qa.gold)] += 1
        total += len(qa.gold)
        for fact_id, role in qa.gold.entries:
            role_totals[role.value] += 1
            if store is not None:
                table_counts[store[fact_id].table_type] += 1
    n = len(instances)
    percentages = {
        t: 100.0 * c / total for t, c in sorted(table_counts.items(), key=lambda kv: (-kv[1], kv[0]))
    }
    return CorpusStats(
        total_qa=n,
        total_facts=total,
        mean_facts=total / n,
        role_totals=role_totals,
        role_means={r: c / n for r, c in role_totals.items()},
        length_histogram=dict(sorted(lengths.items())),
        table_percentages=percentages,
    )


def table_rank_proportions(
    instances: Sequence[QaInstance], store: Tablestore, max_rank: int = 10
) -> dict[str, dict[str, float]]:
    """Per table type, the share of its gold facts found at positions 1..max_rank and beyond."""
    counts: dict[str, Counter] = defaultdict(Counter)
    for qa in instances:
        if qa.gold is None:
            continue
        for pos, fact_id in enumerate(qa.gold.fact_ids, 1):
            bucket = str(pos) if pos <= max_rank else f">{max_rank}"
            counts[store[fact_id].table_type][bucket] += 1
    buckets = [str(i) for i in range(1, max_rank + 1)] + [f">{max_rank}"]
    out = {}
    for table_type in sorted(counts, key=lambda t: (-sum(counts[t].values()), t)):
        total = sum(counts[table_type].values())
        out[table_type] = {b: counts[table_type][b] / total for b in buckets}
    return out
