"""Tokenization, lemmatization, stopword masking, affixes and positional zones.

Everything here is deterministic and offline: the lemmatizer is a shipped
inflection lexicon backed by a handful of suffix rules, and the stopword and
verb lists are plain data files that can be swapped for custom ones.
"""

from __future__ import annotations

import enum
import math
import os
import string
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

_STRIP_CHARS = string.punctuation + "\u2018\u2019\u201c\u201d\u2013\u2014\u00a0"
_VOWELS = set("aeiou")
AFFIX_SIZES = (5, 4, 3)


class Zone(enum.Enum):
    FIRST = "first"
    MIDDLE = "middle"
    LAST = "last"


@dataclass(frozen=True)
class ProcessedText:
    tokens: tuple[str, ...]
    lemmas: tuple[str, ...]
    content_mask: tuple[bool, ...]

    def __post_init__(self):
        if not (len(self.tokens) == len(self.lemmas) == len(self.content_mask)):
            raise ValueError("tokens, lemmas and content_mask must be parallel")

    @property
    def length(self) -> int:
        return len(self.tokens)

    @property
    def content_lemmas(self) -> list[str]:
        return [lem for lem, keep in zip(self.lemmas, self.content_mask) if keep]

    @property
    def content_tokens(self) -> list[str]:
        return [tok for tok, keep in zip(self.tokens, self.content_mask) if keep]

    def to_dict(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "lemmas": list(self.lemmas),
            "content_mask": list(self.content_mask),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProcessedText":
        return cls(tuple(d["tokens"]), tuple(d["lemmas"]), tuple(bool(m) for m in d["content_mask"]))


def _data_path(name: str):
    return resources.files("explainrank").joinpath("data", name)


def _read_text(path) -> str:
    if isinstance(path, (str, os.PathLike)):
        path = Path(path)
    return path.read_text(encoding="utf-8")


def read_word_list(path) -> frozenset[str]:
    """Read a one-entry-per-line list; blank lines and ``#`` comments are skipped."""
    text = _read_text(path)
    words = set()
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            words.add(line.lower())
    return frozenset(words)


def read_lexicon(path) -> dict[str, str]:
    text = _read_text(path)
    lexicon = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"lexicon line {lineno}: expected 'inflected<TAB>lemma', got {line!r}")
        lexicon[parts[0].strip().lower()] = parts[1].strip().lower()
    return lexicon


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and strip punctuation around each token.

    >>> tokenize("water vapor (gas)")
    ['water', 'vapor', 'gas']
    """
    tokens = []
    for chunk in text.lower().split():
        tok = chunk.strip(_STRIP_CHARS)
        if tok:
            tokens.append(tok)
    return tokens


def _is_cvc(stem: str) -> bool:
    if len(stem) < 3:
        return False
    c1, v, c2 = stem[-3], stem[-2], stem[-1]
    return c1 not in _VOWELS and v in _VOWELS and c2 not in _VOWELS and c2 not in "wxynrl"


def _repair(stem: str) -> str:
    # undo consonant doubling (stopp -> stop) or restore a dropped e (hop -> hope)
    if len(stem) >= 3 and stem[-1] == stem[-2] and stem[-1] not in _VOWELS and stem[-1] not in "lsz":
        return stem[:-1]
    if len(stem) <= 4 and _is_cvc(stem):
        return stem + "e"
    return stem


def _rule_step(token: str) -> str:
    """One suffix-stripping step. Always returns a strictly shorter string or ``token``."""
    if len(token) <= 3 or not token.isalpha():
        return token
    if token.endswith("ies") and len(token) > 4:
        return token[:-3] + "y"
    if token.endswith(("sses", "ches", "shes", "xes", "zzes")):
        return token[:-2]
    if token.endswith("s") and not token.endswith(("ss", "us", "is")):
        return token[:-1]
    if token.endswith("ied") and len(token) > 4:
        return token[:-3] + "y"
    if token.endswith("ed") and len(token) >= 5:
        stem = token[:-2]
        if any(ch in _VOWELS for ch in stem):
            return _repair(stem)
    if token.endswith("ing") and len(token) >= 6:
        stem = token[:-3]
        if len(stem) >= 3 and any(ch in _VOWELS for ch in stem):
            return _repair(stem)
    return token


class TextProcessor:
    """Bundle of lexicon, stopword list and verb list with the operations that use them."""

    def __init__(self, lexicon: dict[str, str], stopwords: frozenset[str], verbs: frozenset[str]):
        self.lexicon = dict(lexicon)
        self.stopwords = frozenset(stopwords)
        self.verbs = frozenset(verbs)
        bad = [v for v in set(self.lexicon.values()) if self._step(v) != v]
        if bad:
            raise ValueError(f"lexicon lemmas are not fixed points of the lemmatizer: {sorted(bad)[:10]}")
        self._lemma_cache: dict[str, str] = {}

    @classmethod
    def default(cls) -> "TextProcessor":
        return cls(
            read_lexicon(_data_path("lexicon.tsv")),
            read_word_list(_data_path("stopwords.txt")),
            read_word_list(_data_path("verbs.txt")),
        )

    @classmethod
    def from_files(cls, lexicon=None, stopwords=None, verbs=None) -> "TextProcessor":
        return cls(
            read_lexicon(lexicon or _data_path("lexicon.tsv")),
            read_word_list(stopwords or _data_path("stopwords.txt")),
            read_word_list(verbs or _data_path("verbs.txt")),
        )

    def _step(self, token: str) -> str:
        if token in self.lexicon:
            return self.lexicon[token]
        return _rule_step(token)

    def lemmatize(self, token: str) -> str:
        """Lexicon lookup, then suffix rules applied until nothing changes."""
        cached = self._lemma_cache.get(token)
        if cached is not None:
            return cached
        current = token.lower()
        while True:
            if current in self.lexicon:
                current = self.lexicon[current]
                break
            nxt = _rule_step(current)
            if nxt == current:
                break
            current = nxt
        self._lemma_cache[token] = current
        return current

    def is_stopword(self, token: str) -> bool:
        return token in self.stopwords

    def is_verb(self, lemma: str) -> bool:
        return lemma in self.verbs

    def process(self, text: str) -> ProcessedText:
        tokens = tokenize(text)
        lemmas = tuple(self.lemmatize(t) for t in tokens)
        mask = tuple(t not in self.stopwords for t in tokens)
        return ProcessedText(tuple(tokens), lemmas, mask)


@lru_cache(maxsize=1)
def default_processor() -> TextProcessor:
    return TextProcessor.default()


def lemmatize(token: str) -> str:
    return default_processor().lemmatize(token)


def process(text: str) -> ProcessedText:
    return default_processor().process(text)


def affixes(lemma: str) -> set[str]:
    """Prefixes and suffixes of length 5, 4 and 3, tagged by side and size.

    >>> sorted(affixes("sun"))
    ['pre3=sun', 'suf3=sun']
    """
    out = set()
    for n in AFFIX_SIZES:
        if len(lemma) >= n:
            out.add(f"pre{n}={lemma[:n]}")
            out.add(f"suf{n}={lemma[-n:]}")
    return out


def middle_window(length: int) -> tuple[int, int]:
    """Inclusive (start, end) of the middle zone: width ceil(L/4) centred on floor(L/2)."""
    if length < 1:
        raise ValueError("length must be positive")
    width = math.ceil(length / 4)
    start = length // 2 - width // 2
    return start, start + width - 1


def zone_of(index: int, length: int) -> Zone:
    if not 0 <= index < length:
        raise IndexError(f"position {index} outside a sentence of {length} tokens")
    start, end = middle_window(length)
    if index < start:
        return Zone.FIRST
    if index > end:
        return Zone.LAST
    return Zone.MIDDLE
