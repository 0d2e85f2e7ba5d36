#!/usr/bin/env python3
"""Convert a released WorldTree questions file into the split TSV read by ``explainrank``.

The released file carries the answer options inline in the question text,
``"... ? (A) one (B) two (C) three (D) four"``, an ``AnswerKey`` column holding
a letter or a 1-based number, and an ``explanation`` column of ``uid|ROLE``
tokens. Roles outside the three used here are folded: BACKGROUND becomes
GROUNDING, NEG / NE rows are dropped.

    python scripts/convert_worldtree.py questions.train.tsv train.tsv --tables tables/
"""

import argparse
import csv
import logging
import re
import sys
from pathlib import Path

logger = logging.getLogger("convert_worldtree")

ROLE_MAP = {
    "CENTRAL": "CENTRAL",
    "GROUNDING": "GROUNDING",
    "LEXGLUE": "LEXGLUE",
    "BACKGROUND": "GROUNDING",
}
DROPPED_ROLES = {"NEG", "NE"}
OPTION_RE = re.compile(r"\(([A-Ha-h1-8])\)\s*")


def split_options(text: str) -> tuple[str, list[tuple[str, str]]]:
    parts = OPTION_RE.split(text)
    stem = parts[0].strip()
    options = [(parts[i].upper(), parts[i + 1].strip()) for i in range(1, len(parts) - 1, 2)]
    return stem, options


def convert_gold(explanation: str, known=None) -> tuple[str, int]:
    """Return the rewritten gold string and how many tokens were dropped."""
    out, dropped, seen = [], 0, set()
    for token in explanation.split():
        uid, _, role = token.partition("|")
        role = role.upper().replace(" ", "")
        if role in DROPPED_ROLES or (known is not None and uid not in known) or uid in seen:
            dropped += 1
            continue
        if role not in ROLE_MAP:
            raise ValueError(f"unknown role {role!r} in {token!r}")
        seen.add(uid)
        out.append(f"{uid}|{ROLE_MAP[role]}")
    return " ".join(out[:21]), dropped + max(0, len(out) - 21)


def known_ids(tables: Path) -> set:
    ids = set()
    for path in sorted(tables.glob("*.tsv")):
        with open(path, encoding="utf-8") as fh:
            rows = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
            header = next(rows)
            col = next(i for i, h in enumerate(header) if "UID" in h)
            ids.update(r[col] for r in rows if len(r) > col and r[col])
    return ids


def convert(src: Path, dst: Path, tables=None) -> int:
    known = known_ids(tables) if tables else None
    written = dropped = 0
    with open(src, encoding="utf-8", newline="") as fh, open(dst, "w", encoding="utf-8", newline="\n") as out:
        out.write("qa_id\tquestion\tanswer\tchoices\tgold\n")
        for row in csv.DictReader(fh, delimiter="\t", quoting=csv.QUOTE_NONE):
            stem, options = split_options(row["question"])
            key = row["AnswerKey"].strip().upper()
            if key.isdigit():
                key = "ABCDEFGH"[int(key) - 1]
            labels = [label if not label.isdigit() else "ABCDEFGH"[int(label) - 1] for label, _ in options]
            if key not in labels:
                logger.warning("%s: answer key %r not among options, skipped", row["QuestionID"], key)
                continue
            answer = options[labels.index(key)][1]
            others = [text.replace(";", ",") for lab, (_, text) in zip(labels, options) if lab != key]
            gold, n_drop = convert_gold(row.get("explanation") or "", known)
            dropped += n_drop
            cells = [row["QuestionID"], stem, answer, ";".join(others), gold]
            out.write("\t".join(c.replace("\t", " ") for c in cells) + "\n")
            written += 1
    logger.info("wrote %d rows to %s (%d explanation tokens dropped)", written, dst, dropped)
    return written


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("source")
    p.add_argument("target")
    p.add_argument("--tables", help="tablestore directory; explanation uids not found there are dropped")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    convert(Path(args.source), Path(args.target), Path(args.tables) if args.tables else None)
    return 0


if __name__ == "__main__":
    sys.exit(main())
