"""Document pool loading, filtering and sampling.

Input records arrive as JSONL or TSV files with an ``id`` and a ``text``
column (``created_at`` optional, RFC 3339). A corpus is immutable once
built; filtering returns a new corpus plus a report of per-rule drop
counts.
"""

from __future__ import annotations

import dataclasses
import json
import random
import unicodedata
from csv import QUOTE_MINIMAL, reader as csv_reader, writer as csv_writer
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

# Terms used to keep only tweets about containment measures.
DEFAULT_FILTER_KEYWORDS: tuple[str, ...] = (
    "stayhomesavelifes",
    "wirbleibenzuhause",
    "bleibdaheim",
    "abstandhalten",
    "flatthecurve",
    "flattenthecurve",
    "sperre",
    "verbot",
    "beschraenkung",
    "quarantäne",
    "quarantaene",
    "wirvsvirus",
    "schließung",
    "homeoffice",
    "infektionsschutz",
    "ansteckungsrisiko",
    "notbetrieb",
    "bleibtzuhause",
    "stayhome",
)


class CorpusError(Exception):
    """Malformed corpus input; carries the offending line when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class Document:
    """One annotatable text with a stable source id."""

    id: str
    text: str
    created_at: Optional[datetime] = None
    char_len: int = field(init=False)

    def __post_init__(self):
        # len() counts unicode scalar values, which is the length rule we filter on
        object.__setattr__(self, "char_len", len(self.text))


@dataclass(frozen=True)
class FilterConfig:
    keywords: tuple[str, ...] = DEFAULT_FILTER_KEYWORDS
    min_length: int = 30
    drop_duplicates: bool = True
    drop_retweets: bool = True

    def __post_init__(self):
        if not self.keywords:
            raise ValueError("keyword filtering enabled but keyword list is empty")
        object.__setattr__(
            self, "keywords", tuple(_normalize(k).lower() for k in self.keywords)
        )


@dataclass(frozen=True)
class FilterReport:
    """Per-rule drop counts; rules are checked in this order per document."""

    input_size: int
    output_size: int
    dropped_no_keyword: int = 0
    dropped_short: int = 0
    dropped_retweet: int = 0
    dropped_duplicate: int = 0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


class Corpus:
    """An ordered, immutable collection of documents with unique ids."""

    def __init__(self, documents: Iterable[Document]):
        docs = tuple(documents)
        seen: set[str] = set()
        for d in docs:
            if d.id in seen:
                raise CorpusError(f"duplicate document id {d.id!r}")
            seen.add(d.id)
        self._docs = docs
        self._by_id = {d.id: d for d in docs}

    def __len__(self) -> int:
        return len(self._docs)

    def __iter__(self) -> Iterator[Document]:
        return iter(self._docs)

    def __getitem__(self, i: int) -> Document:
        return self._docs[i]

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._by_id

    def get(self, doc_id: str) -> Document:
        return self._by_id[doc_id]

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(d.id for d in self._docs)


def _normalize(text: str) -> str:
    return unicodedata.normalize("NFC", text)


def _parse_created_at(raw: str, line: int) -> datetime:
    # RFC 3339; fromisoformat on 3.10 does not accept a trailing Z
    try:
        dt = datetime.fromisoformat(raw.replace("Z", "+00:00"))
    except ValueError:
        raise CorpusError(f"invalid created_at timestamp {raw!r}", line=line) from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def _record_to_document(rec: dict, line: int) -> Document:
    for key in ("id", "text"):
        if key not in rec or rec[key] is None:
            raise CorpusError(f"record missing {key!r} field", line=line)
        if not isinstance(rec[key], str):
            raise CorpusError(f"field {key!r} must be a string", line=line)
    created = None
    raw_created = rec.get("created_at")
    if raw_created:
        created = _parse_created_at(raw_created, line)
    return Document(id=rec["id"], text=rec["text"], created_at=created)


def load_corpus(path: str | Path, format: str = "jsonl") -> Corpus:
    """Load a corpus from a JSONL or TSV file, preserving input order.

    Raises CorpusError with the offending line number on malformed
    records and on duplicate ids.
    """
    path = Path(path)
    if format == "jsonl":
        docs = list(_iter_jsonl(path))
    elif format == "tsv":
        docs = list(_iter_tsv(path))
    else:
        raise ValueError(f"unsupported corpus format {format!r}")
    return Corpus(docs)


def _iter_jsonl(path: Path) -> Iterator[Document]:
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"invalid JSON: {exc.msg}", line=line_no) from None
            if not isinstance(rec, dict):
                raise CorpusError("record must be a JSON object", line=line_no)
            yield _record_to_document(rec, line_no)


def _iter_tsv(path: Path) -> Iterator[Document]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = csv_reader(fh, delimiter="\t", quoting=QUOTE_MINIMAL)
        try:
            header = next(rows)
        except StopIteration:
            raise CorpusError("empty TSV file", line=1) from None
        if header[:2] != ["id", "text"]:
            raise CorpusError(
                f"TSV header must start with id\\ttext, got {header!r}", line=1
            )
        for line_no, row in enumerate(rows, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise CorpusError("row has fewer than 2 columns", line=line_no)
            rec = {"id": row[0], "text": row[1]}
            if len(row) > 2 and row[2]:
                rec["created_at"] = row[2]
            yield _record_to_document(rec, line_no)


def save_corpus(corpus: Corpus, path: str | Path, format: str = "jsonl") -> None:
    """Write a corpus back out; load(save(c)) round-trips id and text exactly."""
    path = Path(path)
    if format == "jsonl":
        with open(path, "w", encoding="utf-8") as fh:
            for d in corpus:
                rec: dict = {"id": d.id, "text": d.text}
                if d.created_at is not None:
                    rec["created_at"] = d.created_at.isoformat()
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    elif format == "tsv":
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv_writer(fh, delimiter="\t", quoting=QUOTE_MINIMAL)
            w.writerow(["id", "text", "created_at"])
            for d in corpus:
                w.writerow(
                    [d.id, d.text, d.created_at.isoformat() if d.created_at else ""]
                )
    else:
        raise ValueError(f"unsupported corpus format {format!r}")


def _is_retweet(text: str) -> bool:
    return text.strip().startswith("RT @")


def filter_corpus(corpus: Corpus, cfg: FilterConfig) -> tuple[Corpus, FilterReport]:
    """Apply keyword, length, retweet and duplicate rules, in that order.

    Each dropped document counts against exactly the first rule it fails,
    so the report's drop counts sum to ``len(input) - len(output)``.
    Duplicate means exact text match after NFC normalization and
    whitespace trimming; the first occurrence wins.
    """
    kept: list[Document] = []
    seen_texts: set[str] = set()
    no_keyword = short = retweet = duplicate = 0
    for doc in corpus:
        haystack = _normalize(doc.text).lower()
        if not any(k in haystack for k in cfg.keywords):
            no_keyword += 1
            continue
        if doc.char_len < cfg.min_length:
            short += 1
            continue
        if cfg.drop_retweets and _is_retweet(doc.text):
            retweet += 1
            continue
        if cfg.drop_duplicates:
            key = _normalize(doc.text).strip()
            if key in seen_texts:
                duplicate += 1
                continue
            seen_texts.add(key)
        kept.append(doc)
    report = FilterReport(
        input_size=len(corpus),
        output_size=len(kept),
        dropped_no_keyword=no_keyword,
        dropped_short=short,
        dropped_retweet=retweet,
        dropped_duplicate=duplicate,
    )
    return Corpus(kept), report


def sample_uniform(corpus: Corpus, n: int, seed: int) -> Corpus:
    """Draw n distinct documents uniformly at random, deterministic per seed."""
    if n > len(corpus):
        raise ValueError(f"cannot sample {n} documents from a corpus of {len(corpus)}")
    rng = random.Random(seed)
    return Corpus(rng.sample(list(corpus), n))


def subset(corpus: Corpus, ids: Sequence[str]) -> Corpus:
    """Corpus restricted to the given ids, in the given order."""
    return Corpus(corpus.get(i) for i in ids)


def load_labeled(path: str | Path):
    """Read labeled documents from JSONL with id/text/label keys."""
    from .labels import LabelCategory

    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"invalid JSON: {exc.msg}", line=line_no) from None
            doc = _record_to_document(rec, line_no)
            if "label" not in rec:
                raise CorpusError("record missing 'label' field", line=line_no)
            out.append((doc, LabelCategory.from_name(rec["label"])))
    return out


def save_labeled(data, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc, label in data:
            rec = {"id": doc.id, "text": doc.text, "label": label.name}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
