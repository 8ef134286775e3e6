from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

SUBJECT_CODES = frozenset({"P", "C", "B", "SS", "H", "L", "E"})

SUBJECT_NAMES = {
    "P": "Physics",
    "C": "Chemistry",
    "B": "Biology",
    "SS": "Social studies",
    "H": "Physical science",
    "L": "Life science",
    "E": "Earth science",
}

# Default subject coverage of the known K-12 sources.
SOURCE_SUBJECTS: dict[str, frozenset[str]] = {
    "ncert": frozenset({"P", "C", "B", "SS"}),
    "siyavula": frozenset({"H", "L"}),
    "openstax": frozenset({"P", "C", "B"}),
    "learncbse": frozenset({"P", "C", "B", "SS"}),
    "ck12": frozenset({"P", "C", "B", "L", "H", "E"}),
    "khanacademy": frozenset({"P", "C", "B", "SS"}),
    "extramarks": frozenset({"P", "C", "B", "H", "SS"}),
}

SOURCE_HOSTS = {
    "ncert.nic.in": "ncert",
    "siyavula.com": "siyavula",
    "openstax.org": "openstax",
    "learncbse.in": "learncbse",
    "ck12.org": "ck12",
    "khanacademy.org": "khanacademy",
    "extramarks.com": "extramarks",
}

DOC_KINDS = ("html", "plain_text")


@dataclass(frozen=True)
class RawDocument:
    doc_id: str
    source: str
    subjects: frozenset[str]
    kind: str
    body: str

    def __post_init__(self):
        object.__setattr__(self, "subjects", frozenset(self.subjects))
        if not self.subjects:
            raise ValueError(f"document {self.doc_id!r} has no subjects")
        unknown = self.subjects - SUBJECT_CODES
        if unknown:
            raise ValueError(f"document {self.doc_id!r}: unknown subject codes {sorted(unknown)}")
        if self.kind not in DOC_KINDS:
            raise ValueError(f"document {self.doc_id!r}: kind must be one of {DOC_KINDS}, got {self.kind!r}")


@dataclass(frozen=True)
class SentenceRecord:
    text: str
    doc_id: str
    source: str
    subjects: frozenset[str]
    seq_no: int
    approved_words: int
    rejected_words: int

    def to_json(self) -> dict:
        return {
            "text": self.text,
            "doc_id": self.doc_id,
            "source": self.source,
            "subjects": sorted(self.subjects),
            "seq_no": self.seq_no,
            "approved_words": self.approved_words,
            "rejected_words": self.rejected_words,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SentenceRecord":
        return cls(
            text=obj["text"],
            doc_id=obj["doc_id"],
            source=obj["source"],
            subjects=frozenset(obj["subjects"]),
            seq_no=int(obj["seq_no"]),
            approved_words=int(obj["approved_words"]),
            rejected_words=int(obj["rejected_words"]),
        )


@dataclass(frozen=True)
class Dictionary:
    """Case-insensitive word set used by the spellcheck filter."""

    words: frozenset[str] = field(repr=False)

    def __post_init__(self):
        if not self.words:
            raise ValueError("dictionary is empty")

    def __contains__(self, word: str) -> bool:
        return word.lower() in self.words

    def __len__(self) -> int:
        return len(self.words)

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "Dictionary":
        return cls(frozenset(w.strip().lower() for w in words if w.strip()))


def default_dictionary_path() -> Path:
    return Path(__file__).resolve().parent.parent / "data" / "english_words.txt"


def load_dictionary(path: str | Path | None = None) -> Dictionary:
    """Load a one-word-per-line wordlist; ``#`` lines are comments."""
    path = Path(path) if path is not None else default_dictionary_path()
    words = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            words.append(line)
    return Dictionary.from_words(words)
