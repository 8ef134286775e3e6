from __future__ import annotations

import re
import string
import unicodedata
from collections import Counter
from typing import Iterable, Iterator, NamedTuple, Sequence

from .types import Dictionary, SentenceRecord

DEVANAGARI = (0x0900, 0x097F)
DEFAULT_DISALLOWED_BLOCKS: tuple[tuple[int, int], ...] = (DEVANAGARI,)

_NUMERIC = re.compile(r"^[+-]?(?=.*\d)[\d.,/:]+$")
_WS = re.compile(r"\s+")


class FilterDecision(NamedTuple):
    keep: bool
    reason: str | None = None


class SpellcheckResult(NamedTuple):
    keep: bool
    approved: int
    rejected: int


def script_filter(
    sentence: str, disallowed_blocks: Sequence[tuple[int, int]] = DEFAULT_DISALLOWED_BLOCKS
) -> FilterDecision:
    """Drop sentences containing any code point inside a disallowed block."""
    if not sentence.strip():
        return FilterDecision(False, "empty")
    for ch in sentence:
        cp = ord(ch)
        for lo, hi in disallowed_blocks:
            if lo <= cp <= hi:
                return FilterDecision(False, "script")
    return FilterDecision(True)


def _strip_punct(token: str) -> str:
    start, end = 0, len(token)
    while start < end and _is_punct(token[start]):
        start += 1
    while end > start and _is_punct(token[end - 1]):
        end -= 1
    return token[start:end]


def _is_punct(ch: str) -> bool:
    return ch in string.punctuation or unicodedata.category(ch).startswith(("P", "S"))


def word_tokens(sentence: str) -> list[str]:
    """Whitespace tokens, surrounding punctuation stripped, lowercased, blanks removed."""
    out = []
    for raw in sentence.split():
        tok = _strip_punct(raw).lower()
        if tok:
            out.append(tok)
    return out


def spellcheck_filter(sentence: str, dictionary: Dictionary) -> SpellcheckResult:
    approved = rejected = 0
    for tok in word_tokens(sentence):
        if _NUMERIC.match(tok):
            continue
        if tok in dictionary or ("-" in tok and all(p in dictionary for p in tok.split("-") if p)):
            approved += 1
        else:
            rejected += 1
    return SpellcheckResult(approved > rejected, approved, rejected)


def normalize_for_dedup(text: str) -> str:
    return _WS.sub(" ", text.casefold()).strip()


def dedup(records: Iterable[SentenceRecord], stats: Counter | None = None) -> Iterator[SentenceRecord]:
    """Exact dedup on casefolded, whitespace-collapsed text; first occurrence wins.

    Drops are counted in ``stats["dropped_by_dedup"]`` when a counter is given.
    """
    seen: set[str] = set()
    for rec in records:
        key = normalize_for_dedup(rec.text)
        if key in seen:
            if stats is not None:
                stats["dropped_by_dedup"] += 1
            continue
        seen.add(key)
        yield rec
