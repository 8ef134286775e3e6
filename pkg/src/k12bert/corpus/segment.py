"""Rule-based English sentence segmentation."""
from __future__ import annotations

import re

# Lowercased tokens whose trailing period never ends a sentence.
ABBREVIATIONS = frozenset({
    "fig.", "figs.", "e.g.", "i.e.", "etc.", "vs.", "viz.", "cf.", "approx.",
    "dr.", "mr.", "mrs.", "ms.", "prof.", "st.", "jr.", "sr.", "mt.",
    "no.", "nos.", "eq.", "eqs.", "vol.", "ch.", "sec.", "pp.", "p.", "ex.",
    "u.s.", "u.k.", "a.m.", "p.m.", "ca.", "al.", "inc.", "ltd.", "co.",
})

# A run of terminators, then any closing quotes/brackets.
_TERMINATOR = re.compile(r"[.!?]+[\"'”’)\]]*")
_LAST_WORD = re.compile(r"\S*$")


def _is_boundary(text: str, end: int) -> bool:
    rest = text[end:]
    if not rest.strip():
        return True
    if not rest[0].isspace():
        # "3.5", "e.g.x", "U.S." mid-token
        return False
    nxt = rest.lstrip()[0]
    # lowercase continuation means the period was not a sentence end
    return not nxt.islower()


def segment_sentences(block: str) -> list[str]:
    sentences = []
    start = 0
    for m in _TERMINATOR.finditer(block):
        end = m.end()
        if not _is_boundary(block, end):
            continue
        word = _LAST_WORD.search(block, start, m.start()).group()
        token = (word + m.group()).lower().lstrip("\"'([“‘")
        if token.rstrip("\"'”’)]") in ABBREVIATIONS and block[end:].strip():
            continue
        sentence = block[start:end].strip()
        if sentence:
            sentences.append(sentence)
        start = end
    tail = block[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences
