"""Paragraph extraction from scraped HTML pages."""
from __future__ import annotations

import re
import warnings

from bs4 import BeautifulSoup, Comment, MarkupResemblesLocatorWarning

from .types import RawDocument

_WS = re.compile(r"\s+")

# Paragraphs nested inside these are page chrome, not content.
EXCLUDED_TAGS = ("script", "style", "nav", "noscript", "template", "header", "footer", "aside")


def extract_paragraphs(doc: RawDocument | str) -> list[str]:
    body = doc.body if isinstance(doc, RawDocument) else doc
    if isinstance(doc, RawDocument) and doc.kind != "html":
        raise ValueError(f"extract_paragraphs needs an html document, got {doc.kind!r}")
    if not body.strip():
        return []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MarkupResemblesLocatorWarning)
        soup = BeautifulSoup(body, "html.parser")
    for tag in soup.find_all(EXCLUDED_TAGS):
        tag.decompose()
    for br in soup.find_all("br"):
        br.replace_with(" ")

    blocks = []
    for p in soup.find_all("p"):
        # an unclosed <p> swallows the following ones; each keeps only its own text
        pieces = [s for s in p.find_all(string=True) if not isinstance(s, Comment) and s.find_parent("p") is p]
        text = _WS.sub(" ", "".join(pieces)).strip()
        if text:
            blocks.append(text)
    return blocks
