"""Document -> filtered sentence corpus, plus the per-source manifest."""
from __future__ import annotations

import json
import logging
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import partial
from pathlib import Path
from typing import Iterable, Sequence

from .filters import (
    DEFAULT_DISALLOWED_BLOCKS,
    dedup,
    script_filter,
    spellcheck_filter,
    word_tokens,
)
from .html import extract_paragraphs
from .segment import segment_sentences
from .types import SOURCE_SUBJECTS, Dictionary, RawDocument, SentenceRecord

log = logging.getLogger(__name__)

STAT_KEYS = (
    "input_sentences",
    "dropped_empty",
    "dropped_by_script",
    "dropped_by_length",
    "dropped_by_spellcheck",
    "dropped_by_dedup",
)


@dataclass(frozen=True)
class IngestConfig:
    min_words: int = 4
    disallowed_blocks: tuple[tuple[int, int], ...] = DEFAULT_DISALLOWED_BLOCKS
    include_sources: tuple[str, ...] = ()
    exclude_sources: tuple[str, ...] = ()

    def __post_init__(self):
        overlap = set(self.include_sources) & set(self.exclude_sources)
        if overlap:
            raise ValueError(f"sources both included and excluded: {sorted(overlap)}")

    def wants(self, source: str) -> bool:
        if self.include_sources and source not in self.include_sources:
            return False
        return source not in self.exclude_sources


@dataclass
class IngestResult:
    records: list[SentenceRecord]
    stats: Counter = field(default_factory=Counter)


def document_blocks(doc: RawDocument) -> list[str]:
    if doc.kind == "html":
        return extract_paragraphs(doc)
    # plain-text dumps: blank lines separate blocks, single newlines are soft wraps
    blocks = []
    for chunk in doc.body.split("\n\n"):
        chunk = " ".join(chunk.split())
        if chunk:
            blocks.append(chunk)
    return blocks


def process_document(doc: RawDocument, dictionary: Dictionary, config: IngestConfig) -> tuple[list[SentenceRecord], Counter]:
    """Segment and filter one document. Dedup happens later, across documents."""
    stats = Counter({k: 0 for k in STAT_KEYS})
    out = []
    seq_no = 0
    for block in document_blocks(doc):
        for sentence in segment_sentences(block):
            pos = seq_no
            seq_no += 1
            stats["input_sentences"] += 1
            decision = script_filter(sentence, config.disallowed_blocks)
            if not decision.keep:
                stats["dropped_empty" if decision.reason == "empty" else "dropped_by_script"] += 1
                continue
            if len(word_tokens(sentence)) < config.min_words:
                stats["dropped_by_length"] += 1
                continue
            check = spellcheck_filter(sentence, dictionary)
            if not check.keep:
                stats["dropped_by_spellcheck"] += 1
                continue
            out.append(SentenceRecord(sentence, doc.doc_id, doc.source, doc.subjects, pos,
                                      check.approved, check.rejected))
    return out, stats


def ingest(
    documents: Iterable[RawDocument],
    dictionary: Dictionary,
    config: IngestConfig = IngestConfig(),
    jobs: int = 1,
) -> IngestResult:
    docs = [d for d in documents if config.wants(d.source)]
    ids = [d.doc_id for d in docs]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate doc_id(s): {dupes[:5]}")
    # merge order is fixed regardless of scheduling
    docs.sort(key=lambda d: (d.source, d.doc_id))

    work = partial(process_document, dictionary=dictionary, config=config)
    if jobs > 1 and len(docs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, docs, chunksize=max(1, len(docs) // (4 * jobs))))
    else:
        results = [work(d) for d in docs]

    stats = Counter({k: 0 for k in STAT_KEYS})
    merged: list[SentenceRecord] = []
    for recs, doc_stats in results:
        stats.update(doc_stats)
        merged.extend(recs)
    records = list(dedup(merged, stats))
    log.info("ingested %d documents: %d sentences in, %d kept", len(docs), stats["input_sentences"], len(records))
    return IngestResult(records, stats)


def build_manifest(records: Sequence[SentenceRecord], stats: Counter | None = None, timestamp: str | None = None) -> dict:
    per_source = Counter(r.source for r in records)
    stats = stats or Counter()
    manifest = {
        "per_source": {k: per_source[k] for k in sorted(per_source)},
        "total": sum(per_source.values()),
    }
    for k in STAT_KEYS:
        manifest[k] = int(stats.get(k, 0))
    manifest["timestamp"] = timestamp or datetime.now(timezone.utc).replace(microsecond=0).isoformat()
    return manifest


def write_manifest(manifest: dict, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def read_manifest(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as f:
        manifest = json.load(f)
    missing = {"per_source", "total", "dropped_by_script", "dropped_by_spellcheck", "dropped_by_dedup", "timestamp"} - manifest.keys()
    if missing:
        raise ValueError(f"{path}: manifest missing fields {sorted(missing)}")
    return manifest


def reference_manifest() -> dict:
    """Published corpus sizes per source, for documentation only."""
    path = Path(__file__).resolve().parent.parent / "data" / "reference_manifest.json"
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def write_corpus(records: Iterable[SentenceRecord], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec.to_json(), ensure_ascii=False))
            f.write("\n")
            n += 1
    return n


def read_corpus(path: str | Path) -> list[SentenceRecord]:
    with open(path, encoding="utf-8") as f:
        return [SentenceRecord.from_json(json.loads(line)) for line in f if line.strip()]


def _read_subjects(source_dir: Path, source: str) -> frozenset[str]:
    f = source_dir / "subjects.txt"
    if f.exists():
        return frozenset(c.strip() for c in f.read_text(encoding="utf-8").replace("\n", ",").split(",") if c.strip())
    if source in SOURCE_SUBJECTS:
        return SOURCE_SUBJECTS[source]
    raise ValueError(f"{source_dir}: no subjects.txt and {source!r} is not a known source")


def load_documents(path: str | Path) -> list[RawDocument]:
    """Load raw documents from a JSON Lines file or a directory.

    A directory may hold ``*.jsonl`` document files and/or one subdirectory per
    source containing ``*.html``/``*.htm``/``*.txt`` files (doc_id is
    ``<source>/<relative path without suffix>``).
    """
    path = Path(path)
    if path.is_file():
        return _load_jsonl_documents(path)
    if not path.is_dir():
        raise FileNotFoundError(path)
    docs = []
    for f in sorted(path.glob("*.jsonl")):
        docs.extend(_load_jsonl_documents(f))
    for source_dir in sorted(p for p in path.iterdir() if p.is_dir()):
        source = source_dir.name
        files = sorted(p for p in source_dir.rglob("*") if p.suffix.lower() in (".html", ".htm", ".txt") and p.name != "subjects.txt")
        if not files:
            continue
        subjects = _read_subjects(source_dir, source)
        for f in files:
            kind = "plain_text" if f.suffix.lower() == ".txt" else "html"
            doc_id = f"{source}/{f.relative_to(source_dir).with_suffix('').as_posix()}"
            docs.append(RawDocument(doc_id, source, subjects, kind, f.read_text(encoding="utf-8")))
    return docs


def _load_jsonl_documents(path: Path) -> list[RawDocument]:
    docs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                docs.append(RawDocument(obj["doc_id"], obj["source"], frozenset(obj["subjects"]), obj["kind"], obj["body"]))
            except (KeyError, json.JSONDecodeError) as e:
                raise ValueError(f"{path}:{lineno}: bad document record ({e})") from e
    return docs
