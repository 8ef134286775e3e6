from .fetch import FetchError, UnsupportedContentError, fetch_source
from .filters import (
    DEFAULT_DISALLOWED_BLOCKS,
    FilterDecision,
    SpellcheckResult,
    dedup,
    script_filter,
    spellcheck_filter,
    word_tokens,
)
from .html import extract_paragraphs
from .pipeline import (
    IngestConfig,
    IngestResult,
    build_manifest,
    ingest,
    load_documents,
    process_document,
    read_corpus,
    read_manifest,
    reference_manifest,
    write_corpus,
    write_manifest,
)
from .segment import segment_sentences
from .types import (
    SOURCE_SUBJECTS,
    SUBJECT_CODES,
    Dictionary,
    RawDocument,
    SentenceRecord,
    load_dictionary,
)
