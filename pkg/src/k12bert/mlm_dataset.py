"""Fixed-length MLM examples with seeded static masking, stored as binary shards."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from itertools import groupby
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .corpus.types import SentenceRecord
from .tokenizer import Tokenizer, TokenSequence, Vocab

IGNORE_LABEL = -1
SHARD_MAGIC = b"MLM1"
HEADER_NAME = "dataset.json"
PROVENANCE_NAME = "provenance.jsonl"


class ShardCorruptionError(ValueError):
    pass


@dataclass(frozen=True)
class MaskingPolicy:
    select_prob: float = 0.15
    mask_frac: float = 0.8
    random_frac: float = 0.1
    keep_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.select_prob <= 1.0:
            raise ValueError(f"select_prob must be in [0, 1], got {self.select_prob}")
        fracs = (self.mask_frac, self.random_frac, self.keep_frac)
        if min(fracs) < 0 or abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"mask/random/keep fractions must be >= 0 and sum to 1, got {fracs}")


@dataclass
class MlmExample:
    input_ids: np.ndarray       # int64 [L]
    attention_mask: np.ndarray  # uint8 [L]
    labels: np.ndarray          # int64 [L], IGNORE_LABEL where not selected
    doc_id: str | None = None

    def __eq__(self, other):
        if not isinstance(other, MlmExample):
            return NotImplemented
        return (
            np.array_equal(self.input_ids, other.input_ids)
            and np.array_equal(self.attention_mask, other.attention_mask)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class Segment:
    doc_id: str
    source: str
    pieces: tuple[str, ...]


def pack_segments(records: Iterable[SentenceRecord], tokenizer: Tokenizer, max_len: int,
                  pack: bool = True) -> list[Segment]:
    """Greedy same-document packing into runs of at most ``max_len - 2`` pieces.

    Records must already be grouped by doc_id and ordered by seq_no. Sentences
    longer than the budget are split at the piece level. With ``pack=False``
    every sentence starts a fresh segment.
    """
    budget = max_len - 2
    if budget < 1:
        raise ValueError(f"max_len must be >= 3 to hold any piece, got {max_len}")
    segments = []
    for doc_id, group in groupby(records, key=lambda r: r.doc_id):
        group = list(group)
        source = group[0].source
        current: list[str] = []
        for rec in group:
            pieces = tokenizer.tokenize(rec.text)
            if not pieces:
                continue
            if current and (not pack or len(current) + len(pieces) > budget):
                segments.append(Segment(doc_id, source, tuple(current)))
                current = []
            while len(pieces) > budget:
                segments.append(Segment(doc_id, source, tuple(pieces[:budget])))
                pieces = pieces[budget:]
            current.extend(pieces)
        if current:
            segments.append(Segment(doc_id, source, tuple(current)))
    return segments


def pack_lengths(lengths: Sequence[int], budget: int) -> list[int]:
    """Segment sizes produced by greedy packing of one document's sentence lengths."""
    out = []
    cur = 0
    for n in lengths:
        if n == 0:
            continue
        if cur and cur + n > budget:
            out.append(cur)
            cur = 0
        while n > budget:
            out.append(budget)
            n -= budget
        cur += n
    if cur:
        out.append(cur)
    return out


def example_rng(seed: int, shard_index: int, example_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, shard_index, example_index])))


def mask_tokens(seq: TokenSequence, vocab: Vocab, policy: MaskingPolicy, rng: np.random.Generator,
                doc_id: str | None = None) -> MlmExample:
    ids = np.asarray(seq.input_ids, dtype=np.int64)
    attn = np.asarray(seq.attention_mask, dtype=np.uint8)
    special = np.array(sorted(vocab.special_ids), dtype=np.int64)
    maskable = (attn == 1) & ~np.isin(ids, special)

    # draw a fixed number of variates per position so streams stay aligned
    u_select = rng.random(ids.shape[0])
    u_action = rng.random(ids.shape[0])
    random_pool = np.setdiff1d(np.arange(len(vocab), dtype=np.int64), special)
    random_ids = rng.choice(random_pool, size=ids.shape[0])

    selected = maskable & (u_select < policy.select_prob)
    labels = np.full_like(ids, IGNORE_LABEL)
    labels[selected] = ids[selected]
    out = ids.copy()
    to_mask = selected & (u_action < policy.mask_frac)
    to_random = selected & (u_action >= policy.mask_frac) & (u_action < policy.mask_frac + policy.random_frac)
    out[to_mask] = vocab.mask_id
    out[to_random] = random_ids[to_random]
    return MlmExample(out, attn, labels, doc_id)


def build_examples(records: Sequence[SentenceRecord], tokenizer: Tokenizer, max_len: int, policy: MaskingPolicy,
                   shard_size: int, pack: bool = True) -> list[MlmExample]:
    """Sort records into (source, doc_id, seq_no) order, pack, encode and mask."""
    ordered = sorted(records, key=lambda r: (r.source, r.doc_id, r.seq_no))
    segments = pack_segments(ordered, tokenizer, max_len, pack=pack)
    examples = []
    for i, seg in enumerate(segments):
        seq = tokenizer.encode_pieces(seg.pieces, max_len)
        rng = example_rng(policy.seed, i // shard_size, i % shard_size)
        examples.append(mask_tokens(seq, tokenizer.vocab, policy, rng, doc_id=seg.doc_id))
    return examples


def shard_name(index: int) -> str:
    return f"shard_{index:05d}.bin"


def _write_shard(path: Path, examples: Sequence[MlmExample], max_len: int, vocab_size: int) -> None:
    with open(path, "wb") as f:
        f.write(SHARD_MAGIC)
        f.write(struct.pack("<III", max_len, vocab_size, len(examples)))
        for ex in examples:
            f.write(np.asarray(ex.input_ids, dtype="<u4").tobytes())
            f.write(np.asarray(ex.attention_mask, dtype="u1").tobytes())
            f.write(np.asarray(ex.labels, dtype="<i4").tobytes())


def write_shards(examples: Sequence[MlmExample], directory: str | Path, shard_size: int, *, max_len: int,
                 vocab_size: int, policy: MaskingPolicy) -> dict:
    if shard_size < 1:
        raise ValueError("shard_size must be >= 1")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for old in directory.glob("shard_*.bin"):
        old.unlink()
    n_shards = 0
    for start in range(0, len(examples), shard_size):
        _write_shard(directory / shard_name(n_shards), examples[start:start + shard_size], max_len, vocab_size)
        n_shards += 1
    with open(directory / PROVENANCE_NAME, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps({"doc_id": ex.doc_id}) + "\n")
    header = {
        "max_len": max_len,
        "vocab_size": vocab_size,
        "policy": asdict(policy),
        "seed": policy.seed,
        "shard_size": shard_size,
        "shard_count": n_shards,
        "example_count": len(examples),
    }
    with open(directory / HEADER_NAME, "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2, sort_keys=True)
        f.write("\n")
    return header


def read_header(directory: str | Path) -> dict:
    path = Path(directory) / HEADER_NAME
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ShardCorruptionError(f"{path}: dataset header missing") from None


def _read_shard(path: Path, max_len: int, vocab_size: int) -> Iterator[MlmExample]:
    data = path.read_bytes()
    if data[:4] != SHARD_MAGIC:
        raise ShardCorruptionError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 16:
        raise ShardCorruptionError(f"{path}: truncated header")
    L, V, count = struct.unpack_from("<III", data, 4)
    if (L, V) != (max_len, vocab_size):
        raise ShardCorruptionError(f"{path}: shard has L={L}, V={V}; header says L={max_len}, V={vocab_size}")
    rec = L * 9
    if len(data) != 16 + count * rec:
        raise ShardCorruptionError(f"{path}: expected {count} examples ({16 + count * rec} bytes), found {len(data)} bytes")
    off = 16
    for _ in range(count):
        ids = np.frombuffer(data, dtype="<u4", count=L, offset=off).astype(np.int64)
        mask = np.frombuffer(data, dtype="u1", count=L, offset=off + 4 * L).copy()
        labels = np.frombuffer(data, dtype="<i4", count=L, offset=off + 5 * L).astype(np.int64)
        off += rec
        yield MlmExample(ids, mask, labels)


def read_shards(directory: str | Path) -> list[MlmExample]:
    directory = Path(directory)
    header = read_header(directory)
    files = sorted(directory.glob("shard_*.bin"))
    expected = [shard_name(i) for i in range(header["shard_count"])]
    if [f.name for f in files] != expected:
        raise ShardCorruptionError(f"{directory}: header lists {len(expected)} shards, found {[f.name for f in files]}")
    examples = []
    for f in files:
        examples.extend(_read_shard(f, header["max_len"], header["vocab_size"]))
    if len(examples) != header["example_count"]:
        raise ShardCorruptionError(f"{directory}: header says {header['example_count']} examples, shards hold {len(examples)}")
    prov = directory / PROVENANCE_NAME
    if prov.exists():
        with open(prov, encoding="utf-8") as fh:
            doc_ids = [json.loads(line)["doc_id"] for line in fh if line.strip()]
        if len(doc_ids) == len(examples):
            for ex, d in zip(examples, doc_ids):
                ex.doc_id = d
    return examples
