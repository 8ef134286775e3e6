"""BERT-style tokenization over a fixed WordPiece vocabulary."""
from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)


class VocabFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {}
        for i, tok in enumerate(self.tokens):
            if tok in index:
                raise VocabFormatError(f"duplicate token {tok!r} at lines {index[tok] + 1} and {i + 1}")
            index[tok] = i
        missing = [t for t in SPECIAL_TOKENS if t not in index]
        if missing:
            raise VocabFormatError(f"missing special tokens: {missing}")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __getitem__(self, token: str) -> int:
        return self.index[token]

    def id_of(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def cls_id(self) -> int:
        return self.index[CLS]

    @property
    def sep_id(self) -> int:
        return self.index[SEP]

    @property
    def mask_id(self) -> int:
        return self.index[MASK]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.index[t] for t in SPECIAL_TOKENS)


def load_vocab(path: str | Path) -> Vocab:
    """One token per line; the line number (from 0) is the id."""
    with open(path, encoding="utf-8") as f:
        text = f.read()
    if text.startswith("\ufeff"):
        raise VocabFormatError(f"{path}: vocabulary file has a byte-order mark")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    tokens = tuple(line.rstrip("\r") for line in lines)
    if not tokens:
        raise VocabFormatError(f"{path}: empty vocabulary")
    return Vocab(tokens)


def save_vocab(vocab: Vocab, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for tok in vocab.tokens:
            f.write(tok + "\n")


def _is_whitespace(ch: str) -> bool:
    if ch in " \t\n\r":
        return True
    return unicodedata.category(ch) == "Zs"


def _is_control(ch: str) -> bool:
    if ch in "\t\n\r":
        return False
    return unicodedata.category(ch) in ("Cc", "Cf")


def _is_punctuation(ch: str) -> bool:
    cp = ord(ch)
    # all non-alphanumeric ASCII counts as punctuation ("$", "^", "`", ...)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def _is_cjk(cp: int) -> bool:
    return (
        0x4E00 <= cp <= 0x9FFF
        or 0x3400 <= cp <= 0x4DBF
        or 0x20000 <= cp <= 0x2A6DF
        or 0x2A700 <= cp <= 0x2B73F
        or 0x2B740 <= cp <= 0x2B81F
        or 0x2B820 <= cp <= 0x2CEAF
        or 0xF900 <= cp <= 0xFAFF
        or 0x2F800 <= cp <= 0x2FA1F
    )


def basic_tokenize(text: str, lowercase: bool = True) -> list[str]:
    # drop NUL, replacement chars and control characters; map odd whitespace to space
    cleaned = []
    for ch in text:
        cp = ord(ch)
        if cp == 0 or cp == 0xFFFD or _is_control(ch):
            continue
        if _is_whitespace(ch):
            cleaned.append(" ")
        elif _is_cjk(cp):
            cleaned.append(f" {ch} ")
        else:
            cleaned.append(ch)
    text = "".join(cleaned)

    tokens = []
    for word in text.split():
        if lowercase:
            word = word.lower()
            word = "".join(c for c in unicodedata.normalize("NFD", word) if unicodedata.category(c) != "Mn")
        current = []
        for ch in word:
            if _is_punctuation(ch):
                if current:
                    tokens.append("".join(current))
                    current = []
                tokens.append(ch)
            else:
                current.append(ch)
        if current:
            tokens.append("".join(current))
    return tokens


def wordpiece(word: str, vocab: Vocab, max_word_chars: int = 100) -> list[str]:
    """Greedy longest-match-first split; unmatched words become [UNK]."""
    if len(word) > max_word_chars:
        return [UNK]
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        match = None
        while start < end:
            candidate = word[start:end]
            if start > 0:
                candidate = "##" + candidate
            if candidate in vocab.index:
                match = candidate
                break
            end -= 1
        if match is None:
            return [UNK]
        pieces.append(match)
        start = end
    return pieces


@dataclass(frozen=True)
class TokenSequence:
    input_ids: list[int]
    attention_mask: list[int]
    token_type_ids: list[int]
    spans: list[str] = field(default_factory=list, compare=False)

    def __len__(self) -> int:
        return len(self.input_ids)


class Tokenizer:
    def __init__(self, vocab: Vocab, lowercase: bool = True, max_word_chars: int = 100):
        self.vocab = vocab
        self.lowercase = lowercase
        self.max_word_chars = max_word_chars

    @classmethod
    def from_file(cls, path, **kwargs) -> "Tokenizer":
        return cls(load_vocab(path), **kwargs)

    def tokenize(self, text: str) -> list[str]:
        pieces = []
        for word in basic_tokenize(text, self.lowercase):
            pieces.extend(wordpiece(word, self.vocab, self.max_word_chars))
        return pieces

    def pieces_to_ids(self, pieces: Sequence[str]) -> list[int]:
        return [self.vocab.id_of(p) for p in pieces]

    def encode(self, text: str, max_len: int) -> TokenSequence:
        return self.encode_pieces(self.tokenize(text), max_len)

    def encode_pieces(self, pieces: Sequence[str], max_len: int) -> TokenSequence:
        if max_len < 2:
            raise ValueError(f"max_len must be >= 2, got {max_len}")
        body = list(pieces[: max_len - 2])
        toks = [CLS, *body, SEP]
        ids = self.pieces_to_ids(toks)
        n = len(ids)
        pad = max_len - n
        return TokenSequence(
            input_ids=ids + [self.vocab.pad_id] * pad,
            attention_mask=[1] * n + [0] * pad,
            token_type_ids=[0] * max_len,
            spans=toks,
        )

    def decode(self, ids: Sequence[int]) -> str:
        return decode(ids, self.vocab)


def decode(ids: Sequence[int], vocab: Vocab) -> str:
    special = vocab.special_ids
    words: list[str] = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise IndexError(f"token id {i} out of range for vocabulary of size {len(vocab)}")
        if i in special:
            continue
        tok = vocab.tokens[i]
        if tok.startswith("##") and words:
            words[-1] += tok[2:]
        else:
            words.append(tok)
    return " ".join(words)
