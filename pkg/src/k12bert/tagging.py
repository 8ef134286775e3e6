"""Dual-encoder taxonomy tagging: cosine ranking of "subject - chapter - topic" labels and Recall@K."""
from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence, Union

import numpy as np

DEFAULT_KS = (5, 10, 15, 20)
EMB_MAGIC = b"EMB1"
_WS = re.compile(r"\s+")


class TaxonomyFormatError(ValueError):
    pass


class EmbeddingFileError(ValueError):
    pass


def _clean_level(text: str) -> str:
    return _WS.sub(" ", text).strip().lower()


@dataclass(frozen=True)
class TaxonomyLabel:
    label_id: int
    subject: str
    chapter: str
    topic: str

    @property
    def flat(self) -> str:
        return " - ".join(_clean_level(x) for x in (self.subject, self.chapter, self.topic))


def flatten_taxonomy(subject: str, chapter: str, topic: str, label_id: int = 0) -> TaxonomyLabel:
    for level, value in (("subject", subject), ("chapter", chapter), ("topic", topic)):
        if not value or not value.strip():
            raise TaxonomyFormatError(f"label {label_id}: empty {level}")
    return TaxonomyLabel(label_id, subject, chapter, topic)


@dataclass(frozen=True)
class LabeledQuestion:
    question_id: str
    text: str
    gold_label_id: int


def load_taxonomy(path: str | Path) -> list[TaxonomyLabel]:
    labels = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                labels.append(flatten_taxonomy(obj["subject"], obj["chapter"], obj["topic"], int(obj["label_id"])))
            except (KeyError, ValueError, TypeError) as e:
                raise TaxonomyFormatError(f"{path}:{lineno}: {e}") from e
    ids = [lab.label_id for lab in labels]
    if len(set(ids)) != len(ids):
        raise TaxonomyFormatError(f"{path}: duplicate label_id")
    return sorted(labels, key=lambda lab: lab.label_id)


def load_questions(path: str | Path, labels: Sequence[TaxonomyLabel] | None = None) -> list[LabeledQuestion]:
    known = {lab.label_id for lab in labels} if labels is not None else None
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            q = LabeledQuestion(str(obj["question_id"]), obj["text"], int(obj["gold_label_id"]))
            if known is not None and q.gold_label_id not in known:
                raise TaxonomyFormatError(f"{path}:{lineno}: question {q.question_id} has unknown gold label {q.gold_label_id}")
            out.append(q)
    return out


# -- embeddings --------------------------------------------------------------

def _normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("zero-norm vector has no direction")
    return m / norms


@dataclass
class EmbeddingSet:
    dim: int
    vectors: dict[str, np.ndarray] = field(default_factory=dict)

    def __contains__(self, name: str) -> bool:
        return name in self.vectors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.vectors[name]

    def __len__(self) -> int:
        return len(self.vectors)

    @classmethod
    def from_arrays(cls, names: Sequence[str], matrix) -> "EmbeddingSet":
        matrix = np.asarray(matrix, dtype=np.float64)
        if len(set(names)) != len(names):
            raise EmbeddingFileError("duplicate embedding names")
        unit = _normalize_rows(matrix).astype(np.float32)
        return cls(matrix.shape[1], {n: unit[i] for i, n in enumerate(names)})


def write_embeddings(path: str | Path, names: Sequence[str], matrix) -> None:
    matrix = np.asarray(matrix, dtype="<f4")
    if matrix.ndim != 2 or matrix.shape[0] != len(names):
        raise ValueError("need one row per name")
    with open(path, "wb") as f:
        f.write(EMB_MAGIC)
        f.write(struct.pack("<II", matrix.shape[1], len(names)))
        for name, row in zip(names, matrix):
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(row.tobytes())


def load_external_embeddings(path: str | Path) -> EmbeddingSet:
    data = Path(path).read_bytes()
    if data[:4] != EMB_MAGIC:
        raise EmbeddingFileError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 12:
        raise EmbeddingFileError(f"{path}: truncated header")
    dim, count = struct.unpack_from("<II", data, 4)
    off = 12
    names, rows = [], []
    for i in range(count):
        if off + 2 > len(data):
            raise EmbeddingFileError(f"{path}: record {i} of {count} missing")
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode("utf-8")
        off += n
        if off + 4 * dim > len(data):
            raise EmbeddingFileError(f"{path}: record {name!r} shorter than declared dim {dim}")
        rows.append(np.frombuffer(data, dtype="<f4", count=dim, offset=off))
        off += 4 * dim
        names.append(name)
    if off != len(data):
        raise EmbeddingFileError(f"{path}: {len(data) - off} bytes beyond the {count} declared records (dim {dim})")
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise EmbeddingFileError(f"{path}: duplicate names {dupes[:5]}")
    matrix = np.array(rows, dtype=np.float64).reshape(count, dim)
    try:
        return EmbeddingSet.from_arrays(names, matrix)
    except ValueError as e:
        raise EmbeddingFileError(f"{path}: {e}") from e


# -- ranking -----------------------------------------------------------------

class MissingEmbeddingError(KeyError):
    pass


@dataclass(frozen=True)
class RankIndex:
    label_ids: np.ndarray  # [N] ascending
    matrix: np.ndarray     # [N, D] unit rows, float64

    def __len__(self) -> int:
        return len(self.label_ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def build_index(labels: Sequence[TaxonomyLabel], embeddings: EmbeddingSet | Callable[[list[str]], np.ndarray]) -> RankIndex:
    """Stack label vectors in label_id order. Label vectors are looked up by flat string."""
    labels = sorted(labels, key=lambda lab: lab.label_id)
    flats = [lab.flat for lab in labels]
    if callable(embeddings) and not isinstance(embeddings, EmbeddingSet):
        matrix = np.asarray(embeddings(flats), dtype=np.float64)
    else:
        missing = [f for f in flats if f not in embeddings]
        if missing:
            raise MissingEmbeddingError(f"no embedding for label(s): {missing}")
        matrix = np.stack([np.asarray(embeddings[f], dtype=np.float64) for f in flats]) if flats else np.zeros((0, embeddings.dim))
    matrix = _normalize_rows(matrix) if len(matrix) else matrix
    matrix.setflags(write=False)
    ids = np.array([lab.label_id for lab in labels], dtype=np.int64)
    ids.setflags(write=False)
    return RankIndex(ids, matrix)


def _order(scores: np.ndarray, label_ids: np.ndarray) -> np.ndarray:
    # descending score, ties by ascending label_id
    return np.lexsort((label_ids, -scores))


def rank(query, index: RankIndex, k: int) -> list[tuple[int, float]]:
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ValueError(f"query has shape {q.shape}, index dim is {index.dim}")
    norm = np.linalg.norm(q)
    if norm == 0:
        raise ValueError("zero-norm query has no direction")
    scores = index.matrix @ (q / norm)
    order = _order(scores, index.label_ids)[:k]
    return [(int(index.label_ids[i]), float(scores[i])) for i in order]


def gold_rank(query, index: RankIndex, gold_label_id: int) -> int:
    """1-based position of the gold label in the full ranking."""
    q = np.asarray(query, dtype=np.float64)
    scores = index.matrix @ (q / np.linalg.norm(q))
    order = _order(scores, index.label_ids)
    pos = np.nonzero(index.label_ids[order] == gold_label_id)[0]
    if not len(pos):
        raise MissingEmbeddingError(f"gold label {gold_label_id} is not in the index")
    return int(pos[0]) + 1


@dataclass
class EvalResult:
    recall: dict[int, float]
    n: int
    ranks: list[tuple[str, int]]

    def to_report(self) -> dict:
        return {
            "recall": {str(k): v for k, v in sorted(self.recall.items())},
            "n": self.n,
            "ranks": [{"question_id": q, "gold_rank": r} for q, r in self.ranks],
        }


def recall_at_k(ranks: Mapping[str, int | None] | Sequence[tuple[str, int | None]], ks: Iterable[int] = DEFAULT_KS) -> EvalResult:
    """R@K = share of questions whose gold label sits at rank <= K."""
    items = list(ranks.items()) if isinstance(ranks, Mapping) else list(ranks)
    for qid, r in items:
        if r is None:
            raise ValueError(f"question {qid} has no ranking")
    n = len(items)
    ks = sorted(set(ks))
    if not n:
        return EvalResult({k: 0.0 for k in ks}, 0, [])
    rs = np.array([r for _, r in items])
    return EvalResult({k: float((rs <= k).sum()) / n for k in ks}, n, [(q, int(r)) for q, r in items])


EmbeddingSource = Union[EmbeddingSet, Callable[[list[str]], np.ndarray]]


def _question_vectors(questions: Sequence[LabeledQuestion], source: EmbeddingSource) -> np.ndarray:
    if callable(source) and not isinstance(source, EmbeddingSet):
        return np.asarray(source([q.text for q in questions]), dtype=np.float64)
    missing = [q.question_id for q in questions if q.question_id not in source]
    if missing:
        raise MissingEmbeddingError(f"no embedding for question(s): {missing[:10]}")
    return np.stack([np.asarray(source[q.question_id], dtype=np.float64) for q in questions])


def evaluate(questions: Sequence[LabeledQuestion], labels: Sequence[TaxonomyLabel],
             question_embeddings: EmbeddingSource, label_embeddings: EmbeddingSource,
             ks: Iterable[int] = DEFAULT_KS, report_path: str | Path | None = None) -> EvalResult:
    """Rank every label for every question and score Recall@K.

    Each embedding source is either an :class:`EmbeddingSet` (questions keyed by
    question_id, labels by flat string) or a callable mapping a list of texts to
    a vector matrix, e.g. the in-toolkit encoder.
    """
    index = build_index(labels, label_embeddings)
    qs = sorted(questions, key=lambda q: q.question_id)
    vecs = _question_vectors(qs, question_embeddings) if qs else np.zeros((0, index.dim))
    ranks = [(q.question_id, gold_rank(v, index, q.gold_label_id)) for q, v in zip(qs, vecs)]
    result = recall_at_k(ranks, ks)
    if report_path is not None:
        with open(report_path, "w", encoding="utf-8") as f:
            json.dump(result.to_report(), f, indent=2)
            f.write("\n")
    return result
