from __future__ import annotations

from typing import Sequence

import numpy as np

from ..tokenizer import Tokenizer
from .model import encode
from .params import ModelParams

POOLINGS = ("mean", "cls")


def embed_texts(params: ModelParams, tokenizer: Tokenizer, texts: Sequence[str], pooling: str = "mean",
                batch_size: int = 64) -> np.ndarray:
    """Unit-norm sentence vectors [N, H] from the final hidden states."""
    if pooling not in POOLINGS:
        raise ValueError(f"pooling must be one of {POOLINGS}, got {pooling!r}")
    if len(tokenizer.vocab) != params.config.vocab_size:
        raise ValueError(f"tokenizer vocabulary ({len(tokenizer.vocab)}) and model ({params.config.vocab_size}) disagree")
    special = np.array(sorted(tokenizer.vocab.special_ids))
    L = params.config.max_len
    out = np.zeros((len(texts), params.config.hidden), dtype=np.float64)
    for start in range(0, len(texts), batch_size):
        seqs = [tokenizer.encode(t, L) for t in texts[start:start + batch_size]]
        ids = np.array([s.input_ids for s in seqs])
        mask = np.array([s.attention_mask for s in seqs])
        hidden = encode(params, ids, mask).astype(np.float64)
        if pooling == "cls":
            vecs = hidden[:, 0]
        else:
            real = (mask == 1) & ~np.isin(ids, special)
            counts = real.sum(1, keepdims=True)
            vecs = (hidden * real[..., None]).sum(1) / np.maximum(counts, 1)
            # nothing to average (empty text): fall back to the [CLS] state
            vecs = np.where(counts > 0, vecs, hidden[:, 0])
        out[start:start + len(seqs)] = vecs
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    return out / np.where(norms > 0, norms, 1.0)


def embed_text(params: ModelParams, tokenizer: Tokenizer, text: str, pooling: str = "mean") -> np.ndarray:
    return embed_texts(params, tokenizer, [text], pooling)[0]
