"""Post-layernorm transformer encoder with an MLM head; forward and exact backward in numpy."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import erf

from ..mlm_dataset import IGNORE_LABEL, MlmExample
from .params import ModelParams


class NumericFailure(ArithmeticError):
    pass


@dataclass
class Batch:
    input_ids: np.ndarray       # int [B, L]
    attention_mask: np.ndarray  # {0,1} [B, L]
    labels: np.ndarray          # int [B, L]
    token_type_ids: np.ndarray  # int [B, L]

    def __len__(self) -> int:
        return self.input_ids.shape[0]

    @property
    def masked_count(self) -> int:
        return int((self.labels != IGNORE_LABEL).sum())


def collate(examples: Sequence[MlmExample]) -> Batch:
    ids = np.stack([np.asarray(e.input_ids, dtype=np.int64) for e in examples])
    mask = np.stack([np.asarray(e.attention_mask, dtype=np.int64) for e in examples])
    labels = np.stack([np.asarray(e.labels, dtype=np.int64) for e in examples])
    return Batch(ids, mask, labels, np.zeros_like(ids))


@dataclass
class LossStats:
    loss: float
    masked_count: int
    correct: int

    @property
    def masked_accuracy(self) -> float:
        return self.correct / self.masked_count if self.masked_count else 0.0

    @property
    def skippable(self) -> bool:
        return self.masked_count == 0


# -- elementwise pieces ------------------------------------------------------

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x * _SQRT_HALF))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x * _SQRT_HALF)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def layer_norm(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd)


def layer_norm_backward(dy, gamma, cache):
    xhat, rstd = cache
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    n = dy.shape[-1]
    dx = rstd / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
    return dx, dgamma, dbeta


def softmax(s):
    m = s.max(axis=-1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=-1, keepdims=True)


def _dropout_mask(rng, shape, p, dtype):
    if rng is None or p <= 0.0:
        return None
    keep = 1.0 - p
    return ((rng.random(shape) < keep) / keep).astype(dtype)


def _check(x, where):
    if not np.isfinite(x).all():
        raise NumericFailure(f"non-finite activation in {where}")


# -- forward -----------------------------------------------------------------

def encode(params: ModelParams, input_ids, attention_mask, token_type_ids=None, dropout_rng=None, keep_cache=False):
    """Run embeddings and all transformer layers; returns final hidden states [B, L, H]."""
    cfg = params.config
    P = params.tensors
    dt = params.dtype
    ids = np.asarray(input_ids)
    B, L = ids.shape
    if L > cfg.max_len:
        raise ValueError(f"sequence length {L} exceeds max_len {cfg.max_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
    tt = np.zeros_like(ids) if token_type_ids is None else np.asarray(token_type_ids)
    keymask = np.asarray(attention_mask).astype(bool)
    A, d, eps, p = cfg.heads, cfg.head_dim, cfg.layer_norm_eps, cfg.dropout_prob
    scale = 1.0 / math.sqrt(d)
    caches = {"ids": ids, "tt": tt, "keymask": keymask, "layers": []}

    x = P["embeddings.token"][ids] + P["embeddings.position"][:L][None] + P["embeddings.segment"][tt]
    h, caches["emb_ln"] = layer_norm(x, P["embeddings.ln.gamma"], P["embeddings.ln.beta"], eps)
    m = _dropout_mask(dropout_rng, h.shape, p, dt)
    caches["emb_drop"] = m
    if m is not None:
        h = h * m
    _check(h, "embeddings")

    neg = np.where(keymask, 0.0, -np.inf).astype(dt)[:, None, None, :]
    for i in range(cfg.layers):
        pre = f"layer.{i}."
        W = lambda n: P[pre + n]  # noqa: E731
        q = (h @ W("attn.query.weight") + W("attn.query.bias")).reshape(B, L, A, d).transpose(0, 2, 1, 3)
        k = (h @ W("attn.key.weight") + W("attn.key.bias")).reshape(B, L, A, d).transpose(0, 2, 1, 3)
        v = (h @ W("attn.value.weight") + W("attn.value.bias")).reshape(B, L, A, d).transpose(0, 2, 1, 3)
        probs = softmax((q @ k.transpose(0, 1, 3, 2)) * scale + neg)
        pm = _dropout_mask(dropout_rng, probs.shape, p, dt)
        pd = probs * pm if pm is not None else probs
        ctx = (pd @ v).transpose(0, 2, 1, 3).reshape(B, L, A * d)
        a = ctx @ W("attn.output.weight") + W("attn.output.bias")
        am = _dropout_mask(dropout_rng, a.shape, p, dt)
        if am is not None:
            a = a * am
        h1, ln1 = layer_norm(h + a, W("attn.ln.gamma"), W("attn.ln.beta"), eps)
        z = h1 @ W("ffn.in.weight") + W("ffn.in.bias")
        f = gelu(z)
        g = f @ W("ffn.out.weight") + W("ffn.out.bias")
        gm = _dropout_mask(dropout_rng, g.shape, p, dt)
        if gm is not None:
            g = g * gm
        h2, ln2 = layer_norm(h1 + g, W("ffn.ln.gamma"), W("ffn.ln.beta"), eps)
        _check(h2, f"layer {i}")
        if keep_cache:
            caches["layers"].append(dict(h=h, q=q, k=k, v=v, probs=probs, pm=pm, pd=pd, ctx=ctx, am=am,
                                         ln1=ln1, h1=h1, z=z, f=f, gm=gm, ln2=ln2))
        h = h2
    return (h, caches) if keep_cache else h


def mlm_head(params: ModelParams, hidden, keep_cache=False):
    """Hidden rows [..., H] -> vocabulary logits [..., V] through the tied decoder."""
    P = params.tensors
    t = hidden @ P["head.transform.weight"] + P["head.transform.bias"]
    tg = gelu(t)
    u, ln = layer_norm(tg, P["head.ln.gamma"], P["head.ln.beta"], params.config.layer_norm_eps)
    logits = u @ params.decoder_weight.T + P["head.bias"]
    _check(logits, "mlm head")
    if keep_cache:
        return logits, dict(hidden=hidden, t=t, ln=ln, u=u)
    return logits


@dataclass
class ForwardOutput:
    logits: np.ndarray  # [B, L, V]
    hidden: np.ndarray  # [B, L, H]


def forward(params: ModelParams, batch: Batch | Sequence[MlmExample]) -> ForwardOutput:
    if not isinstance(batch, Batch):
        batch = collate(batch)
    hidden = encode(params, batch.input_ids, batch.attention_mask, batch.token_type_ids)
    return ForwardOutput(mlm_head(params, hidden), hidden)


# -- loss --------------------------------------------------------------------

def _cross_entropy_rows(logits, targets):
    """Summed CE, correct-argmax count and d(sum CE)/d(logits) for rows of logits."""
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=-1, keepdims=True)
    rows = np.arange(len(targets))
    logp = logits[rows, targets] - m[:, 0] - np.log(z[:, 0])
    correct = int((logits.argmax(axis=-1) == targets).sum())
    dlogits = e / z
    dlogits[rows, targets] -= 1.0
    return float(-logp.sum()), correct, dlogits


def mlm_loss(logits, labels) -> LossStats:
    """Mean cross-entropy over positions whose label is not IGNORE_LABEL."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    sel = labels != IGNORE_LABEL
    n = int(sel.sum())
    if n == 0:
        return LossStats(0.0, 0, 0)
    total, correct, _ = _cross_entropy_rows(logits[sel].astype(np.float64), labels[sel])
    return LossStats(total / n, n, correct)


# -- backward ----------------------------------------------------------------

def loss_and_grads(params: ModelParams, batch: Batch, dropout_rng=None, reduction: str = "mean"):
    """MLM loss and its exact gradient w.r.t. every tensor.

    ``reduction="sum"`` returns the summed cross-entropy and its gradient, which
    is what gradient accumulation adds up across micro-batches.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(reduction)
    cfg = params.config
    P = params.tensors
    grads = {k: np.zeros_like(v) for k, v in P.items()}
    sel = batch.labels != IGNORE_LABEL
    n = int(sel.sum())
    if n == 0:
        return LossStats(0.0, 0, 0), grads

    hidden, cache = encode(params, batch.input_ids, batch.attention_mask, batch.token_type_ids,
                           dropout_rng=dropout_rng, keep_cache=True)
    bidx, pidx = np.nonzero(sel)
    logits, hc = mlm_head(params, hidden[bidx, pidx], keep_cache=True)
    total, correct, dlogits = _cross_entropy_rows(logits, batch.labels[bidx, pidx])
    stats = LossStats(total / n if reduction == "mean" else total, n, correct)
    if not math.isfinite(total):
        raise NumericFailure("non-finite loss")
    if reduction == "mean":
        dlogits = dlogits / n
    dlogits = dlogits.astype(params.dtype, copy=False)

    # head
    E = params.decoder_weight
    grads["head.bias"] += dlogits.sum(0)
    grads["embeddings.token"] += dlogits.T @ hc["u"]
    du = dlogits @ E
    dtg, grads["head.ln.gamma"], grads["head.ln.beta"] = layer_norm_backward(du, P["head.ln.gamma"], hc["ln"])
    dt_ = dtg * gelu_grad(hc["t"])
    grads["head.transform.weight"] += hc["hidden"].T @ dt_
    grads["head.transform.bias"] += dt_.sum(0)
    dh = np.zeros_like(hidden)
    np.add.at(dh, (bidx, pidx), dt_ @ P["head.transform.weight"].T)

    B, L, H = hidden.shape
    A, d = cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(d)
    for i in reversed(range(cfg.layers)):
        pre = f"layer.{i}."
        c = cache["layers"][i]
        W = lambda n: P[pre + n]  # noqa: E731

        dsum2, grads[pre + "ffn.ln.gamma"], grads[pre + "ffn.ln.beta"] = layer_norm_backward(dh, W("ffn.ln.gamma"), c["ln2"])
        dg = dsum2 * c["gm"] if c["gm"] is not None else dsum2
        grads[pre + "ffn.out.weight"] += c["f"].reshape(-1, cfg.ff_dim).T @ dg.reshape(-1, H)
        grads[pre + "ffn.out.bias"] += dg.sum((0, 1))
        dz = (dg @ W("ffn.out.weight").T) * gelu_grad(c["z"])
        grads[pre + "ffn.in.weight"] += c["h1"].reshape(-1, H).T @ dz.reshape(-1, cfg.ff_dim)
        grads[pre + "ffn.in.bias"] += dz.sum((0, 1))
        dh1 = dsum2 + dz @ W("ffn.in.weight").T

        dsum1, grads[pre + "attn.ln.gamma"], grads[pre + "attn.ln.beta"] = layer_norm_backward(dh1, W("attn.ln.gamma"), c["ln1"])
        da = dsum1 * c["am"] if c["am"] is not None else dsum1
        grads[pre + "attn.output.weight"] += c["ctx"].reshape(-1, H).T @ da.reshape(-1, H)
        grads[pre + "attn.output.bias"] += da.sum((0, 1))
        dctx = (da @ W("attn.output.weight").T).reshape(B, L, A, d).transpose(0, 2, 1, 3)
        dpd = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = c["pd"].transpose(0, 1, 3, 2) @ dctx
        dprobs = dpd * c["pm"] if c["pm"] is not None else dpd
        probs = c["probs"]
        ds = probs * (dprobs - (dprobs * probs).sum(-1, keepdims=True)) * scale
        dq = ds @ c["k"]
        dk = ds.transpose(0, 1, 3, 2) @ c["q"]

        h_in = c["h"].reshape(-1, H)
        dh_in = dsum1
        for name, dproj in (("query", dq), ("key", dk), ("value", dv)):
            dproj = dproj.transpose(0, 2, 1, 3).reshape(B, L, H)
            grads[pre + f"attn.{name}.weight"] += h_in.T @ dproj.reshape(-1, H)
            grads[pre + f"attn.{name}.bias"] += dproj.sum((0, 1))
            dh_in = dh_in + dproj @ W(f"attn.{name}.weight").T
        dh = dh_in

    if cache["emb_drop"] is not None:
        dh = dh * cache["emb_drop"]
    dx, grads["embeddings.ln.gamma"], grads["embeddings.ln.beta"] = layer_norm_backward(
        dh, P["embeddings.ln.gamma"], cache["emb_ln"])
    np.add.at(grads["embeddings.token"], cache["ids"], dx)
    grads["embeddings.position"][:L] += dx.sum(0)
    np.add.at(grads["embeddings.segment"], cache["tt"], dx)
    for k, g in grads.items():
        if g.dtype != params.dtype:
            grads[k] = g.astype(params.dtype)
    return stats, grads


def backward(params: ModelParams, batch: Batch | Sequence[MlmExample]) -> dict[str, np.ndarray]:
    """Gradient of the mean masked-LM loss for every named tensor."""
    if not isinstance(batch, Batch):
        batch = collate(batch)
    return loss_and_grads(params, batch)[1]
