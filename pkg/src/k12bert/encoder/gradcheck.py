"""Central finite-difference check of the analytic MLM gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..mlm_dataset import IGNORE_LABEL
from .model import Batch, loss_and_grads
from .params import EncoderConfig, ModelParams, init_params, tensor_family

TINY = EncoderConfig(vocab_size=20, layers=1, hidden=8, heads=2, ff_dim=16, max_len=8, init_std=0.02, seed=0)


@dataclass
class GradCheckResult:
    max_rel_error: float
    coords_checked: int
    per_tensor: dict[str, float] = field(default_factory=dict)
    worst: tuple[str, tuple[int, ...], float, float] | None = None

    @property
    def families(self) -> set[str]:
        return {tensor_family(n) for n in self.per_tensor}


def random_batch(config: EncoderConfig, rng: np.random.Generator, batch_size: int = 3,
                 select_prob: float = 0.4) -> Batch:
    """Random ids with a ragged padding tail and a few labeled positions per row."""
    L, V = config.max_len, config.vocab_size
    ids = rng.integers(5, V, size=(batch_size, L))
    mask = np.zeros((batch_size, L), dtype=np.int64)
    labels = np.full((batch_size, L), IGNORE_LABEL, dtype=np.int64)
    for b in range(batch_size):
        n = int(rng.integers(max(3, L // 2), L + 1))
        mask[b, :n] = 1
        ids[b, 0], ids[b, n - 1] = 2, 3
        ids[b, n:] = 0
        chosen = [j for j in range(1, n - 1) if rng.random() < select_prob] or [1]
        for j in chosen:
            labels[b, j] = rng.integers(5, V)
            if rng.random() < 0.8:
                ids[b, j] = 4
    return Batch(ids, mask, labels, np.zeros_like(ids))


def _loss(params: ModelParams, batch: Batch) -> float:
    return loss_and_grads(params, batch)[0].loss


def grad_check(config: EncoderConfig = TINY, eps: float = 1e-3, n_coords: int = 240, seed: int = 0,
               params: ModelParams | None = None, batch: Batch | None = None) -> GradCheckResult:
    """Max relative error ``|g_a - g_n| / max(|g_a|, |g_n|, 1e-8)`` over sampled coordinates.

    Runs in float64 with a five-point central difference of step ``eps``.
    Coordinates are spread over every tensor: each tensor gets an equal share
    (at least one) and the total is at least ``n_coords``.
    """
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_params(config, dtype=np.float64)
    params = params.astype(np.float64)
    batch = batch if batch is not None else random_batch(params.config, rng)
    _, grads = loss_and_grads(params, batch)

    names = list(params.tensors)
    per = max(1, -(-n_coords // len(names)))
    result = GradCheckResult(0.0, 0)
    for name in names:
        t = params.tensors[name]
        flat = t.reshape(-1)
        picks = rng.choice(flat.size, size=min(per, flat.size), replace=False)
        worst_here = 0.0
        for j in picks:
            orig = flat[j]
            f = {}
            for k in (-2, -1, 1, 2):
                flat[j] = orig + k * eps
                f[k] = _loss(params, batch)
            flat[j] = orig
            # five-point central stencil: truncation error O(eps**4)
            g_num = (f[-2] - 8 * f[-1] + 8 * f[1] - f[2]) / (12 * eps)
            g_an = float(grads[name].reshape(-1)[j])
            rel = abs(g_an - g_num) / max(abs(g_an), abs(g_num), 1e-8)
            worst_here = max(worst_here, rel)
            if rel >= result.max_rel_error:
                result.max_rel_error = rel
                result.worst = (name, np.unravel_index(j, t.shape), g_an, g_num)
            result.coords_checked += 1
        result.per_tensor[name] = worst_here
    return result
