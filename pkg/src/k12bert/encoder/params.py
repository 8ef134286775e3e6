from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

# std of a standard normal truncated to [-2, 2]; samples are rescaled by this so
# the realized std matches init_std
_TRUNC2_STD = 0.8796256610342398


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    layers: int = 2
    hidden: int = 128
    heads: int = 2
    ff_dim: int = 512
    max_len: int = 128
    dropout_prob: float = 0.0
    init_std: float = 0.02
    seed: int = 0
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        for name in ("vocab_size", "layers", "hidden", "heads", "ff_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden % self.heads:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError(f"dropout_prob must be in [0, 1), got {self.dropout_prob}")
        if self.init_std < 0:
            raise ValueError("init_std must be >= 0")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable tensor, in canonical order. The MLM decoder is tied to
    ``embeddings.token`` and has no entry of its own."""
    V, H, L, F = config.vocab_size, config.hidden, config.max_len, config.ff_dim
    shapes = {
        "embeddings.token": (V, H),
        "embeddings.position": (L, H),
        "embeddings.segment": (2, H),
        "embeddings.ln.gamma": (H,),
        "embeddings.ln.beta": (H,),
    }
    for i in range(config.layers):
        p = f"layer.{i}."
        for proj in ("query", "key", "value", "output"):
            shapes[p + f"attn.{proj}.weight"] = (H, H)
            shapes[p + f"attn.{proj}.bias"] = (H,)
        shapes[p + "attn.ln.gamma"] = (H,)
        shapes[p + "attn.ln.beta"] = (H,)
        shapes[p + "ffn.in.weight"] = (H, F)
        shapes[p + "ffn.in.bias"] = (F,)
        shapes[p + "ffn.out.weight"] = (F, H)
        shapes[p + "ffn.out.bias"] = (H,)
        shapes[p + "ffn.ln.gamma"] = (H,)
        shapes[p + "ffn.ln.beta"] = (H,)
    shapes["head.transform.weight"] = (H, H)
    shapes["head.transform.bias"] = (H,)
    shapes["head.ln.gamma"] = (H,)
    shapes["head.ln.beta"] = (H,)
    shapes["head.bias"] = (V,)
    return shapes


def tensor_family(name: str) -> str:
    """Name with the layer index removed, e.g. ``layer.*.attn.query.weight``."""
    parts = name.split(".")
    if parts[0] == "layer":
        parts[1] = "*"
    return ".".join(parts)


class ModelParams:
    """Named float tensors of the encoder and MLM head."""

    def __init__(self, config: EncoderConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def decoder_weight(self) -> np.ndarray:
        # tied: the very same array as the token embedding
        return self.tensors["embeddings.token"]

    @property
    def dtype(self) -> np.dtype:
        return self.tensors["embeddings.token"].dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def validate(self) -> None:
        shapes = param_shapes(self.config)
        missing = shapes.keys() - self.tensors.keys()
        if missing:
            raise ValueError(f"missing tensors: {sorted(missing)}")
        extra = self.tensors.keys() - shapes.keys()
        if extra:
            raise ValueError(f"unexpected tensors: {sorted(extra)}")
        for name, shape in shapes.items():
            if self.tensors[name].shape != shape:
                raise ValueError(f"tensor {name!r} has shape {self.tensors[name].shape}, config implies {shape}")

    def allclose(self, other: "ModelParams", **kw) -> bool:
        return self.tensors.keys() == other.tensors.keys() and all(
            np.allclose(v, other.tensors[k], **kw) for k, v in self.tensors.items())

    def equal(self, other: "ModelParams") -> bool:
        return self.tensors.keys() == other.tensors.keys() and all(
            np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * (std / _TRUNC2_STD)


def init_params(config: EncoderConfig, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            t = np.ones(shape)
        elif name.endswith(("bias", ".beta")):
            t = np.zeros(shape)
        else:
            t = _truncated_normal(rng, shape, config.init_std)
        tensors[name] = t.astype(dtype)
    return ModelParams(config, tensors)
