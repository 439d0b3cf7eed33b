"""Decoder-only transformer with switchable attention masking.

The model is kept functional: parameters live in a :class:`Weights` mapping of
named tensors and :func:`forward` is a pure function of
``(weights, tokens, mask)``.  The same weights serve autoregressive training
(causal mask) and diffusion training (bidirectional mask).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator

import torch
import torch.nn.functional as F

__all__ = [
    "AttentionMode",
    "ConfigError",
    "KVCache",
    "ModelConfig",
    "Weights",
    "backward",
    "build_attention_mask",
    "forward",
    "forward_cached",
    "init_weights",
    "value_and_grad",
]

LN_EPS = 1e-5
# Output projection init is shrunk so that initial logits are near-uniform.
HEAD_INIT_SCALE = 0.1


class ConfigError(ValueError):
    """Raised when a configuration violates one of its invariants."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 64
    seed: int = 0

    def validate(self) -> "ModelConfig":
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(
                f"model.d_model ({self.d_model}) must be divisible by model.n_heads ({self.n_heads})"
            )
        if self.max_seq_len < 2:
            raise ConfigError("model.max_seq_len must be >= 2")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("model.seed must fit in 64 bits")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AttentionMode:
    """One of ``causal``, ``prefix`` (with ``prefix_len``) or ``full``."""

    kind: str
    prefix_len: int = 0

    CAUSAL = "causal"
    PREFIX = "prefix"
    FULL = "full"

    def __post_init__(self):
        if self.kind not in (self.CAUSAL, self.PREFIX, self.FULL):
            raise ConfigError(f"unknown attention mode {self.kind!r}")
        if self.prefix_len < 0:
            raise ConfigError("prefix_len must be >= 0")

    @classmethod
    def causal(cls) -> "AttentionMode":
        return cls(cls.CAUSAL)

    @classmethod
    def full(cls) -> "AttentionMode":
        return cls(cls.FULL)

    @classmethod
    def prefix(cls, prefix_len: int) -> "AttentionMode":
        return cls(cls.PREFIX, prefix_len)

    def __str__(self) -> str:
        return f"prefix({self.prefix_len})" if self.kind == self.PREFIX else self.kind


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every tensor of a model built from ``config``."""
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (v, d),
        "pos_emb": (config.max_seq_len, d),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.weight": (d,),
            p + "ln1.bias": (d,),
            p + "attn.wq": (d, d),
            p + "attn.bq": (d,),
            p + "attn.wk": (d, d),
            p + "attn.bk": (d,),
            p + "attn.wv": (d, d),
            p + "attn.bv": (d,),
            p + "attn.wo": (d, d),
            p + "attn.bo": (d,),
            p + "ln2.weight": (d,),
            p + "ln2.bias": (d,),
            p + "ff.w1": (d, f),
            p + "ff.b1": (f,),
            p + "ff.w2": (f, d),
            p + "ff.b2": (d,),
        })
    shapes.update({
        "ln_f.weight": (d,),
        "ln_f.bias": (d,),
        "head.w": (d, v),
        "head.b": (v,),
    })
    return shapes


@dataclass
class Weights:
    """Named parameter tensors plus the config that fixes their shapes."""

    config: ModelConfig
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def clone(self) -> "Weights":
        return Weights(self.config, {k: t.detach().clone() for k, t in self.tensors.items()})

    def to(self, dtype: torch.dtype) -> "Weights":
        return Weights(self.config, {k: t.detach().to(dtype) for k, t in self.tensors.items()})

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.tensors.values())).dtype

    def num_parameters(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in self.tensors.values())

    def equal(self, other: "Weights") -> bool:
        """Bit-level equality of every tensor."""
        if self.config != other.config or self.tensors.keys() != other.tensors.keys():
            return False
        return all(torch.equal(t, other.tensors[k]) for k, t in self.tensors.items())


def init_weights(config: ModelConfig) -> Weights:
    """Deterministic initialization from ``config.seed``.

    Matrices draw from normal(0, 1/sqrt(fan_in)), embeddings from normal(0, 1),
    biases are zero and layer-norm gains one.
    """
    config.validate()
    gen = torch.Generator().manual_seed(config.seed)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("tok_emb", "pos_emb"):
            t = torch.randn(shape, generator=gen)
        elif leaf == "weight":
            t = torch.ones(shape)
        elif len(shape) == 1:
            t = torch.zeros(shape)
        else:
            t = torch.randn(shape, generator=gen) / math.sqrt(shape[0])
            if name == "head.w":
                t = t * HEAD_INIT_SCALE
        tensors[name] = t.to(torch.float32).contiguous()
    return Weights(config, tensors)


def build_attention_mask(mode: AttentionMode, seq_len: int) -> torch.Tensor:
    """Boolean ``[seq_len, seq_len]``; entry (i, j) is True iff i may attend to j."""
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    causal = torch.ones(seq_len, seq_len, dtype=torch.bool).tril()
    if mode.kind == AttentionMode.CAUSAL:
        return causal
    if mode.kind == AttentionMode.FULL:
        return torch.ones(seq_len, seq_len, dtype=torch.bool)
    if mode.prefix_len > seq_len:
        raise ValueError(f"prefix_len {mode.prefix_len} exceeds seq_len {seq_len}")
    causal[:, : mode.prefix_len] = True
    return causal


def _check_tokens(config: ModelConfig, tokens: torch.Tensor, offset: int = 0) -> None:
    if tokens.dim() != 2:
        raise ValueError(f"tokens must be [batch, seq], got shape {tuple(tokens.shape)}")
    if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= config.vocab_size):
        raise ValueError(f"token id out of range [0, {config.vocab_size})")
    if offset + tokens.shape[1] > config.max_seq_len:
        raise ValueError(
            f"sequence length {offset + tokens.shape[1]} exceeds max_seq_len {config.max_seq_len}"
        )


def _split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    b, s, d = x.shape
    return x.view(b, s, n_heads, d // n_heads).transpose(1, 2)


def _layer(
    w: dict[str, torch.Tensor],
    p: str,
    x: torch.Tensor,
    mask: torch.Tensor | None,
    n_heads: int,
    past: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
    b, s, d = x.shape
    h = F.layer_norm(x, (d,), w[p + "ln1.weight"], w[p + "ln1.bias"], LN_EPS)
    q = _split_heads(h @ w[p + "attn.wq"] + w[p + "attn.bq"], n_heads)
    k = _split_heads(h @ w[p + "attn.wk"] + w[p + "attn.bk"], n_heads)
    v = _split_heads(h @ w[p + "attn.wv"] + w[p + "attn.bv"], n_heads)
    if past is not None:
        k = torch.cat([past[0], k], dim=2)
        v = torch.cat([past[1], v], dim=2)
    # Boolean mask: False links get -inf scores, hence exactly zero weight.
    att = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
    att = att.transpose(1, 2).reshape(b, s, d)
    x = x + att @ w[p + "attn.wo"] + w[p + "attn.bo"]
    h = F.layer_norm(x, (d,), w[p + "ln2.weight"], w[p + "ln2.bias"], LN_EPS)
    x = x + F.gelu(h @ w[p + "ff.w1"] + w[p + "ff.b1"]) @ w[p + "ff.w2"] + w[p + "ff.b2"]
    return x, (k, v)


def _logits(w: dict[str, torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    h = F.layer_norm(x, (x.shape[-1],), w["ln_f.weight"], w["ln_f.bias"], LN_EPS)
    return h @ w["head.w"] + w["head.b"]


def forward(weights: Weights, tokens: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Logits ``[batch, seq, vocab]`` for ``tokens`` under an attention ``mask``.

    ``mask`` is ``[seq, seq]`` (shared by the batch), ``[batch, seq, seq]``, or
    ``None`` for unrestricted (fully bidirectional) attention.  Masked links get
    an exact zero attention weight.
    """
    cfg = weights.config
    _check_tokens(cfg, tokens)
    s = tokens.shape[1]
    if mask is not None:
        if mask.shape[-2:] != (s, s):
            raise ValueError(f"mask shape {tuple(mask.shape)} does not match seq_len {s}")
        mask = mask.unsqueeze(-3) if mask.dim() == 3 else mask
        if bool(mask.all()):
            mask = None
    w = weights.tensors
    x = w["tok_emb"][tokens] + w["pos_emb"][:s]
    for i in range(cfg.n_layers):
        x, _ = _layer(w, f"layers.{i}.", x, mask, cfg.n_heads)
    return _logits(w, x)


class KVCache:
    """Per-layer attention keys and values for the positions decoded so far."""

    def __init__(self, n_layers: int):
        self.keys: list[torch.Tensor | None] = [None] * n_layers
        self.values: list[torch.Tensor | None] = [None] * n_layers
        self.length = 0

    def past(self, layer: int) -> tuple[torch.Tensor, torch.Tensor] | None:
        if self.keys[layer] is None:
            return None
        return self.keys[layer], self.values[layer]


@torch.no_grad()
def forward_cached(weights: Weights, tokens: torch.Tensor, cache: KVCache) -> torch.Tensor:
    """Causal forward over ``tokens`` appended after the cached positions.

    Returns logits for the new positions only and extends ``cache`` in place.
    """
    cfg = weights.config
    start = cache.length
    _check_tokens(cfg, tokens, offset=start)
    s = tokens.shape[1]
    w = weights.tensors
    total = start + s
    mask = torch.ones(s, total, dtype=torch.bool).tril(diagonal=start)
    x = w["tok_emb"][tokens] + w["pos_emb"][start:total]
    for i in range(cfg.n_layers):
        x, (k, v) = _layer(w, f"layers.{i}.", x, mask, cfg.n_heads, cache.past(i))
        cache.keys[i], cache.values[i] = k, v
    cache.length = total
    return _logits(w, x)


def value_and_grad(
    weights: Weights, fn: Callable[[Weights], tuple[torch.Tensor, dict]]
) -> tuple[torch.Tensor, dict[str, torch.Tensor], dict]:
    """Evaluate ``fn(weights) -> (scalar, aux)`` and its gradient w.r.t. every tensor."""
    leaves = {k: t.detach().clone().requires_grad_(True) for k, t in weights.items()}
    loss, aux = fn(Weights(weights.config, leaves))
    names = list(leaves)
    if loss.requires_grad:
        grads = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
    else:
        grads = [None] * len(names)
    out = {
        k: torch.zeros_like(leaves[k]) if g is None else g.detach()
        for k, g in zip(names, grads)
    }
    return loss.detach(), out, aux


def backward(
    weights: Weights,
    tokens: torch.Tensor,
    mask: torch.Tensor,
    loss_fn: Callable[[torch.Tensor], torch.Tensor],
) -> dict[str, torch.Tensor]:
    """Gradient of ``loss_fn(forward(weights, tokens, mask))`` for every named tensor."""
    _, grads, _ = value_and_grad(weights, lambda w: (loss_fn(forward(w, tokens, mask)), {}))
    return grads
