"""Training objectives: next-token cross-entropy and the unrolled denoising loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .data import Batch, Vocab
from .model import AttentionMode, ConfigError, Weights, forward, value_and_grad


@dataclass(frozen=True)
class DiffusionSettings:
    unroll_temperature: float = 0.0
    w1: float = 1.0
    w2: float = 1.0

    def validate(self) -> "DiffusionSettings":
        if self.unroll_temperature < 0:
            raise ConfigError("diffusion.unroll_temperature must be >= 0")
        if self.w1 < 0 or self.w2 < 0:
            raise ConfigError("diffusion loss weights must be >= 0")
        if self.w1 == 0 and self.w2 == 0:
            raise ConfigError("diffusion loss weights w1 and w2 cannot both be zero")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def masked_cross_entropy(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over examples of the per-example mean CE on ``mask`` positions."""
    counts = mask.sum(dim=1)
    if bool((counts == 0).any()):
        raise ValueError("every example needs at least one loss-masked position")
    nll = F.cross_entropy(logits.transpose(1, 2), targets, reduction="none")
    nll = torch.where(mask, nll, torch.zeros_like(nll))
    return (nll.sum(dim=1) / counts.to(nll.dtype)).mean()


def ar_objective(weights: Weights, batch: Batch, mode: str = AttentionMode.CAUSAL) -> tuple[torch.Tensor, dict]:
    """Next-token CE: logits at position i score the token at i + 1."""
    if mode == AttentionMode.FULL:
        raise ConfigError("AR loss cannot use a fully bidirectional mask")
    logits = forward(weights, batch.tokens, batch.attention_mask(mode))
    loss = masked_cross_entropy(logits[:, :-1], batch.tokens[:, 1:], batch.loss_mask[:, 1:])
    return loss, {}


def ar_loss(weights: Weights, batch: Batch, mode: str = AttentionMode.CAUSAL):
    """Returns ``(loss, grads)``."""
    loss, grads, _ = value_and_grad(weights, lambda w: ar_objective(w, batch, mode))
    return loss, grads


def corrupt(
    tokens: torch.Tensor,
    region: torch.Tensor,
    vocab: Vocab,
    gen: torch.Generator | None = None,
    proportion: torch.Tensor | float | None = None,
) -> torch.Tensor:
    """Randomly replace a random proportion of the ``region`` positions.

    ``tokens`` and ``region`` are ``[B, S]`` (or ``[S]``).  Per example a
    proportion p ~ Uniform(0, 1) is drawn (unless ``proportion`` is given),
    each region position is selected with probability p and replaced by a
    uniform draw over non-special ids.  Positions outside ``region`` are
    returned untouched.
    """
    squeeze = tokens.dim() == 1
    if squeeze:
        tokens, region = tokens[None], region[None]
    b, s = tokens.shape
    if proportion is None:
        p = torch.rand(b, generator=gen)
    else:
        p = torch.as_tensor(proportion, dtype=torch.float32).expand(b)
    draws = torch.rand(b, s, generator=gen)
    lo, hi = vocab.regular_ids.start, vocab.regular_ids.stop
    replacement = torch.randint(lo, hi, (b, s), generator=gen)
    selected = (draws < p[:, None]) & region
    out = torch.where(selected, replacement, tokens)
    return out[0] if squeeze else out


def sample_tokens(logits: torch.Tensor, temperature: float, gen: torch.Generator | None = None) -> torch.Tensor:
    """Sample ids from ``softmax(logits / temperature)``; temperature 0 is argmax (lowest id on ties).

    Uses the Gumbel-max trick: ``argmax(logits / t + G)`` with standard Gumbel
    noise ``G`` is an exact draw from the tempered softmax.
    """
    if temperature == 0:
        return logits.argmax(dim=-1)
    u = torch.rand(logits.shape, generator=gen, dtype=logits.dtype)
    gumbel = -torch.log(-torch.log(u))
    return (logits / temperature + gumbel).argmax(dim=-1)


def unroll_input(
    logits: torch.Tensor, batch: Batch, temperature: float, gen: torch.Generator | None = None
) -> torch.Tensor:
    """Tokens sampled from ``logits`` on the target region; all other positions keep the clean batch tokens."""
    with torch.no_grad():
        sampled = sample_tokens(logits.detach(), temperature, gen)
    return torch.where(batch.loss_mask, sampled, batch.tokens)


def sundae_objective(
    weights: Weights,
    batch: Batch,
    corrupted: torch.Tensor,
    settings: DiffusionSettings,
    gen: torch.Generator | None = None,
    unrolled: torch.Tensor | None = None,
) -> tuple[torch.Tensor, dict]:
    """Two-pass denoising loss on a pre-corrupted batch.

    ``unrolled`` may be passed to pin the sampled second-pass input, which
    makes the loss a smooth function of the weights (used by gradient checks).
    """
    mask = batch.attention_mask(AttentionMode.FULL)
    if settings.w1 > 0:
        l1 = forward(weights, corrupted, mask)
    else:
        with torch.no_grad():
            l1 = forward(weights, corrupted, mask)
    loss1 = masked_cross_entropy(l1, batch.tokens, batch.loss_mask)
    if unrolled is None:
        unrolled = unroll_input(l1, batch, settings.unroll_temperature, gen)
    total = settings.w1 * loss1
    aux = {"L1": float(loss1.detach()), "L2": None, "unrolled": unrolled}
    if settings.w2 > 0:
        l2 = forward(weights, unrolled, mask)
        loss2 = masked_cross_entropy(l2, batch.tokens, batch.loss_mask)
        total = total + settings.w2 * loss2
        aux["L2"] = float(loss2.detach())
    return total, aux


def sundae_loss(
    weights: Weights,
    batch: Batch,
    vocab: Vocab,
    gen: torch.Generator | None = None,
    settings: DiffusionSettings = DiffusionSettings(),
    proportion: float | None = None,
):
    """Corrupt the target region, then evaluate the unrolled loss and its gradient.

    Returns ``(loss, grads, diagnostics)`` with diagnostics holding ``L1``,
    ``L2``, and the corrupted / unrolled inputs.
    """
    corrupted = corrupt(batch.tokens, batch.loss_mask, vocab, gen, proportion)
    loss, grads, aux = value_and_grad(
        weights, lambda w: sundae_objective(w, batch, corrupted, settings, gen)
    )
    aux["corrupted"] = corrupted
    return loss, grads, aux
