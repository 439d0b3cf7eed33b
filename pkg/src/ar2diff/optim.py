"""Adam with a warmup-then-constant learning rate."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .model import Weights


@dataclass
class OptimizerState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int = 0

    @classmethod
    def zeros_like(cls, weights: Weights) -> "OptimizerState":
        return cls(
            {k: torch.zeros_like(t) for k, t in weights.items()},
            {k: torch.zeros_like(t) for k, t in weights.items()},
        )

    def to_tensors(self) -> dict[str, torch.Tensor]:
        out = {f"opt.m.{k}": t for k, t in self.m.items()}
        out.update({f"opt.v.{k}": t for k, t in self.v.items()})
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, torch.Tensor], step: int) -> "OptimizerState":
        m = {k[len("opt.m."):]: t for k, t in tensors.items() if k.startswith("opt.m.")}
        v = {k[len("opt.v."):]: t for k, t in tensors.items() if k.startswith("opt.v.")}
        return cls(m, v, step)


@dataclass(frozen=True)
class Adam:
    lr: float = 1e-3
    warmup_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 1.0

    def learning_rate(self, step: int) -> float:
        """Rate used for the update that produces step ``step`` (1-based)."""
        if self.warmup_steps and step <= self.warmup_steps:
            return self.lr * step / self.warmup_steps
        return self.lr

    @torch.no_grad()
    def update(self, weights: Weights, grads: dict[str, torch.Tensor], state: OptimizerState) -> float:
        """Apply one update in place; returns the learning rate used."""
        state.step += 1
        t = state.step
        lr = self.learning_rate(t)
        scale = 1.0
        if self.clip_norm is not None:
            norm = torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values()))
            if norm > self.clip_norm:
                scale = float(self.clip_norm / norm)
        bc1 = 1 - self.beta1 ** t
        bc2 = 1 - self.beta2 ** t
        for name in weights:
            g = grads[name] * scale if scale != 1.0 else grads[name]
            m, v = state.m[name], state.v[name]
            m.mul_(self.beta1).add_(g, alpha=1 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1 - self.beta2)
            denom = (v / bc2).sqrt_().add_(self.eps)
            weights.tensors[name].addcdiv_(m, denom, value=-lr / bc1)
        return lr
