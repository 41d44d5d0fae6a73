"""Training objectives: L1 regression, symmetric InfoNCE and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DegenerateInput, EmptyBatch


@dataclass(frozen=True)
class LossWeights:
    lambda_reg: float = 1.0
    lambda_cont: float = 0.2
    temperature: float = 0.07

    def __post_init__(self):
        if self.lambda_reg < 0 or self.lambda_cont < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_reg == 0 and self.lambda_cont == 0:
            raise ValueError("at least one loss weight must be positive")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


@dataclass
class LossBreakdown:
    reg: torch.Tensor
    contrastive: torch.Tensor
    total: torch.Tensor

    def as_floats(self):
        return {"reg": float(self.reg.detach()), "cont": float(self.contrastive.detach()), "total": float(self.total.detach())}


class _AbsZeroSubgrad(torch.autograd.Function):
    """|x| with the subgradient at exactly zero pinned to 0."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x.abs()

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * torch.sign(x)


def l1_regression(predictions, targets):
    predictions = torch.as_tensor(predictions)
    targets = torch.as_tensor(targets, dtype=predictions.dtype)
    if predictions.numel() == 0:
        raise EmptyBatch("l1_regression needs at least one element")
    if predictions.shape != targets.shape:
        raise ValueError(f"shape mismatch {tuple(predictions.shape)} vs {tuple(targets.shape)}")
    return _AbsZeroSubgrad.apply(targets - predictions).mean()


def info_nce(z, t, temperature=0.07):
    """Symmetric InfoNCE over a batch; row ``i`` of ``z`` pairs with row ``i`` of ``t``."""
    if z.dim() != 2 or z.shape != t.shape:
        raise ValueError(f"expected matching (B, d) inputs, got {tuple(z.shape)} and {tuple(t.shape)}")
    B = z.shape[0]
    if B == 0:
        raise EmptyBatch("info_nce needs at least one pair")
    zn, tn = z.norm(dim=1), t.norm(dim=1)
    if bool((zn == 0).any()) or bool((tn == 0).any()):
        raise DegenerateInput("zero-norm row in contrastive input")
    logits = (z / zn[:, None]) @ (t / tn[:, None]).T / temperature
    labels = torch.arange(B, device=z.device)
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


def total_loss(reg, contrastive, weights):
    reg = torch.as_tensor(reg)
    contrastive = torch.as_tensor(contrastive, dtype=reg.dtype)
    total = weights.lambda_reg * reg + weights.lambda_cont * contrastive
    return LossBreakdown(reg, contrastive, total)
