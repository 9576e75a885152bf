"""
Objective Service
Multi-task loss for the Enhanced Audited Model: normalized audited
cross-entropy plus normalized MINT binary cross-entropy plus an L2 term over
every parameter.
"""

import math
from dataclasses import dataclass, replace
from typing import Dict, Iterable, Union

import torch
import torch.nn.functional as F

from .exceptions import ContractViolationError, NumericDomainError
from .validation_service import LossWeights

PROBABILITY_CLAMP = 1e-7


def scalar(value: Union[torch.Tensor, float]) -> float:
    """Python float of a 0-d tensor without touching its graph"""
    return value.detach().item() if isinstance(value, torch.Tensor) else float(value)


@dataclass(frozen=True)
class LossNormalizer:
    """Running mean of |loss|, used as a constant divisor"""
    ema_abs: float = 1.0
    momentum: float = 0.99
    floor: float = 1e-8
    initialized: bool = False


@dataclass
class MultiTaskLossOutput:
    total: torch.Tensor
    audited_raw: torch.Tensor
    mint_raw: torch.Tensor
    audited_normed: torch.Tensor
    mint_normed: torch.Tensor
    reg: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {
            "audited_raw": scalar(self.audited_raw),
            "mint_raw": scalar(self.mint_raw),
            "audited_normed": scalar(self.audited_normed),
            "mint_normed": scalar(self.mint_normed),
            "reg": scalar(self.reg),
            "total": scalar(self.total),
        }


def audited_loss(logits: torch.Tensor, class_labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy over the member sub-batch"""
    if logits is None or logits.shape[0] == 0:
        raise ContractViolationError("audited loss needs at least one member sample")
    return F.cross_entropy(logits, class_labels)


def per_sample_cross_entropy(logits: torch.Tensor, class_labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, class_labels, reduction="none")


def mint_loss(probabilities: torch.Tensor, membership_labels: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy over the whole mixed batch"""
    if probabilities.numel() == 0:
        raise ContractViolationError("MINT loss needs at least one sample")
    detached = probabilities.detach()
    if not torch.all(torch.isfinite(detached)) or torch.any(detached < 0) or torch.any(detached > 1):
        raise NumericDomainError("membership probabilities must lie in [0, 1]")
    p = probabilities.clamp(PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP)
    y = membership_labels.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()


def update_normalizer(norm: LossNormalizer, raw: float) -> LossNormalizer:
    raw = scalar(raw)
    if not math.isfinite(raw):
        raise NumericDomainError(f"cannot normalise a non-finite loss ({raw})")
    if not norm.initialized:
        return replace(norm, ema_abs=max(abs(raw), norm.floor), initialized=True)
    ema = norm.momentum * norm.ema_abs + (1.0 - norm.momentum) * abs(raw)
    return replace(norm, ema_abs=max(ema, norm.floor))


def l2_penalty(params: Iterable[torch.Tensor]) -> torch.Tensor:
    params = list(params)
    if not params:
        return torch.zeros(())
    return torch.stack([p.pow(2).sum() for p in params]).sum()


def combine(
    audited_raw: torch.Tensor,
    mint_raw: torch.Tensor,
    audited_norm: LossNormalizer,
    mint_norm: LossNormalizer,
    weights: LossWeights,
    params: Iterable[torch.Tensor],
) -> MultiTaskLossOutput:
    """
    total = lambda1 * L_A / ema_A + lambda2 * L_M / ema_M + l2_coeff * sum ||w+||^2

    The normalizers are plain floats, so each normalized term differentiates
    as its raw term scaled by 1 / ema.
    """
    if not (audited_norm.initialized and mint_norm.initialized):
        raise ContractViolationError("normalizers must be updated for this step before combining")
    audited_normed = audited_raw / audited_norm.ema_abs
    mint_normed = mint_raw / mint_norm.ema_abs
    reg = weights.l2_coeff * l2_penalty(params)
    total = weights.lambda1 * audited_normed + weights.lambda2 * mint_normed + reg
    return MultiTaskLossOutput(
        total=total,
        audited_raw=audited_raw,
        mint_raw=mint_raw,
        audited_normed=audited_normed,
        mint_normed=mint_normed,
        reg=reg,
    )
