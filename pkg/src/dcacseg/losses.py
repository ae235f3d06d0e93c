"""Segmentation and domain-classification losses."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .model import ModelOutput

LOG_CLAMP = 1e-12


@dataclass
class LossBreakdown:
    dice_loss: float = 0.0
    ce_loss: float = 0.0
    seg_loss: float = 0.0
    domain_loss: float = 0.0
    total: float = 0.0
    domain_weight: float = 1.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def soft_dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Batch-aggregated soft Dice loss averaged over the foreground classes.

    probs: (B, C, H, W) per-pixel class probabilities; target: (B, H, W) labels.
    """
    if probs.shape[0] != target.shape[0] or probs.shape[2:] != target.shape[1:]:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs target {tuple(target.shape)}")
    onehot = F.one_hot(target.long(), probs.shape[1]).permute(0, 3, 1, 2).to(probs.dtype)
    dims = (0, 2, 3)
    intersect = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    dice = (2 * intersect + eps) / (denom + eps)
    return 1 - dice[1:].mean()


def cross_entropy_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean pixelwise cross entropy; log-softmax subtracts the max internally."""
    logp = torch.log_softmax(logits, dim=1)
    return -logp.gather(1, target.long().unsqueeze(1)).mean()


def domain_loss(domain_probs: torch.Tensor, domain_id: torch.Tensor,
                from_logits: bool = False) -> torch.Tensor:
    """Categorical cross entropy against domain labels.

    With ``from_logits`` the input is unnormalised and the loss goes through
    ``log_softmax``; this is what training uses, since the clamped probability
    form has a zero gradient once a prediction is confidently wrong.
    """
    k = domain_probs.shape[-1]
    if k < 2:
        raise ValueError("domain loss needs K >= 2")
    domain_id = torch.as_tensor(domain_id, dtype=torch.long)
    if int(domain_id.max()) >= k or int(domain_id.min()) < 0:
        raise ValueError(f"domain_id out of range for K={k}")
    idx = domain_id.reshape(-1, 1)
    if from_logits:
        return -torch.log_softmax(domain_probs, dim=-1).gather(-1, idx).squeeze(-1).mean()
    p = domain_probs.gather(-1, idx).squeeze(-1)
    return -torch.log(p.clamp_min(LOG_CLAMP)).mean()


def compute_loss(output: ModelOutput, target: torch.Tensor, domain_ids: torch.Tensor | None = None,
                 domain_weight: float = 1.0, dice_eps: float = 1e-5) -> tuple[torch.Tensor, LossBreakdown]:
    """Total training loss ``dice + ce + weight * domain`` and its scalar breakdown."""
    probs = torch.softmax(output.logits, dim=1)
    dice = soft_dice_loss(probs, target, dice_eps)
    ce = cross_entropy_loss(output.logits, target)
    seg = dice + ce
    total = seg
    dom_value = 0.0
    if output.domain_logits is not None and domain_ids is not None:
        dom = domain_loss(output.domain_logits, domain_ids, from_logits=True)
        total = seg + domain_weight * dom
        dom_value = dom.item()
    dice_v, ce_v = dice.item(), ce.item()
    seg_v = dice_v + ce_v
    breakdown = LossBreakdown(dice_v, ce_v, seg_v, dom_value, seg_v + domain_weight * dom_value,
                              domain_weight)
    return total, breakdown
