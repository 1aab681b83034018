"""Training objectives.

Pixel-wise segmentation cross-entropy, the region-expert mutual-information
regularizer over soft routing statistics, the region-classification loss,
their weighted combination, and the self-training loss on pseudo-masks.
All logs are natural; probabilities are floored at 1e-12 inside logs so a
zero probability at a true-class pixel can never produce a NaN.
"""

from dataclasses import dataclass

import torch

from .errors import ConfigurationError, LabelError, LossError, ShapeError, StatsError

PROB_FLOOR = 1e-12
JOINT_SUM_TOL = 1e-4


@dataclass
class LossWeights:
    lambda_mi: float = 0.1
    lambda_dom: float = 0.1

    def __post_init__(self):
        for name in ("lambda_mi", "lambda_dom"):
            value = getattr(self, name)
            if not 0 <= value < float("inf"):
                raise ConfigurationError(f"{name} must be finite and >= 0, got {value}")


def _as_batched(probs: torch.Tensor, target: torch.Tensor):
    if probs.ndim == 3:
        probs = probs.unsqueeze(0)
        target = target.unsqueeze(0)
    if probs.ndim != 4:
        raise ShapeError(f"expected (B, C, H, W) probabilities, got {tuple(probs.shape)}")
    if target.shape != (probs.shape[0], probs.shape[2], probs.shape[3]):
        raise ShapeError(
            f"mask shape {tuple(target.shape)} does not match probabilities "
            f"{tuple(probs.shape)}"
        )
    return probs, target


def seg_loss(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over batch and pixels of -log p(true class)."""
    probs, target = _as_batched(probs, target)
    target = target.long()
    if target.numel() and (target.min() < 0 or target.max() >= probs.shape[1]):
        raise LabelError(
            f"mask values must lie in [0, {probs.shape[1]}), got "
            f"[{int(target.min())}, {int(target.max())}]"
        )
    true_prob = probs.gather(1, target.unsqueeze(1)).squeeze(1)
    return -true_prob.clamp_min(PROB_FLOOR).log().mean()


def target_loss(probs: torch.Tensor, pseudo_mask: torch.Tensor) -> torch.Tensor:
    """Self-training loss: segmentation cross-entropy against a fixed pseudo-mask."""
    return seg_loss(probs, pseudo_mask)


def layer_mutual_information(joint: torch.Tensor) -> torch.Tensor:
    """I(region; expert) of one joint table; zero-probability cells contribute 0."""
    if not torch.isfinite(joint).all():
        raise StatsError("joint distribution contains non-finite entries")
    if bool((joint < 0).any()):
        raise StatsError("joint distribution contains a negative entry")
    total = joint.sum()
    if abs(float(total) - 1.0) > JOINT_SUM_TOL:
        raise StatsError(f"joint distribution sums to {float(total):.6f}, expected 1")
    p_region = joint.sum(dim=1, keepdim=True)
    p_expert = joint.sum(dim=0, keepdim=True)
    support = joint > 0
    one = torch.ones((), dtype=joint.dtype, device=joint.device)
    log_joint = torch.where(support, joint, one).log()
    log_region = torch.where(p_region > 0, p_region, one).log()
    log_expert = torch.where(p_expert > 0, p_expert, one).log()
    terms = joint * (log_joint - log_region - log_expert)
    zero = torch.zeros((), dtype=joint.dtype, device=joint.device)
    return torch.where(support, terms, zero).sum()


def mi_loss(stats) -> torch.Tensor:
    """Negated mutual information summed over MoE layers; minimizing maximizes MI."""
    if not stats:
        raise StatsError("no routing statistics given")
    total = None
    for entry in stats:
        joint = entry.joint if hasattr(entry, "joint") else entry
        mi = layer_mutual_information(joint)
        total = mi if total is None else total + mi
    return -total


def dom_loss(logits: torch.Tensor, regions: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of softmaxed region logits against region labels."""
    if logits.ndim != 2:
        raise ShapeError(f"expected (B, D) region logits, got {tuple(logits.shape)}")
    regions = regions.long()
    if regions.shape != (logits.shape[0],):
        raise ShapeError(
            f"region labels shape {tuple(regions.shape)} does not match logits batch "
            f"{logits.shape[0]}"
        )
    if regions.numel() and (regions.min() < 0 or regions.max() >= logits.shape[1]):
        raise LabelError(
            f"region label out of range [0, {logits.shape[1]}): "
            f"[{int(regions.min())}, {int(regions.max())}]"
        )
    log_probs = torch.log_softmax(logits, dim=1)
    return -log_probs.gather(1, regions.unsqueeze(1)).mean()


def total_loss(seg: torch.Tensor, mi: torch.Tensor, dom: torch.Tensor,
               weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the three components."""
    for name, value in (("seg", seg), ("mi", mi), ("dom", dom)):
        tensor = torch.as_tensor(value)
        if not torch.isfinite(tensor).all():
            raise LossError(f"non-finite {name} loss component: {value}")
    return seg + weights.lambda_mi * mi + weights.lambda_dom * dom
