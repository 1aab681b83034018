"""Region-conditioned mixture-of-experts adapter block.

Each block owns one gating network per region (token_dim -> num_experts
logits) and a shared pool of two-layer MLP expert adapters. Routing is
noisy top-k: Gaussian noise is added to the gating logits during training,
the k largest logits are kept (ties broken toward the lower expert index),
and a softmax over just those k values produces the mixture weights. The
block output is residual: input plus the weighted sum of the selected
experts, so zero-initialized expert output layers make the block an exact
identity.

Routing statistics are accumulated as soft weight mass per (region, expert)
cell, normalized to a joint distribution; because the softmax weights enter
the sum (not hard counts), the statistics stay differentiable with respect
to the gating parameters.
"""

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError, RoutingError, StatsError


@dataclass
class MoEBlockParams:
    num_experts: int = 12
    top_k: int = 2
    noise_sigma: float = 0.1
    token_dim: int = 32
    expert_hidden_dim: int = 16
    num_regions: int = 3

    def __post_init__(self):
        if not 1 <= self.top_k <= self.num_experts:
            raise ConfigurationError(
                f"top_k must satisfy 1 <= k <= num_experts, got k={self.top_k}, "
                f"E={self.num_experts}"
            )
        if self.num_regions < 1:
            raise ConfigurationError(f"num_regions must be >= 1, got {self.num_regions}")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass
class RoutingDecision:
    """Per-token selected expert indices (tokens, k) and mixture weights."""

    expert_indices: torch.Tensor
    weights: torch.Tensor


@dataclass
class RoutingStats:
    """Joint distribution over (region, expert) selection mass, shape (D, E)."""

    joint: torch.Tensor


def route_topk(logits: torch.Tensor, k: int) -> RoutingDecision:
    """Select the k largest logits per token and softmax over just those.

    Ties are broken toward the lower expert index. Weights are positive and
    sum to 1 per token.
    """
    if logits.ndim != 2:
        raise RoutingError(f"expected (tokens, E) logits, got shape {tuple(logits.shape)}")
    num_experts = logits.shape[1]
    if k > num_experts:
        raise RoutingError(f"k={k} exceeds number of experts {num_experts}")
    if not torch.isfinite(logits).all():
        raise RoutingError("non-finite gating logits")
    # stable sort keeps the original (ascending-index) order among equal
    # logits, which is exactly the tie-break we want
    order = torch.argsort(logits, dim=1, descending=True, stable=True)
    indices = order[:, :k]
    selected = torch.gather(logits, 1, indices)
    weights = torch.softmax(selected, dim=1)
    return RoutingDecision(expert_indices=indices, weights=weights)


def accumulate_stats(decisions, token_regions: torch.Tensor, num_regions: int,
                     num_experts: int):
    """Soft joint distribution P(region, expert) per layer.

    `decisions` is one RoutingDecision per MoE layer over the same tokens;
    `token_regions` gives the region id of every token. Entry (d, e) is the
    total routing weight that tokens of region d assigned to expert e,
    normalized by the total weight mass, so each joint sums to 1.
    """
    token_regions = token_regions.long()
    if token_regions.numel() == 0:
        raise StatsError("cannot accumulate routing statistics over an empty batch")
    if token_regions.min() < 0 or token_regions.max() >= num_regions:
        raise StatsError(
            f"token region ids must lie in [0, {num_regions}), got range "
            f"[{int(token_regions.min())}, {int(token_regions.max())}]"
        )
    stats = []
    for decision in decisions:
        weights = decision.weights
        if weights.shape[0] != token_regions.shape[0]:
            raise StatsError(
                f"decision covers {weights.shape[0]} tokens but {token_regions.shape[0]} "
                "region ids were given"
            )
        if decision.expert_indices.numel() and int(decision.expert_indices.max()) >= num_experts:
            raise StatsError(
                f"expert index {int(decision.expert_indices.max())} out of range "
                f"[0, {num_experts})"
            )
        cell = token_regions.unsqueeze(1) * num_experts + decision.expert_indices
        flat = torch.zeros(
            num_regions * num_experts, dtype=weights.dtype, device=weights.device
        )
        flat = flat.index_add(0, cell.reshape(-1), weights.reshape(-1))
        joint = flat.reshape(num_regions, num_experts) / weights.sum()
        stats.append(RoutingStats(joint=joint))
    return stats


class MoEBlock(nn.Module):
    """Residual mixture-of-experts adapter over flattened tokens."""

    def __init__(self, params: MoEBlockParams):
        super().__init__()
        self.params = params
        d, e, c, h = params.num_regions, params.num_experts, params.token_dim, params.expert_hidden_dim
        self.gate_weight = nn.Parameter(torch.empty(d, c, e))
        self.gate_bias = nn.Parameter(torch.empty(d, e))
        self.expert_w1 = nn.Parameter(torch.empty(e, c, h))
        self.expert_b1 = nn.Parameter(torch.empty(e, h))
        self.expert_w2 = nn.Parameter(torch.empty(e, h, c))
        self.expert_b2 = nn.Parameter(torch.empty(e, c))
        self.reset_parameters(torch.Generator())

    def reset_parameters(self, generator: torch.Generator) -> None:
        c = self.params.token_dim
        h = self.params.expert_hidden_dim
        with torch.no_grad():
            self.gate_weight.uniform_(-1.0 / math.sqrt(c), 1.0 / math.sqrt(c), generator=generator)
            self.gate_bias.zero_()
            self.expert_w1.uniform_(-1.0 / math.sqrt(c), 1.0 / math.sqrt(c), generator=generator)
            self.expert_b1.zero_()
            # zero output layer: the block starts as an exact identity, so
            # routing specialization is shaped by training, not by random
            # initial expert bias
            self.expert_w2.zero_()
            self.expert_b2.zero_()

    def _region_index(self, region, tokens: int, device) -> torch.Tensor:
        if isinstance(region, int):
            if not 0 <= region < self.params.num_regions:
                raise RoutingError(
                    f"region index {region} out of range [0, {self.params.num_regions})"
                )
            return torch.full((tokens,), region, dtype=torch.long, device=device)
        region = region.long()
        if region.numel() != tokens:
            raise RoutingError(
                f"per-token region vector has {region.numel()} entries for {tokens} tokens"
            )
        if region.numel() and (region.min() < 0 or region.max() >= self.params.num_regions):
            raise RoutingError(
                f"region index out of range [0, {self.params.num_regions})"
            )
        return region

    def gate_logits(self, z: torch.Tensor, region, train_mode: bool = False,
                    generator: torch.Generator | None = None) -> torch.Tensor:
        """Per-region gating logits, with Gaussian noise in train mode."""
        idx = self._region_index(region, z.shape[0], z.device)
        w = self.gate_weight[idx]  # (tokens, C, E)
        logits = torch.einsum("tc,tce->te", z, w) + self.gate_bias[idx]
        if train_mode and self.params.noise_sigma > 0:
            noise = torch.randn(
                logits.shape, dtype=logits.dtype, device=logits.device, generator=generator
            )
            logits = logits + self.params.noise_sigma * noise
        return logits

    def expert_outputs(self, z: torch.Tensor, expert: int) -> torch.Tensor:
        hidden = torch.nn.functional.gelu(z @ self.expert_w1[expert] + self.expert_b1[expert])
        return hidden @ self.expert_w2[expert] + self.expert_b2[expert]

    def forward(self, z: torch.Tensor, region, train_mode: bool = False,
                generator: torch.Generator | None = None):
        """Residual mixture output and the routing decision.

        Only the k selected experts are evaluated, each on the subset of
        tokens that routed to it.
        """
        logits = self.gate_logits(z, region, train_mode=train_mode, generator=generator)
        decision = route_topk(logits, self.params.top_k)
        tokens, k = decision.expert_indices.shape
        flat_expert = decision.expert_indices.reshape(-1)
        flat_weight = decision.weights.reshape(-1)
        token_of = torch.arange(tokens, device=z.device).repeat_interleave(k)
        delta = torch.zeros_like(z)
        for e in range(self.params.num_experts):
            sel = flat_expert == e
            if not bool(sel.any()):
                continue
            toks = token_of[sel]
            out = self.expert_outputs(z[toks], e)
            delta = delta.index_add(0, toks, out * flat_weight[sel].unsqueeze(1))
        return z + delta, decision

    def permuted_copy(self, perm) -> "MoEBlock":
        """Copy with experts reordered and gating columns reordered to match."""
        perm = torch.as_tensor(perm, dtype=torch.long)
        clone = MoEBlock(self.params)
        with torch.no_grad():
            clone.gate_weight.copy_(self.gate_weight[:, :, perm])
            clone.gate_bias.copy_(self.gate_bias[:, perm])
            clone.expert_w1.copy_(self.expert_w1[perm])
            clone.expert_b1.copy_(self.expert_b1[perm])
            clone.expert_w2.copy_(self.expert_w2[perm])
            clone.expert_b2.copy_(self.expert_b2[perm])
        return clone
