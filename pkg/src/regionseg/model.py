"""Segmentation network and region classifiers.

The segmenter is a small token encoder: a patch embedding followed by
`num_layers` blocks, each a single-head self-attention token mixer plus an
optional region-routed expert adapter, then a linear per-token class
projection upsampled bilinearly to full resolution. Mean-pooled tokens from
the middle of the network feed a lightweight internal region head; a
separate 3-layer convolutional classifier on the raw image infers the most
similar source region at adaptation time and stays frozen there.
"""

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn
from torch.nn import functional as F

from .errors import (
    CheckpointError,
    ConfigurationError,
    MissingArtifactError,
    ShapeError,
    UntrainedClassifierError,
)
from .moe import MoEBlock, MoEBlockParams
from .rng import torch_generator

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class SegModelConfig:
    num_layers: int = 4
    token_dim: int = 32
    patch_size: int = 4
    num_classes: int = 2
    num_regions: int = 3
    num_experts: int = 12
    top_k: int = 2
    noise_sigma: float = 0.1
    expert_hidden_dim: int = 16
    moe_enabled: bool = True

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigurationError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.patch_size < 1:
            raise ConfigurationError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.num_classes != 2:
            raise ConfigurationError("only binary segmentation is supported")
        if self.moe_enabled:
            self.moe_params()  # validate E/k/D relations

    def moe_params(self) -> MoEBlockParams:
        return MoEBlockParams(
            num_experts=self.num_experts,
            top_k=self.top_k,
            noise_sigma=self.noise_sigma,
            token_dim=self.token_dim,
            expert_hidden_dim=self.expert_hidden_dim,
            num_regions=self.num_regions,
        )


def _init_linear(weight: torch.Tensor, bias, generator: torch.Generator) -> None:
    fan_in = weight.shape[1]
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=generator)
        if bias is not None:
            bias.zero_()


class TokenMixer(nn.Module):
    """Pre-norm single-head self-attention with a residual connection."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.scale = dim ** -0.5

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.norm(z)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        return z + self.proj(attn @ v)

    def reset_parameters(self, generator: torch.Generator) -> None:
        self.norm.reset_parameters()
        _init_linear(self.qkv.weight, self.qkv.bias, generator)
        _init_linear(self.proj.weight, self.proj.bias, generator)


class SegmentationModel(nn.Module):
    def __init__(self, config: SegModelConfig, init_seed: int = 0):
        super().__init__()
        self.config = config
        c = config.token_dim
        self.patch_embed = nn.Conv2d(3, c, kernel_size=config.patch_size,
                                     stride=config.patch_size)
        self.mixers = nn.ModuleList(TokenMixer(c) for _ in range(config.num_layers))
        if config.moe_enabled:
            self.adapters = nn.ModuleList(
                MoEBlock(config.moe_params()) for _ in range(config.num_layers)
            )
        else:
            self.adapters = nn.ModuleList()
        self.norm = nn.LayerNorm(c)
        self.head = nn.Linear(c, config.num_classes)
        self.region_head = nn.Linear(c, config.num_regions)
        self.pooled_after = config.num_layers // 2
        self._noise_gen = torch.Generator()
        self.reset_parameters(torch_generator(init_seed, "model-init"))

    def reset_parameters(self, generator: torch.Generator) -> None:
        fan_in = 3 * self.config.patch_size ** 2
        bound = 1.0 / math.sqrt(fan_in)
        with torch.no_grad():
            self.patch_embed.weight.uniform_(-bound, bound, generator=generator)
            self.patch_embed.bias.zero_()
        for mixer in self.mixers:
            mixer.reset_parameters(generator)
        for adapter in self.adapters:
            adapter.reset_parameters(generator)
        self.norm.reset_parameters()
        _init_linear(self.head.weight, self.head.bias, generator)
        _init_linear(self.region_head.weight, self.region_head.bias, generator)

    def set_noise_seed(self, seed: int) -> None:
        self._noise_gen.manual_seed(seed & (2**63 - 1))

    def _expand_regions(self, region, batch: int, device) -> torch.Tensor:
        if isinstance(region, int):
            region = torch.full((batch,), region, dtype=torch.long, device=device)
        region = region.long()
        if region.shape != (batch,):
            raise ShapeError(f"expected {batch} region ids, got {tuple(region.shape)}")
        return region

    def forward_segment(self, x: torch.Tensor, region, train_mode: bool = False):
        """Class probabilities, per-layer routing decisions, pooled features.

        `region` is one id for the whole batch or a per-sample vector; it
        selects the gating network, nothing else.
        """
        if x.ndim == 3:
            x = x.unsqueeze(0)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        batch, _, height, width = x.shape
        ps = self.config.patch_size
        if height % ps or width % ps:
            raise ShapeError(
                f"spatial dims {height}x{width} not divisible by patch size {ps}"
            )
        regions = self._expand_regions(region, batch, x.device)
        z = self.patch_embed(x)  # (B, C, h, w)
        grid_h, grid_w = z.shape[2], z.shape[3]
        z = z.flatten(2).transpose(1, 2)  # (B, N, C)
        tokens_per_sample = grid_h * grid_w
        token_regions = regions.repeat_interleave(tokens_per_sample)

        decisions = []
        pooled = z.mean(dim=1) if self.pooled_after == 0 else None
        for i, mixer in enumerate(self.mixers):
            z = mixer(z)
            if self.config.moe_enabled:
                flat = z.reshape(-1, self.config.token_dim)
                flat, decision = self.adapters[i](
                    flat, token_regions, train_mode=train_mode, generator=self._noise_gen
                )
                z = flat.reshape(batch, tokens_per_sample, self.config.token_dim)
                decisions.append(decision)
            if i + 1 == self.pooled_after:
                pooled = z.mean(dim=1)
        if pooled is None:
            pooled = z.mean(dim=1)

        logits = self.head(self.norm(z))  # (B, N, num_classes)
        logits = logits.transpose(1, 2).reshape(batch, self.config.num_classes, grid_h, grid_w)
        logits = F.interpolate(logits, size=(height, width), mode="bilinear",
                               align_corners=False)
        probs = torch.softmax(logits, dim=1)
        return probs, decisions, pooled

    def classify_region_internal(self, pooled: torch.Tensor) -> torch.Tensor:
        if pooled.ndim != 2 or pooled.shape[1] != self.config.token_dim:
            raise ShapeError(
                f"expected (B, {self.config.token_dim}) pooled features, got "
                f"{tuple(pooled.shape)}"
            )
        return self.region_head(pooled)


class RegionClassifier(nn.Module):
    """Independent conv net mapping a raw tile to source-region probabilities."""

    def __init__(self, num_regions: int, init_seed: int = 0):
        super().__init__()
        self.num_regions = num_regions
        self.conv1 = nn.Conv2d(3, 16, kernel_size=3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 32, kernel_size=3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(32, 64, kernel_size=3, stride=2, padding=1)
        self.fc = nn.Linear(64, num_regions)
        self.register_buffer("trained_flag", torch.zeros(1, dtype=torch.uint8))
        self.reset_parameters(torch_generator(init_seed, "classifier-init"))

    def reset_parameters(self, generator: torch.Generator) -> None:
        for conv in (self.conv1, self.conv2, self.conv3):
            fan_in = conv.weight.shape[1] * conv.weight.shape[2] * conv.weight.shape[3]
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                conv.weight.uniform_(-bound, bound, generator=generator)
                conv.bias.zero_()
        _init_linear(self.fc.weight, self.fc.bias, generator)

    @property
    def trained(self) -> bool:
        return bool(self.trained_flag.item())

    def mark_trained(self) -> None:
        self.trained_flag.fill_(1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 3:
            x = x.unsqueeze(0)
        h = F.gelu(self.conv1(x))
        h = F.gelu(self.conv2(h))
        h = F.gelu(self.conv3(h))
        h = h.mean(dim=(2, 3))
        return self.fc(h)

    def probabilities(self, x: torch.Tensor) -> torch.Tensor:
        """Region probability vector(s); requires the classifier to be trained."""
        if not self.trained:
            raise UntrainedClassifierError(
                "region classifier used before training; run train_region_classifier"
            )
        return torch.softmax(self.logits(x), dim=-1)


# ---------------------------------------------------------------------------
# Checkpoints: one torch.save archive with format version, config, parameter
# tensors, and routing-noise RNG state. Loading rebuilds the module from the
# embedded config.
# ---------------------------------------------------------------------------


def save_checkpoint(model, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(model, SegmentationModel):
        payload = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": "segmenter",
            "config": dataclasses.asdict(model.config),
            "state": model.state_dict(),
            "noise_rng_state": model._noise_gen.get_state(),
        }
    elif isinstance(model, RegionClassifier):
        payload = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": "region_classifier",
            "config": {"num_regions": model.num_regions},
            "state": model.state_dict(),
        }
    else:
        raise CheckpointError(f"cannot checkpoint object of type {type(model).__name__}")
    torch.save(payload, path)


def _read_payload(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"corrupt checkpoint {path}: missing format version")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {payload['format_version']}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    return payload


def load_checkpoint(path, expected_config: SegModelConfig | None = None) -> SegmentationModel:
    payload = _read_payload(path)
    if payload.get("kind") != "segmenter":
        raise CheckpointError(f"{path} is not a segmenter checkpoint")
    config = SegModelConfig(**payload["config"])
    if expected_config is not None and dataclasses.asdict(expected_config) != dataclasses.asdict(config):
        raise CheckpointError(
            f"checkpoint config mismatch: expected {expected_config}, found {config}"
        )
    model = SegmentationModel(config)
    model.load_state_dict(payload["state"])
    model._noise_gen.set_state(payload["noise_rng_state"])
    model.eval()
    return model


def load_region_classifier(path) -> RegionClassifier:
    payload = _read_payload(path)
    if payload.get("kind") != "region_classifier":
        raise CheckpointError(f"{path} is not a region classifier checkpoint")
    clf = RegionClassifier(num_regions=payload["config"]["num_regions"])
    clf.load_state_dict(payload["state"])
    clf.eval()
    return clf
