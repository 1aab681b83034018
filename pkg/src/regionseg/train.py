"""Source-phase training: the composite objective over region-mixed batches.

One SGD-with-momentum loop minimizes segmentation cross-entropy plus the
mutual-information and region-classification regularizers. Batches are
shuffled across all regions and repaired so every full batch contains at
least two regions whenever that is possible, keeping the per-batch joint
routing distribution informative. The external region classifier trains
afterwards, independently, with plain cross-entropy.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import TileSet
from .errors import ConfigurationError, NumericalError
from .losses import LossWeights, dom_loss, mi_loss, seg_loss, total_loss
from .metrics import accumulate_confusion  # noqa: F401  (re-exported for scripts)
from .moe import accumulate_stats
from .model import RegionClassifier, SegmentationModel, save_checkpoint
from .rng import numpy_rng, substream_seed

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.99
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    hflip: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class TrainResult:
    model: torch.nn.Module
    checkpoint_paths: list
    log: list


def _tensors_from_tiles(tiles):
    images = torch.from_numpy(np.stack([t.image for t in tiles]))
    regions = torch.tensor([t.region_id for t in tiles], dtype=torch.long)
    masks = None
    if all(t.mask is not None for t in tiles):
        masks = torch.from_numpy(np.stack([t.mask for t in tiles]).astype(np.int64))
    return images, masks, regions


def region_mixed_batches(regions: np.ndarray, batch_size: int,
                         rng: np.random.Generator) -> list:
    """Shuffled batches, repaired so full batches span >= 2 regions.

    The guarantee applies when at least two regions exist and
    batch_size >= 2 * num_regions; smaller or tail batches are left as the
    shuffle produced them.
    """
    n = len(regions)
    order = rng.permutation(n)
    batches = [order[i:i + batch_size].tolist() for i in range(0, n, batch_size)]
    distinct_total = len(set(regions.tolist()))
    if distinct_total < 2 or batch_size < 2 * distinct_total:
        return batches

    def distinct(batch):
        return len({regions[i] for i in batch})

    for bi, batch in enumerate(batches):
        if len(batch) < batch_size or distinct(batch) >= 2:
            continue
        lone_region = regions[batch[0]]
        repaired = False
        for bj, donor in enumerate(batches):
            if bj == bi:
                continue
            for pos, idx in enumerate(donor):
                if regions[idx] == lone_region:
                    continue
                candidate = donor.copy()
                candidate[pos] = batch[-1]
                if len(candidate) >= 2 and len({regions[i] for i in candidate}) < 2:
                    continue
                donor[pos], batch[-1] = batch[-1], idx
                repaired = True
                break
            if repaired:
                break
        if not repaired:
            logger.warning("could not repair single-region batch %d", bi)
    return batches


def _maybe_hflip(images, masks, flip_mask):
    if not flip_mask.any():
        return images, masks
    flipped = images.clone()
    flipped[flip_mask] = torch.flip(images[flip_mask], dims=[-1])
    out_masks = masks
    if masks is not None:
        out_masks = masks.clone()
        out_masks[flip_mask] = torch.flip(masks[flip_mask], dims=[-1])
    return flipped, out_masks


def train_source(model: SegmentationModel, source: TileSet, cfg: TrainConfig,
                 checkpoint_dir=None, log_path=None) -> TrainResult:
    """Minimize the composite source objective; one checkpoint per epoch."""
    for tile in source.tiles:
        if tile.mask is None:
            raise ConfigurationError(f"source tile {tile.tile_id} has no mask")
    num_regions = model.config.num_regions
    images, masks, regions = _tensors_from_tiles(source.tiles)
    if int(regions.max()) >= num_regions:
        raise ConfigurationError(
            f"tile region id {int(regions.max())} out of range for model with "
            f"{num_regions} regions"
        )

    model.train()
    model.set_noise_seed(substream_seed(cfg.seed, "routing-noise"))
    order_rng = numpy_rng(cfg.seed, "batch-order")
    flip_rng = numpy_rng(cfg.seed, "augment")
    optimizer = torch.optim.SGD(model.parameters(), lr=cfg.learning_rate,
                                momentum=cfg.momentum)

    tokens_per_sample = (source.tiles[0].size // model.config.patch_size) ** 2
    log_records = []
    checkpoint_paths = []
    log_file = open(log_path, "a") if log_path else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            batches = region_mixed_batches(regions.numpy(), cfg.batch_size, order_rng)
            for batch in batches:
                idx = torch.tensor(batch, dtype=torch.long)
                xb, yb = images[idx], masks[idx]
                rb = regions[idx]
                if cfg.hflip:
                    flips = torch.from_numpy(flip_rng.random(len(batch)) < 0.5)
                    xb, yb = _maybe_hflip(xb, yb, flips)
                if num_regions > 1 and len(set(rb.tolist())) < 2:
                    logger.warning(
                        "step %d: single-region batch, mutual information is degenerate",
                        step,
                    )

                optimizer.zero_grad()
                probs, decisions, pooled = model.forward_segment(xb, rb, train_mode=True)
                l_seg = seg_loss(probs, yb)
                if decisions:
                    token_regions = rb.repeat_interleave(tokens_per_sample)
                    stats = accumulate_stats(decisions, token_regions, num_regions,
                                             model.config.num_experts)
                    l_mi = mi_loss(stats)
                    layer_mi = [float(-mi_loss([s])) for s in stats]
                else:
                    l_mi = torch.zeros(())
                    layer_mi = []
                l_dom = dom_loss(model.classify_region_internal(pooled), rb)
                l_total = total_loss(l_seg, l_mi, l_dom, cfg.loss_weights)
                if not math.isfinite(float(l_total)):
                    raise NumericalError(
                        f"non-finite loss at step {step} (epoch {epoch}): "
                        f"seg={float(l_seg)}, mi={float(l_mi)}, dom={float(l_dom)}"
                    )
                l_total.backward()
                optimizer.step()

                record = {
                    "step": step,
                    "epoch": epoch,
                    "loss_seg": float(l_seg),
                    "loss_mi": float(l_mi),
                    "loss_dom": float(l_dom),
                    "loss_total": float(l_total),
                    "mean_mi_per_layer": layer_mi,
                }
                log_records.append(record)
                if log_file:
                    log_file.write(json.dumps(record, sort_keys=True) + "\n")
                step += 1
            if checkpoint_dir is not None:
                path = Path(checkpoint_dir) / f"epoch_{epoch + 1}.pt"
                save_checkpoint(model, path)
                checkpoint_paths.append(str(path))
    finally:
        if log_file:
            log_file.close()
    model.eval()
    return TrainResult(model=model, checkpoint_paths=checkpoint_paths, log=log_records)


def train_region_classifier(clf: RegionClassifier, source: TileSet,
                            cfg: TrainConfig) -> RegionClassifier:
    """Cross-entropy training of the external region classifier; frozen after."""
    images, _, regions = _tensors_from_tiles(source.tiles)
    distinct = sorted(set(regions.tolist()))
    if len(distinct) < 2:
        logger.warning("single-region source: region classifier is trivially constant")
    order_rng = numpy_rng(cfg.seed, "classifier-order")
    optimizer = torch.optim.SGD(clf.parameters(), lr=cfg.learning_rate,
                                momentum=cfg.momentum)
    clf.train()
    step = 0
    for _ in range(cfg.epochs):
        order = order_rng.permutation(len(source.tiles))
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.batch_size].copy())
            optimizer.zero_grad()
            loss = dom_loss(clf.logits(images[idx]), regions[idx])
            if not math.isfinite(float(loss)):
                raise NumericalError(f"non-finite classifier loss at step {step}")
            loss.backward()
            optimizer.step()
            step += 1
    clf.eval()
    clf.mark_trained()
    return clf


def region_accuracy(clf: RegionClassifier, tiles) -> float:
    """Fraction of tiles whose argmax region probability matches the label."""
    hits = 0
    with torch.no_grad():
        for tile in tiles:
            probs = clf.probabilities(torch.from_numpy(tile.image).unsqueeze(0))[0]
            if int(np.argmax(probs.numpy())) == tile.region_id:
                hits += 1
    return hits / len(tiles)
