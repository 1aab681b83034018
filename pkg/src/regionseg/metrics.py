"""Evaluation metrics and region-similarity analysis.

Metrics are computed from a single confusion matrix aggregated over every
pixel of the evaluation split (micro aggregation), then turned into
per-class and mean IoU / F1 / precision / recall. Ratios with a zero
denominator evaluate to 0 here; the agreement-flavored 0/0 == 1 convention
lives only inside pseudo-label stability scoring.
"""

import json
from dataclasses import dataclass

import numpy as np
import torch

from .errors import AnalysisError, MetricError

CLASS_NAMES = ("non_slum", "slum")
METRIC_ORDER = ("iou", "f1", "precision", "recall")


@dataclass
class ConfusionMatrix:
    """2x2 pixel counts indexed (true class, predicted class)."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (2, 2):
            raise MetricError(f"expected a 2x2 confusion matrix, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise MetricError("confusion matrix entries must be non-negative")

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate_confusion(pred_masks, true_masks) -> ConfusionMatrix:
    """Aggregate pixel counts over pairs of binary masks."""
    if isinstance(pred_masks, np.ndarray):
        pred_masks = [pred_masks]
        true_masks = [true_masks]
    counts = np.zeros(4, dtype=np.int64)
    for pred, true in zip(pred_masks, true_masks, strict=True):
        pred = np.asarray(pred)
        true = np.asarray(true)
        if pred.shape != true.shape:
            raise MetricError(
                f"prediction shape {pred.shape} does not match mask shape {true.shape}"
            )
        values = np.union1d(np.unique(pred), np.unique(true))
        if values.size and (values.min() < 0 or values.max() > 1):
            raise MetricError("masks must be binary {0, 1}")
        idx = true.astype(np.int64).ravel() * 2 + pred.astype(np.int64).ravel()
        counts += np.bincount(idx, minlength=4)
    return ConfusionMatrix(counts.reshape(2, 2))


def _ratio(num: float, den: float) -> float:
    return float(num) / float(den) if den > 0 else 0.0


@dataclass
class MetricsReport:
    per_class: dict  # class name -> {iou, f1, precision, recall}
    mean: dict  # metric name -> unweighted mean over the two classes

    def to_dict(self) -> dict:
        return {"per_class": self.per_class, "mean": self.mean}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        header = f"{'class':<10} {'IoU':>8} {'F1':>8} {'Precision':>10} {'Recall':>8}"
        lines = [header, "-" * len(header)]
        for name in CLASS_NAMES:
            row = self.per_class[name]
            lines.append(
                f"{name:<10} {row['iou']:>8.4f} {row['f1']:>8.4f} "
                f"{row['precision']:>10.4f} {row['recall']:>8.4f}"
            )
        lines.append(
            f"{'mean':<10} {self.mean['iou']:>8.4f} {self.mean['f1']:>8.4f} "
            f"{self.mean['precision']:>10.4f} {self.mean['recall']:>8.4f}"
        )
        return "\n".join(lines)


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class and mean IoU / F1 / precision / recall from pixel counts."""
    if cm.total == 0:
        raise MetricError("confusion matrix is empty")
    per_class = {}
    for c, name in enumerate(CLASS_NAMES):
        tp = int(cm.counts[c, c])
        fp = int(cm.counts[1 - c, c])
        fn = int(cm.counts[c, 1 - c])
        precision = _ratio(tp, tp + fp)
        recall = _ratio(tp, tp + fn)
        per_class[name] = {
            "iou": _ratio(tp, tp + fp + fn),
            "f1": _ratio(2 * precision * recall, precision + recall),
            "precision": precision,
            "recall": recall,
        }
    mean = {
        key: 0.5 * (per_class[CLASS_NAMES[0]][key] + per_class[CLASS_NAMES[1]][key])
        for key in METRIC_ORDER
    }
    return MetricsReport(per_class=per_class, mean=mean)


def evaluate_segmentation(model, tiles, region_of_tile) -> tuple:
    """Aggregate metrics of a model over masked tiles.

    `region_of_tile` maps a tile to the routing region id. Returns the
    report plus the per-tile predicted masks (for overlays).
    """
    preds = []
    cm = ConfusionMatrix(np.zeros((2, 2), dtype=np.int64))
    model.eval()
    with torch.no_grad():
        for tile in tiles:
            if tile.mask is None:
                raise MetricError(f"tile {tile.tile_id} has no ground-truth mask")
            x = torch.from_numpy(tile.image).unsqueeze(0)
            probs, _, _ = model.forward_segment(x, int(region_of_tile(tile)), train_mode=False)
            pred = probs[0].argmax(dim=0).numpy().astype(np.uint8)
            preds.append(pred)
            cm = cm + accumulate_confusion(pred, tile.mask)
    return compute_metrics(cm), preds


# ---------------------------------------------------------------------------
# Region similarity: k-means over pooled encoder features, Jaccard overlap
# of the cluster-label sets occupied by each region.
# ---------------------------------------------------------------------------


def _kmeans_labels(features: np.ndarray, k: int, rng: np.random.Generator,
                   max_iter: int = 100) -> np.ndarray:
    n = features.shape[0]
    # k-means++ seeding
    centers = np.empty((k, features.shape[1]), dtype=np.float64)
    centers[0] = features[rng.integers(n)]
    closest = np.full(n, np.inf)
    for j in range(1, k):
        dist = np.sum((features - centers[j - 1]) ** 2, axis=1)
        closest = np.minimum(closest, dist)
        total = closest.sum()
        if total <= 0:
            centers[j] = features[rng.integers(n)]
            continue
        centers[j] = features[rng.choice(n, p=closest / total)]
    labels = None
    for _ in range(max_iter):
        d2 = ((features[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            member = features[labels == j]
            if len(member):
                centers[j] = member.mean(axis=0)
    return labels


def pooled_features(model, tiles, region: int = 0) -> np.ndarray:
    """Mean-pooled encoder tokens per tile, routed through one fixed region."""
    feats = []
    model.eval()
    with torch.no_grad():
        for tile in tiles:
            x = torch.from_numpy(tile.image).unsqueeze(0)
            _, _, pooled = model.forward_segment(x, region, train_mode=False)
            feats.append(pooled[0].numpy())
    return np.asarray(feats, dtype=np.float64)


def jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def region_similarity_matrix(model, groups, num_clusters: int = 8, seed: int = 0) -> np.ndarray:
    """Pairwise Jaccard similarity of occupied k-means cluster sets.

    `groups` is a list of tile lists, one per region; the returned matrix is
    square over that ordering.
    """
    for i, tiles in enumerate(groups):
        if len(tiles) < num_clusters:
            raise AnalysisError(
                f"group {i} has {len(tiles)} tiles, fewer than {num_clusters} clusters"
            )
    all_tiles = [t for tiles in groups for t in tiles]
    features = pooled_features(model, all_tiles)
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = _kmeans_labels(features, num_clusters, rng)
    label_sets = []
    offset = 0
    for tiles in groups:
        label_sets.append(set(labels[offset:offset + len(tiles)].tolist()))
        offset += len(tiles)
    size = len(groups)
    matrix = np.zeros((size, size), dtype=np.float64)
    for i in range(size):
        for j in range(size):
            matrix[i, j] = jaccard(label_sets[i], label_sets[j])
    return matrix
