"""Input-purification defenses: statistical outlier removal (SOR) and
salient point removal (SPR), plus success-rate evaluation under them."""

from dataclasses import dataclass

import numpy as np

from .geometry import as_cloud, pairwise_distances
from .model import forward_batch, gradient_norms, predict

SPR_FRACTION = 200 / 1024


class DegenerateStatisticsError(ValueError):
    """SOR would remove every point."""


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "SOR"
    sor_k: int = 10
    sor_std_mult: float = 1.0
    spr_count: int | None = None  # None: 200/1024 of the cloud size

    def __post_init__(self):
        if self.kind not in ("SOR", "SPR"):
            raise ValueError(f"unknown defense {self.kind!r}")
        if self.sor_k < 1:
            raise ValueError("sor_k must be at least 1")
        if self.spr_count is not None and self.spr_count < 0:
            raise ValueError("spr_count must be non-negative")

    @property
    def name(self):
        if self.kind == "SOR":
            return f"SOR(k={self.sor_k},std={self.sor_std_mult:g})"
        count = "auto" if self.spr_count is None else self.spr_count
        return f"SPR(count={count})"

    def removal_count(self, size):
        if self.spr_count is None:
            return int(round(SPR_FRACTION * size))
        return self.spr_count


def sor_statistic(points, k):
    """Mean distance of each point to its ``k`` nearest other points."""
    d = pairwise_distances(points, points)
    np.fill_diagonal(d, np.inf)
    nearest = np.sort(d, axis=1)[:, :k]
    return nearest.mean(axis=1)


def sor_mask(points, config):
    points = as_cloud(points)
    if len(points) <= config.sor_k:
        raise ValueError(f"SOR needs more than {config.sor_k} points, got {len(points)}")
    stat = sor_statistic(points, config.sor_k)
    threshold = stat.mean() + config.sor_std_mult * stat.std()
    keep = stat <= threshold
    if not np.any(keep):
        raise DegenerateStatisticsError("SOR removed every point")
    return keep


def sor_filter(points, config=DefenseConfig()):
    """Drop points whose mean k-NN distance exceeds mean + std_mult * std.

    Survivors keep their input order.
    """
    points = as_cloud(points)
    return points[sor_mask(points, config)]


def saliency(model, points):
    """Per-point input-gradient norm, using the model's own prediction as label."""
    return gradient_norms(model, points, predict(model, points))


def spr_mask(model, points, config):
    points = as_cloud(points)
    count = config.removal_count(len(points))
    if count >= len(points):
        raise ValueError(f"cannot remove {count} of {len(points)} points")
    keep = np.ones(len(points), dtype=bool)
    if count:
        order = np.argsort(-saliency(model, points), kind="stable")
        keep[order[:count]] = False
    return keep


def spr_filter(model, points, config=DefenseConfig(kind="SPR")):
    """Remove the ``spr_count`` most salient points (ties: lower index first)."""
    points = as_cloud(points)
    return points[spr_mask(model, points, config)]


def apply_defense(model, points, config):
    if config.kind == "SOR":
        return sor_filter(points, config)
    return spr_filter(model, points, config)


def defended_predictions(model, samples, config):
    """Predicted class of each sample after the defense is applied."""
    preds = []
    for pts in samples:
        cleaned = apply_defense(model, pts, config)
        preds.append(int(forward_batch(model, cleaned[None])[0].argmax()))
    return np.array(preds, dtype=np.int64)


def evaluate_under_defense(model, results, config):
    """Fraction of attacked samples still misclassified after the defense.

    ``results`` are :class:`~pcattack.attack.AttackResult` objects (or any
    objects with ``adversarial`` and ``label``) built from clean-correct
    samples. An empty list gives 0.0.
    """
    if not results:
        return 0.0
    preds = defended_predictions(model, [r.adversarial for r in results], config)
    labels = np.array([r.label for r in results])
    return float(np.mean(preds != labels))
