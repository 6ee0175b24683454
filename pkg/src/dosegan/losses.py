"""Training objectives: L1 reconstruction, dose-level cross-entropy,
perceptual refinement, least-squares adversarial terms and their weighted sum.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from . import ops
from .nets import FeatureExtractor, PatchDiscriminator, frozen
from .tensor import Tensor


class NonFiniteLossError(FloatingPointError):
    """A loss term evaluated to NaN or Inf; ``term`` names it."""

    def __init__(self, term: str, value: float | None = None):
        self.term = term
        detail = "" if value is None else f" ({value})"
        super().__init__(f"non-finite loss term {term!r}{detail}")


@dataclass(frozen=True)
class LossWeights:
    reconstruction: float = 300.0
    classification: float = 10.0
    refinement: float = 10.0
    adversarial: float = 1.0

    def __post_init__(self):
        for name, v in asdict(self).items():
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.reconstruction, self.classification, self.refinement, self.adversarial)


@dataclass
class LossBreakdown:
    l_re: float = 0.0
    l_class: float = 0.0
    l_refine: float = 0.0
    l_dis_g: float = 0.0
    l_total: float = 0.0
    l_dis_d: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def weighted_total(weights: LossWeights, l_re: float, l_class: float, l_refine: float, l_dis_g: float) -> float:
    w1, w2, w3, w4 = weights.as_tuple()
    return w1 * l_re + w2 * l_class + w3 * l_refine + w4 * l_dis_g


def reconstruction_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Voxel-mean absolute error."""
    return ops.mean_abs(ops.sub(pred, target))


def classification_loss(logits: Tensor, labels) -> Tensor:
    return ops.softmax_cross_entropy(logits, labels)


def perceptual_loss(extractor: FeatureExtractor, pred: Tensor, target: Tensor) -> Tensor:
    """Sum over the selected layers of the size-normalized squared feature distance.

    The target's features are constants.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    fp = extractor(pred)
    ft = extractor(target.detach())
    total = None
    for a, b in zip(fp, ft):
        term = ops.mean_sq(ops.sub(a, b.detach()))
        total = term if total is None else ops.add(total, term)
    return total


def discriminator_loss(disc: PatchDiscriminator, x: Tensor, real: Tensor, fake: Tensor, training: bool = True) -> Tensor:
    """mean (D(x, real) - 1)^2 + mean D(x, fake)^2, with ``fake`` held constant."""
    real_scores = disc(x.detach(), real.detach(), training)
    fake_scores = disc(x.detach(), fake.detach(), training)
    return ops.add(ops.mean_sq(ops.shift(real_scores, -1.0)), ops.mean_sq(fake_scores))


def generator_adversarial_loss(disc: PatchDiscriminator, x: Tensor, fake: Tensor, training: bool = True) -> Tensor:
    """mean (D(x, fake) - 1)^2 with the critic's parameters held constant."""
    with frozen(disc):
        scores = disc(x.detach(), fake, training)
    return ops.mean_sq(ops.shift(scores, -1.0))


def adversarial_losses(disc: PatchDiscriminator, x: Tensor, real: Tensor, fake: Tensor,
                       training: bool = True) -> tuple[Tensor, Tensor]:
    return discriminator_loss(disc, x, real, fake, training), generator_adversarial_loss(disc, x, fake, training)


def _value(term: str, t: Tensor | float | None) -> float:
    if t is None:
        return 0.0
    v = t.item() if isinstance(t, Tensor) else float(t)
    if not math.isfinite(v):
        raise NonFiniteLossError(term, v)
    return v


def total_loss(
    weights: LossWeights,
    l_re: Tensor | None,
    l_class: Tensor | None = None,
    l_refine: Tensor | None = None,
    l_dis_g: Tensor | None = None,
    l_dis_d: Tensor | float | None = None,
) -> tuple[Tensor | None, LossBreakdown]:
    """Weighted generator objective plus a float breakdown.

    Missing terms count as 0. Terms with zero weight stay out of the graph,
    so they contribute no gradient at all.
    """
    parts = {"l_re": l_re, "l_class": l_class, "l_refine": l_refine, "l_dis_g": l_dis_g}
    values = {k: _value(k, v) for k, v in parts.items()}
    d_value = _value("l_dis_d", l_dis_d)
    graph = None
    for (name, t), w in zip(parts.items(), weights.as_tuple()):
        if t is None or w == 0:
            continue
        term = ops.scale(t, w)
        graph = term if graph is None else ops.add(graph, term)
    breakdown = LossBreakdown(
        l_dis_d=d_value,
        l_total=weighted_total(weights, values["l_re"], values["l_class"], values["l_refine"], values["l_dis_g"]),
        **values,
    )
    return graph, breakdown
