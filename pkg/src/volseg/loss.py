"""Per-class sigmoid cross-entropy with presence weights.

Each class channel is treated as an independent binary segmentation problem.
A volume that carries no reference mask for class n contributes weight
c_n = 0 for that class; the weighted term is still built into the loss graph,
so the gradient that flows to the class-n head slice is exactly zero rather
than merely small.  Classes are independent: a voxel may be positive in
several channels, and the loss never couples channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, add, bce, channel_slice, scalar_mul, sigmoid


@dataclass(frozen=True)
class PresenceMask:
    """Per-class loss weights c_n, one per class channel.

    Binary 0/1 masks reproduce the hard include/exclude behaviour; fractional
    weights are allowed for reweighting experiments.
    """

    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.weights) == 0:
            raise ValueError("presence mask must cover at least one class")
        for i, w in enumerate(self.weights):
            if not np.isfinite(w) or w < 0.0:
                raise ValueError(f"presence weight for class index {i} must be finite and >= 0, got {w}")

    @classmethod
    def from_flags(cls, flags) -> "PresenceMask":
        return cls(tuple(1.0 if bool(f) else 0.0 for f in flags))

    @classmethod
    def all_present(cls, num_classes: int) -> "PresenceMask":
        return cls((1.0,) * num_classes)

    def __len__(self) -> int:
        return len(self.weights)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float64)


@dataclass
class ClassLossBreakdown:
    """Total loss tensor plus the unweighted per-class terms it was built from."""

    total: Tensor
    per_class: np.ndarray  # unweighted lambda_n values, shape [num_classes]
    weights: np.ndarray  # the c_n actually applied, shape [num_classes]

    def weighted_total_value(self) -> float:
        return float(self.total.item())


def presence_from_labels(present_flags: dict[str, bool], roster: tuple[str, ...]) -> PresenceMask:
    """Build the weight vector for a volume given which classes it has masks for."""
    unknown = sorted(set(present_flags) - set(roster))
    if unknown:
        raise ValueError(f"presence flags name classes outside the roster: {unknown}")
    return PresenceMask.from_flags(present_flags.get(name, False) for name in roster)


def masked_multilabel_loss(logits: Tensor, reference: Tensor, mask: PresenceMask) -> ClassLossBreakdown:
    """total = sum_n c_n * BCE(sigmoid(logits_n), reference_n), all classes included.

    `logits` and `reference` are [N_c, D, H, W] with matching shapes; the
    reference must be strictly binary.  Every class term participates in the
    graph even when its weight is zero, which pins the masked-class gradient
    to exact zero by multiplication rather than by omission.
    """
    if logits.data.ndim != 4:
        raise ValueError(f"expected logits of shape [N_c, D, H, W], got {logits.shape}")
    if logits.shape != reference.shape:
        raise ValueError(f"logits shape {logits.shape} does not match reference shape {reference.shape}")
    num_classes = logits.shape[0]
    if len(mask) != num_classes:
        raise ValueError(f"presence mask covers {len(mask)} classes but logits have {num_classes} channels")

    weights = mask.as_array()
    per_class = np.zeros(num_classes, dtype=np.float64)
    total: Tensor | None = None
    for n in range(num_classes):
        probs = sigmoid(channel_slice(logits, n, n + 1))
        target = channel_slice(reference, n, n + 1)
        lam = bce(probs, target)
        per_class[n] = lam.item()
        term = scalar_mul(lam, float(weights[n]))
        total = term if total is None else add(total, term)
    assert total is not None
    return ClassLossBreakdown(total=total, per_class=per_class, weights=weights)
