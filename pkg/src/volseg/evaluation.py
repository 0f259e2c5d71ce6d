"""Whole-volume inference and per-class Dice scoring.

Inference tiles the volume with overlapping cubic windows, runs the network
on each, and averages the per-voxel sigmoid probabilities over every window
that covered the voxel.  Scoring treats each class channel independently:
probabilities are thresholded (>= rule, so exact ties count as positive) and
compared against the reference mask with the standard overlap ratio
2|A.B| / (|A|+|B|).  A class with empty prediction and empty reference has
no defined score and is reported as undefined rather than folded into means.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledVolume
from .network import ModelParams, network_forward
from .tensor import Tensor, _stable_sigmoid


def window_starts(dim: int, patch: int, stride: int) -> list[int]:
    """Window origins covering [0, dim): regular grid plus a clamped final window."""
    starts = list(range(0, dim - patch + 1, stride))
    if starts[-1] != dim - patch:
        starts.append(dim - patch)
    return starts


def infer_volume(params: ModelParams, image: np.ndarray, patch_size: int,
                 overlap: float = 0.5) -> np.ndarray:
    """Average sliding-window class probabilities; returns [num_classes, D, H, W]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 4 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 3:
        raise ValueError(f"expected a 3-d image, got shape {image.shape}")
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    dims = image.shape
    if any(d < patch_size for d in dims):
        raise ValueError(f"image dims {dims} are smaller than patch size {patch_size}")
    stride = max(1, int(round(patch_size * (1.0 - overlap))))
    num_classes = params.config.num_classes
    sums = np.zeros((num_classes,) + dims, dtype=np.float64)
    counts = np.zeros(dims, dtype=np.int64)
    for d0 in window_starts(dims[0], patch_size, stride):
        for h0 in window_starts(dims[1], patch_size, stride):
            for w0 in window_starts(dims[2], patch_size, stride):
                sl = (
                    slice(d0, d0 + patch_size),
                    slice(h0, h0 + patch_size),
                    slice(w0, w0 + patch_size),
                )
                window = image[sl][np.newaxis]
                logits = network_forward(params, Tensor(window))
                sums[(slice(None),) + sl] += _stable_sigmoid(logits.data)
                counts[sl] += 1
    if counts.min() < 1:
        raise AssertionError("sliding-window tiling left voxels uncovered")
    return sums / counts


def binarize(probs: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Independent per-class thresholding with the >= tie rule; multi-label output."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(probs) >= threshold).astype(np.uint8)


def dice(pred: np.ndarray, ref: np.ndarray) -> float | None:
    """2|A.B| / (|A|+|B|); None when both masks are empty."""
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {ref.shape}")
    for name, arr in (("pred", pred), ("ref", ref)):
        vals = np.unique(arr)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError(f"{name} mask is not binary (values {vals[:5]})")
    a = int(pred.sum())
    b = int(ref.sum())
    if a + b == 0:
        return None
    inter = int(np.logical_and(pred > 0, ref > 0).sum())
    return 2.0 * inter / (a + b)


def evaluate_volumes(params: ModelParams, volumes: list[LabeledVolume], patch_size: int,
                     overlap: float = 0.5, threshold: float = 0.5) -> dict[str, dict[str, float | None]]:
    """Per-volume, per-class Dice; classes without a reference mask score None."""
    out: dict[str, dict[str, float | None]] = {}
    for vol in volumes:
        probs = infer_volume(params, vol.image, patch_size, overlap)
        pred = binarize(probs, threshold)
        scores: dict[str, float | None] = {}
        for i, name in enumerate(vol.roster):
            if name in vol.masks:
                scores[name] = dice(pred[i], vol.masks[name])
            else:
                scores[name] = None
        out[vol.volume_id] = scores
    return out


@dataclass
class MetricsRecord:
    """One training run's test scores: per-volume per-class Dice plus identifiers."""

    run_id: str
    mode: str
    m: int
    repetition: int
    seed: int
    roster: tuple[str, ...]
    per_volume: dict[str, dict[str, float | None]] = field(default_factory=dict)

    def class_values(self, cls: str) -> list[float]:
        return [
            scores[cls]
            for scores in self.per_volume.values()
            if scores.get(cls) is not None
        ]

    def class_mean(self, cls: str) -> float | None:
        vals = self.class_values(cls)
        return float(np.mean(vals)) if vals else None

    def mean_dice(self, classes: tuple[str, ...] | None = None) -> float | None:
        vals: list[float] = []
        for cls in classes or self.roster:
            vals.extend(self.class_values(cls))
        return float(np.mean(vals)) if vals else None


METRICS_HEADER = ["run_id", "mode", "m", "repetition", "seed", "volume_id", "class", "dice"]


def write_metrics_csv(record: MetricsRecord, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_HEADER)
        for vid in sorted(record.per_volume):
            scores = record.per_volume[vid]
            for cls in record.roster:
                val = scores.get(cls)
                writer.writerow(
                    [
                        record.run_id,
                        record.mode,
                        str(record.m),
                        str(record.repetition),
                        str(record.seed),
                        vid,
                        cls,
                        "" if val is None else repr(float(val)),
                    ]
                )


def read_metrics_csv(path) -> MetricsRecord:
    with open(path, "r", newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != METRICS_HEADER:
        raise ValueError(f"{path} is not a metrics CSV (header {rows[0] if rows else 'missing'})")
    record: MetricsRecord | None = None
    roster: list[str] = []
    per_volume: dict[str, dict[str, float | None]] = {}
    for run_id, mode, m, rep, seed, vid, cls, val in rows[1:]:
        if record is None:
            record = MetricsRecord(run_id, mode, int(m), int(rep), int(seed), ())
        if cls not in roster:
            roster.append(cls)
        per_volume.setdefault(vid, {})[cls] = float(val) if val != "" else None
    if record is None:
        raise ValueError(f"{path} holds no metric rows")
    record.roster = tuple(roster)
    record.per_volume = per_volume
    return record


@dataclass(frozen=True)
class AggregateRow:
    """Group mean over every (repetition, test volume) sample of one class."""

    mode: str
    m: int
    cls: str
    mean_dice: float
    ci95_half_width: float
    n: int
    n_undefined: int

    @property
    def low_n(self) -> bool:
        return self.n < 2

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"aggregate group ({self.mode}, {self.m}, {self.cls}) has no defined samples")
        if self.ci95_half_width < 0:
            raise ValueError("CI half-width cannot be negative")


def mean_ci95(values: list[float]) -> tuple[float, float]:
    """Normal-approximation 95% interval; a single sample gets half-width 0."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("cannot aggregate an empty sample list")
    mean = float(arr.mean())
    if arr.size < 2:
        return mean, 0.0
    half = 1.96 * float(arr.std(ddof=1)) / float(np.sqrt(arr.size))
    return mean, half


def aggregate(records: list[MetricsRecord]) -> list[AggregateRow]:
    """One row per (mode, m, class), pooling repetitions and test volumes."""
    if not records:
        raise ValueError("no metrics records to aggregate")
    rosters = {r.roster for r in records}
    class_order = list(records[0].roster) if len(rosters) == 1 else sorted({c for r in rosters for c in r})
    groups: dict[tuple[str, int, str], tuple[list[float], int]] = {}
    for rec in records:
        for scores in rec.per_volume.values():
            for cls, val in scores.items():
                key = (rec.mode, rec.m, cls)
                vals, undef = groups.get(key, ([], 0))
                if val is None:
                    undef += 1
                else:
                    vals.append(val)
                groups[key] = (vals, undef)
    rows = []
    rank = {c: i for i, c in enumerate(class_order)}
    for key in sorted(groups, key=lambda k: (k[0], k[1], rank.get(k[2], len(rank)), k[2])):
        vals, undef = groups[key]
        if not vals:
            raise ValueError(f"aggregate group {key} has only undefined Dice samples")
        mean, half = mean_ci95(vals)
        rows.append(
            AggregateRow(
                mode=key[0], m=key[1], cls=key[2],
                mean_dice=mean, ci95_half_width=half, n=len(vals), n_undefined=undef,
            )
        )
    return rows


AGGREGATE_HEADER = ["mode", "m", "class", "mean_dice", "ci95_half_width", "n", "n_undefined", "low_n"]


def write_aggregate_csv(rows: list[AggregateRow], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(AGGREGATE_HEADER)
        for r in rows:
            writer.writerow(
                [
                    r.mode,
                    str(r.m),
                    r.cls,
                    repr(r.mean_dice),
                    repr(r.ci95_half_width),
                    str(r.n),
                    str(r.n_undefined),
                    str(r.low_n).lower(),
                ]
            )


def read_aggregate_csv(path) -> list[AggregateRow]:
    with open(path, "r", newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != AGGREGATE_HEADER:
        raise ValueError(f"{path} is not an aggregate CSV")
    out = []
    for mode, m, cls, mean_dice, half, n, undef, _low in rows[1:]:
        out.append(
            AggregateRow(
                mode=mode, m=int(m), cls=cls,
                mean_dice=float(mean_dice), ci95_half_width=float(half),
                n=int(n), n_undefined=int(undef),
            )
        )
    return out
