"""Patch-based training: Adam over the presence-weighted multi-label loss.

Each iteration draws `batch_size` patches (half centered on labeled
foreground voxels by default, half uniform), averages their weighted losses,
and applies one bias-corrected Adam update.  A class a volume has no
reference for enters the loss with weight zero, so its head slice receives
exactly zero gradient from that patch.

Everything is driven by explicit seeds: the parameter init and the patch
sequence derive from TrainerConfig.seed, so identical inputs give
bit-identical final parameters.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledVolume
from .evaluation import dice, binarize, infer_volume
from .loss import PresenceMask, masked_multilabel_loss, presence_from_labels
from .network import ModelParams, NetworkConfig, build_network, network_forward
from .tensor import Tape, Tensor, add, backward, scalar_mul


@dataclass(frozen=True)
class TrainerConfig:
    """Defaults reproduce the reference protocol; desk runs override them."""

    learning_rate: float = 0.001
    iterations: int = 15000
    batch_size: int = 4
    patch_size: int = 64
    foreground_patch_fraction: float = 0.5
    seed: int = 0
    validation_interval: int = 250

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patch_size < 4 or self.patch_size % 4 != 0:
            raise ValueError(f"patch_size must be a positive multiple of 4, got {self.patch_size}")
        if not 0.0 <= self.foreground_patch_fraction <= 1.0:
            raise ValueError(
                f"foreground_patch_fraction must lie in [0, 1], got {self.foreground_patch_fraction}"
            )
        if self.validation_interval < 1:
            raise ValueError(f"validation_interval must be >= 1, got {self.validation_interval}")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "iterations": self.iterations,
            "batch_size": self.batch_size,
            "patch_size": self.patch_size,
            "foreground_patch_fraction": self.foreground_patch_fraction,
            "seed": self.seed,
            "validation_interval": self.validation_interval,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = {f: d[f] for f in cls.__dataclass_fields__ if f in d}
        extra = sorted(set(d) - set(cls.__dataclass_fields__))
        if extra:
            raise ValueError(f"unknown trainer config fields: {extra}")
        return cls(**known)


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={n: np.zeros_like(params.tensors[n].data) for n in params.names},
            v={n: np.zeros_like(params.tensors[n].data) for n in params.names},
        )


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    for name in params.names:
        if name not in grads or grads[name] is None:
            raise ValueError(f"no gradient supplied for parameter {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name in params.names:
        g = np.asarray(grads[name], dtype=np.float64)
        p = params.tensors[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter is {p.shape}")
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def sample_patch(volume: LabeledVolume, patch_size: int, rng: np.random.Generator,
                 foreground_fraction: float = 0.5) -> tuple[np.ndarray, np.ndarray, PresenceMask]:
    """Crop one cubic patch: image [1,P,P,P], reference stack [C,P,P,P], presence weights.

    With probability `foreground_fraction` the patch is centered (clamped to
    bounds) on a uniformly chosen voxel of a uniformly chosen labeled
    nonempty class; otherwise its corner is uniform over valid positions.
    The presence weights describe the volume, not the patch: a labeled class
    keeps weight 1 even when the crop misses its voxels.
    """
    dims = volume.dims
    if any(d < patch_size for d in dims):
        raise ValueError(f"volume {volume.volume_id} dims {dims} are smaller than patch size {patch_size}")
    starts = None
    if rng.random() < foreground_fraction:
        candidates = [c for c in volume.present_classes() if volume.masks[c].any()]
        if candidates:
            cls = candidates[int(rng.integers(len(candidates)))]
            coords = np.argwhere(volume.masks[cls] > 0)
            vox = coords[int(rng.integers(len(coords)))]
            starts = [
                int(np.clip(v - patch_size // 2, 0, dim - patch_size))
                for v, dim in zip(vox, dims)
            ]
    if starts is None:
        starts = [int(rng.integers(0, dim - patch_size + 1)) for dim in dims]
    sl = tuple(slice(s, s + patch_size) for s in starts)
    image_patch = volume.image[sl][np.newaxis].copy()
    ref = np.zeros((len(volume.roster), patch_size, patch_size, patch_size), dtype=np.float64)
    for i, name in enumerate(volume.roster):
        if name in volume.masks:
            ref[i] = volume.masks[name][sl]
    return image_patch, ref, presence_from_labels(volume.present_flags(), volume.roster)


@dataclass
class TrainResult:
    params: ModelParams  # best validation checkpoint when validation ran, else final
    final_params: ModelParams
    history: list[dict] = field(default_factory=list)
    val_history: list[dict] = field(default_factory=list)
    best_iteration: int = 0
    best_val_dice: float | None = None


def _mean_val_dice(params: ModelParams, volumes: list[LabeledVolume],
                   patch_size: int, threshold: float = 0.5) -> float:
    values = []
    for vol in volumes:
        probs = infer_volume(params, vol.image, patch_size)
        pred = binarize(probs, threshold)
        for i, name in enumerate(vol.roster):
            if name not in vol.masks:
                continue
            d = dice(pred[i], vol.masks[name])
            if d is not None:
                values.append(d)
    return float(np.mean(values)) if values else 0.0


def train(volumes: list[LabeledVolume], net_config: NetworkConfig, config: TrainerConfig,
          val_volumes: list[LabeledVolume] | None = None) -> TrainResult:
    """Run the full loop; returns the best-validation checkpoint and the final state."""
    if not volumes:
        raise ValueError("training set is empty")
    rosters = {v.roster for v in volumes}
    if len(rosters) != 1:
        raise ValueError("training volumes disagree on the class roster")
    roster = volumes[0].roster
    if len(roster) != net_config.num_classes:
        raise ValueError(
            f"network emits {net_config.num_classes} classes but the roster has {len(roster)}"
        )
    labeled = [v for v in volumes if v.present_classes()]
    if not labeled:
        raise ValueError("no training volume carries any reference label")
    covered = {c for v in labeled for c in v.present_classes()}
    uncovered = [c for c in roster if c not in covered]
    if uncovered:
        warnings.warn(f"classes {uncovered} have no reference labels anywhere; their heads get no supervision")

    seed_seq = np.random.SeedSequence(config.seed)
    init_ss, patch_ss = seed_seq.spawn(2)
    params = build_network(net_config, int(init_ss.generate_state(1)[0]))
    rng = np.random.default_rng(patch_ss)
    state = AdamState.for_params(params)

    result = TrainResult(params=params, final_params=params)
    best: ModelParams | None = None
    best_dice = -1.0
    best_iter = 0

    for it in range(1, config.iterations + 1):
        tape = Tape()
        lam_sums = np.zeros(len(roster))
        lam_counts = np.zeros(len(roster), dtype=int)
        present_counts = np.zeros(len(roster), dtype=int)
        with tape:
            patch_totals = []
            for _ in range(config.batch_size):
                vol = labeled[int(rng.integers(len(labeled)))]
                img, ref, pmask = sample_patch(vol, config.patch_size, rng, config.foreground_patch_fraction)
                logits = network_forward(params, Tensor(img))
                breakdown = masked_multilabel_loss(logits, Tensor(ref), pmask)
                patch_totals.append(breakdown.total)
                active = breakdown.weights > 0.0
                present_counts += active
                lam_sums[active] += breakdown.per_class[active]
                lam_counts += active
            total = patch_totals[0]
            for extra in patch_totals[1:]:
                total = add(total, extra)
            total = scalar_mul(total, 1.0 / config.batch_size)
        backward(total, tape)
        grads = {n: params.tensors[n].grad for n in params.names}
        adam_step(params, grads, state, config.learning_rate)
        params.zero_grad()

        row: dict = {"iteration": it, "total_loss": float(total.item())}
        for i, name in enumerate(roster):
            row[f"lambda_{name}"] = float(lam_sums[i] / lam_counts[i]) if lam_counts[i] else None
            row[f"present_{name}"] = int(present_counts[i])
        result.history.append(row)

        run_validation = val_volumes and (it % config.validation_interval == 0 or it == config.iterations)
        if run_validation:
            vd = _mean_val_dice(params, val_volumes, config.patch_size)
            result.val_history.append({"iteration": it, "mean_val_dice": vd})
            if vd > best_dice:
                best_dice = vd
                best = params.clone()
                best_iter = it

    result.final_params = params
    if best is not None:
        result.params = best
        result.best_iteration = best_iter
        result.best_val_dice = best_dice
    else:
        result.params = params
        result.best_iteration = config.iterations
    return result


def write_train_log(history: list[dict], roster: tuple[str, ...], path) -> None:
    """CSV log: iteration, total loss, per-class mean lambda and batch presence counts."""
    cols = ["iteration", "total_loss"]
    for name in roster:
        cols.append(f"lambda_{name}")
    for name in roster:
        cols.append(f"present_{name}")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(cols)
        for row in history:
            out = []
            for c in cols:
                v = row.get(c)
                if v is None:
                    out.append("")
                elif isinstance(v, float):
                    out.append(repr(v))
                else:
                    out.append(str(v))
            writer.writerow(out)
