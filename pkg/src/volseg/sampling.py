"""Training-subset construction under two labeling regimes.

Both regimes spend the same annotation budget, M labeled instances of every
class, but shape it differently:

  concentrated  M volumes carry full reference labels; everything else is
                dropped from training.
  distributed   every class is labeled in exactly M volumes, chosen so the
                labels spread over as many distinct volumes as possible.

The distributed spread rule is deterministic: volumes are shuffled by the
seed, then each class's M slots go to the least-loaded eligible volumes,
ties broken by shuffled order.  With every class available in every volume
this keeps per-volume label counts within one of each other and touches
min(V, M * num_classes) distinct volumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledVolume, drop_labels
from .serialization import check_version, read_json, write_json

INDEX_FORMAT_VERSION = 1
PLAN_FORMAT_VERSION = 1

CONCENTRATED = "concentrated"
DISTRIBUTED = "distributed"
MODES = (CONCENTRATED, DISTRIBUTED)


@dataclass(frozen=True)
class DatasetIndex:
    """Which classes each volume has reference masks for."""

    roster: tuple[str, ...]
    available: dict[str, tuple[str, ...]]  # volume id -> classes with masks

    def __post_init__(self):
        if len(set(self.roster)) != len(self.roster):
            raise ValueError("roster contains duplicate class names")
        for vid, classes in self.available.items():
            extra = sorted(set(classes) - set(self.roster))
            if extra:
                raise ValueError(f"volume {vid}: available classes {extra} are not in the roster")

    @classmethod
    def from_volumes(cls, volumes: list[LabeledVolume]) -> "DatasetIndex":
        if not volumes:
            raise ValueError("cannot index an empty volume collection")
        rosters = {v.roster for v in volumes}
        if len(rosters) != 1:
            raise ValueError("volumes disagree on the class roster")
        ids = [v.volume_id for v in volumes]
        if len(set(ids)) != len(ids):
            raise ValueError("volume ids are not unique")
        return cls(
            roster=volumes[0].roster,
            available={v.volume_id: v.present_classes() for v in volumes},
        )

    @property
    def volume_ids(self) -> list[str]:
        return sorted(self.available)

    def fully_labeled_ids(self) -> list[str]:
        full = set(self.roster)
        return [vid for vid in self.volume_ids if set(self.available[vid]) >= full]

    def to_dict(self) -> dict:
        return {
            "format_version": INDEX_FORMAT_VERSION,
            "roster": list(self.roster),
            "volumes": [
                {"id": vid, "labeled": list(self.available[vid])} for vid in self.volume_ids
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetIndex":
        check_version(d.get("format_version"), INDEX_FORMAT_VERSION, "dataset index")
        return cls(
            roster=tuple(d["roster"]),
            available={entry["id"]: tuple(entry["labeled"]) for entry in d["volumes"]},
        )


def save_index(index: DatasetIndex, path) -> None:
    write_json(path, index.to_dict())


def load_index(path) -> DatasetIndex:
    return DatasetIndex.from_dict(read_json(path))


@dataclass(frozen=True)
class SubsetPlan:
    """Explicit per-volume class inclusion map for one training run."""

    mode: str
    m: int
    seed: int
    roster: tuple[str, ...]
    assignments: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.m < 1:
            raise ValueError(f"m must be a positive integer, got {self.m}")
        for vid, classes in self.assignments.items():
            extra = sorted(set(classes) - set(self.roster))
            if extra:
                raise ValueError(f"plan assigns classes {extra} outside the roster to volume {vid}")

    def labeled_instance_count(self) -> int:
        return sum(len(classes) for classes in self.assignments.values())

    def class_counts(self) -> dict[str, int]:
        counts = {name: 0 for name in self.roster}
        for classes in self.assignments.values():
            for c in classes:
                counts[c] += 1
        return counts

    def volume_ids(self) -> list[str]:
        return sorted(vid for vid, classes in self.assignments.items() if classes)

    def to_dict(self) -> dict:
        return {
            "format_version": PLAN_FORMAT_VERSION,
            "mode": self.mode,
            "m": self.m,
            "seed": self.seed,
            "roster": list(self.roster),
            "assignments": {vid: list(classes) for vid, classes in sorted(self.assignments.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SubsetPlan":
        check_version(d.get("format_version"), PLAN_FORMAT_VERSION, "subset plan")
        return cls(
            mode=str(d["mode"]),
            m=int(d["m"]),
            seed=int(d["seed"]),
            roster=tuple(d["roster"]),
            assignments={vid: tuple(classes) for vid, classes in d["assignments"].items()},
        )


def save_plan(plan: SubsetPlan, path) -> None:
    write_json(path, plan.to_dict())


def load_plan(path) -> SubsetPlan:
    return SubsetPlan.from_dict(read_json(Path(path)))


def sample_concentrated(index: DatasetIndex, m: int, seed: int) -> SubsetPlan:
    """Pick M fully labeled volumes; they keep every class, all others drop out."""
    if m < 1:
        raise ValueError(f"m must be a positive integer, got {m}")
    fully = index.fully_labeled_ids()
    if m > len(fully):
        raise ValueError(f"concentrated sampling needs {m} fully labeled volumes, only {len(fully)} available")
    rng = np.random.default_rng(seed)
    order = [fully[i] for i in rng.permutation(len(fully))]
    chosen = order[:m]
    return SubsetPlan(
        mode=CONCENTRATED,
        m=m,
        seed=seed,
        roster=index.roster,
        assignments={vid: tuple(index.roster) for vid in chosen},
    )


def sample_distributed(index: DatasetIndex, m: int, seed: int) -> SubsetPlan:
    """Give each class M volumes, spreading labels to the least-loaded volumes first."""
    if m < 1:
        raise ValueError(f"m must be a positive integer, got {m}")
    ids = index.volume_ids
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    rank = {vid: i for i, vid in enumerate(order)}
    loads = {vid: 0 for vid in ids}
    included: dict[str, list[str]] = {vid: [] for vid in ids}
    for cls in index.roster:
        eligible = [vid for vid in order if cls in index.available[vid]]
        if len(eligible) < m:
            raise ValueError(
                f"distributed sampling needs class {cls} in {m} volumes, only {len(eligible)} have it"
            )
        picked: set[str] = set()
        for _ in range(m):
            best = min(
                (vid for vid in eligible if vid not in picked),
                key=lambda vid: (loads[vid], rank[vid]),
            )
            picked.add(best)
            loads[best] += 1
        for vid in eligible:
            if vid in picked:
                included[vid].append(cls)
    return SubsetPlan(
        mode=DISTRIBUTED,
        m=m,
        seed=seed,
        roster=index.roster,
        assignments={vid: tuple(classes) for vid, classes in included.items() if classes},
    )


def sample_plan(index: DatasetIndex, mode: str, m: int, seed: int) -> SubsetPlan:
    if mode == CONCENTRATED:
        return sample_concentrated(index, m, seed)
    if mode == DISTRIBUTED:
        return sample_distributed(index, m, seed)
    raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def check_plan(plan: SubsetPlan, index: DatasetIndex) -> None:
    """Raise if the plan violates budget, containment, or (distributed) spread rules."""
    if plan.roster != index.roster:
        raise ValueError("plan and index disagree on the class roster")
    for vid, classes in plan.assignments.items():
        if vid not in index.available:
            raise ValueError(f"plan references unknown volume {vid}")
        extra = sorted(set(classes) - set(index.available[vid]))
        if extra:
            raise ValueError(f"plan includes classes {extra} that volume {vid} does not have")
    counts = plan.class_counts()
    wrong = {c: n for c, n in counts.items() if n != plan.m}
    if wrong:
        raise ValueError(f"per-class inclusion counts differ from m={plan.m}: {wrong}")
    if plan.mode == DISTRIBUTED:
        loads = [len(classes) for classes in plan.assignments.values() if classes]
        if loads and max(loads) - min(loads) > 1:
            raise ValueError(f"distributed plan load spread {max(loads)}-{min(loads)} exceeds 1")
        full_avail = all(set(index.available[vid]) >= set(index.roster) for vid in index.available)
        if full_avail:
            expected = min(len(index.available), plan.m * len(plan.roster))
            if len(plan.volume_ids()) != expected:
                raise ValueError(
                    f"distributed plan uses {len(plan.volume_ids())} volumes, expected {expected}"
                )


def apply_plan(plan: SubsetPlan, volumes: list[LabeledVolume]) -> list[LabeledVolume]:
    """Materialize the training collection: labels outside the plan are removed."""
    by_id = {v.volume_id: v for v in volumes}
    out: list[LabeledVolume] = []
    for vid in sorted(plan.assignments):
        classes = plan.assignments[vid]
        if not classes:
            continue
        if vid not in by_id:
            raise ValueError(f"plan references volume {vid} which is not in the collection")
        missing = sorted(set(classes) - set(by_id[vid].present_classes()))
        if missing:
            raise ValueError(f"volume {vid} lacks reference masks for planned classes {missing}")
        out.append(drop_labels(by_id[vid], classes))
    return out
