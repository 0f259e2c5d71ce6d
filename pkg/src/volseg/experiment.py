"""Grid runner: train one network per (mode, budget, repetition) cell and aggregate.

The runner owns the whole pipeline for a study: generate the train/val/test
phantom cohorts, derive one seed per cell from the master seed, sample the
cell's subset plan, train, evaluate on the fixed test split, and finally pool
everything into one aggregate CSV.  Every cell writes its artifacts (plan,
checkpoint, training log, metrics) into its own run directory, and a finished
metrics file doubles as the completion marker, so an interrupted grid resumes
without retraining finished cells.  Infeasible cells (budget larger than the
eligible volume pool) are recorded in skipped.json instead of failing the
grid.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

from .data import (
    PhantomSpec,
    default_desk_spec,
    generate_cohort,
    load_cohort,
    phantom_spec_from_dict,
    phantom_spec_to_dict,
    save_cohort,
)
from .evaluation import (
    MetricsRecord,
    aggregate,
    evaluate_volumes,
    read_metrics_csv,
    write_aggregate_csv,
    write_metrics_csv,
)
from .network import NetworkConfig, save_checkpoint
from .sampling import (
    DatasetIndex,
    MODES,
    sample_plan,
    save_index,
    save_plan,
    apply_plan,
)
from .serialization import read_json, write_json
from .training import TrainerConfig, train, write_train_log


def desk_network_config(num_classes: int = 5) -> NetworkConfig:
    """Small variant that trains in under a minute on a CPU; same topology as the default."""
    return NetworkConfig(num_classes=num_classes, base_width=16, num_res_blocks=2, kernel_size=3)


def desk_trainer_config(seed: int = 0) -> TrainerConfig:
    """Desk-scale protocol: 10x fewer iterations than the reference protocol
    needs a larger step size to converge; everything else carries over."""
    return TrainerConfig(
        learning_rate=0.003,
        iterations=2500,
        batch_size=4,
        patch_size=16,
        foreground_patch_fraction=0.5,
        seed=seed,
        validation_interval=150,
    )


def derive_seed(master_seed: int, *parts) -> int:
    """Stable 63-bit seed from the master seed plus any identifying parts."""
    text = ":".join([str(master_seed), *(str(p) for p in parts)])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class ExperimentConfig:
    out_dir: str
    master_seed: int = 7
    modes: tuple[str, ...] = MODES
    budgets: tuple[int, ...] = (1, 2, 4, 8)
    repetitions: int = 3
    num_train: int = 30
    num_val: int = 2
    num_test: int = 20
    phantom: PhantomSpec = default_desk_spec()
    network: NetworkConfig = desk_network_config()
    trainer: TrainerConfig = desk_trainer_config()
    overlap: float = 0.5
    threshold: float = 0.5
    workers: int = 1

    def __post_init__(self):
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ValueError(f"unknown modes {bad}; choose from {MODES}")
        if not self.modes or not self.budgets:
            raise ValueError("modes and budgets must be non-empty")
        if any(b < 1 for b in self.budgets):
            raise ValueError(f"budgets must be positive, got {self.budgets}")
        if self.repetitions < 1:
            raise ValueError(f"repetitions must be >= 1, got {self.repetitions}")
        if min(self.num_train, self.num_val, self.num_test) < 1:
            raise ValueError("each split needs at least one volume")
        if len(self.phantom.roster) != self.network.num_classes:
            raise ValueError(
                f"network emits {self.network.num_classes} classes but the phantom roster has "
                f"{len(self.phantom.roster)}"
            )
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")

    def to_dict(self) -> dict:
        return {
            "out_dir": str(self.out_dir),
            "master_seed": self.master_seed,
            "modes": list(self.modes),
            "budgets": list(self.budgets),
            "repetitions": self.repetitions,
            "num_train": self.num_train,
            "num_val": self.num_val,
            "num_test": self.num_test,
            "phantom": phantom_spec_to_dict(self.phantom),
            "network": self.network.to_dict(),
            "trainer": self.trainer.to_dict(),
            "overlap": self.overlap,
            "threshold": self.threshold,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if "out_dir" not in d:
            raise ValueError("experiment config must name an out_dir")
        kwargs: dict = {"out_dir": d["out_dir"]}
        for key in ("master_seed", "repetitions", "num_train", "num_val", "num_test", "workers"):
            if key in d:
                kwargs[key] = int(d[key])
        for key in ("overlap", "threshold"):
            if key in d:
                kwargs[key] = float(d[key])
        if "modes" in d:
            kwargs["modes"] = tuple(d["modes"])
        if "budgets" in d:
            kwargs["budgets"] = tuple(int(b) for b in d["budgets"])
        if "phantom" in d and d["phantom"] is not None:
            kwargs["phantom"] = phantom_spec_from_dict(d["phantom"])
        net = dict(d.get("network") or {})
        net.setdefault("num_classes", len(kwargs.get("phantom", default_desk_spec()).roster))
        kwargs["network"] = NetworkConfig.from_dict(net)
        if "trainer" in d and d["trainer"] is not None:
            kwargs["trainer"] = TrainerConfig.from_dict(d["trainer"])
        else:
            kwargs["trainer"] = desk_trainer_config()
        return cls(**kwargs)


@dataclass(frozen=True)
class CellSpec:
    run_id: str
    mode: str
    m: int
    repetition: int
    seed: int


def plan_cells(config: ExperimentConfig) -> list[CellSpec]:
    cells = []
    for mode in config.modes:
        for m in config.budgets:
            for rep in range(config.repetitions):
                cells.append(
                    CellSpec(
                        run_id=f"{mode}_m{m}_rep{rep}",
                        mode=mode,
                        m=m,
                        repetition=rep,
                        seed=derive_seed(config.master_seed, mode, m, rep),
                    )
                )
    return cells


def _split_dir(out_dir: Path, split: str) -> Path:
    return out_dir / "data" / split


def prepare_data(config: ExperimentConfig, log=None) -> None:
    """Generate the three cohorts once; later calls reuse the on-disk copies."""
    out = Path(config.out_dir)
    counts = {"train": config.num_train, "val": config.num_val, "test": config.num_test}
    for split, n in counts.items():
        split_dir = _split_dir(out, split)
        index_path = split_dir / "index.json"
        if index_path.exists():
            continue
        if log:
            log(f"generating {n} {split} volumes")
        volumes = generate_cohort(
            config.phantom, n, derive_seed(config.master_seed, "data", split), prefix=split
        )
        save_cohort(volumes, split_dir)
        save_index(DatasetIndex.from_volumes(volumes), index_path)


def _run_cell(out_dir: str, cell: CellSpec, config_dict: dict) -> tuple[str, str | None]:
    """Execute one grid cell; returns (run_id, skip_reason or None)."""
    config = ExperimentConfig.from_dict(config_dict)
    out = Path(out_dir)
    run_dir = out / "runs" / cell.run_id
    metrics_path = run_dir / "metrics.csv"
    if metrics_path.exists():
        return cell.run_id, None
    train_vols = load_cohort(_split_dir(out, "train"))
    index = DatasetIndex.from_volumes(train_vols)
    try:
        plan = sample_plan(index, cell.mode, cell.m, cell.seed)
    except ValueError as e:
        return cell.run_id, str(e)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_plan(plan, run_dir / "plan.json")
    training_set = apply_plan(plan, train_vols)
    val_vols = load_cohort(_split_dir(out, "val"))
    trainer = replace(config.trainer, seed=cell.seed)
    result = train(training_set, config.network, trainer, val_volumes=val_vols)
    save_checkpoint(
        result.params,
        run_dir / "checkpoint.ckpt",
        extra={
            "run_id": cell.run_id,
            "best_iteration": result.best_iteration,
            "best_val_dice": result.best_val_dice,
        },
    )
    write_train_log(result.history, index.roster, run_dir / "train_log.csv")
    test_vols = load_cohort(_split_dir(out, "test"))
    per_volume = evaluate_volumes(
        result.params, test_vols, config.trainer.patch_size, config.overlap, config.threshold
    )
    record = MetricsRecord(
        run_id=cell.run_id,
        mode=cell.mode,
        m=cell.m,
        repetition=cell.repetition,
        seed=cell.seed,
        roster=index.roster,
        per_volume=per_volume,
    )
    tmp = metrics_path.with_suffix(".csv.tmp")
    write_metrics_csv(record, tmp)
    os.replace(tmp, metrics_path)
    return cell.run_id, None


def run_experiment(config: ExperimentConfig, log=None) -> Path:
    """Run or resume the whole grid; returns the aggregate CSV path."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", config.to_dict())
    prepare_data(config, log=log)
    cells = plan_cells(config)
    skipped: dict[str, str] = {}
    cfg_dict = config.to_dict()
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = [pool.submit(_run_cell, str(out), cell, cfg_dict) for cell in cells]
            for cell, fut in zip(cells, futures):
                run_id, reason = fut.result()
                if reason is not None:
                    skipped[run_id] = reason
                if log:
                    log(f"{run_id}: {'skipped: ' + reason if reason else 'done'}")
    else:
        for cell in cells:
            run_id, reason = _run_cell(str(out), cell, cfg_dict)
            if reason is not None:
                skipped[run_id] = reason
            if log:
                log(f"{run_id}: {'skipped: ' + reason if reason else 'done'}")
    write_json(out / "skipped.json", skipped)
    records = []
    for cell in cells:
        if cell.run_id in skipped:
            continue
        records.append(read_metrics_csv(out / "runs" / cell.run_id / "metrics.csv"))
    if not records:
        raise RuntimeError("every grid cell was skipped; nothing to aggregate")
    rows = aggregate(records)
    write_aggregate_csv(rows, out / "aggregate.csv")
    return out / "aggregate.csv"


def load_experiment_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(read_json(path))
