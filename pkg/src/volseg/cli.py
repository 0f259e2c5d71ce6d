"""Command-line entry points.

Subcommands: generate, sample, train, infer, evaluate, experiment.  Exit
codes follow one contract everywhere: 0 success, 1 usage error, 2 broken or
missing input data, 3 runtime failure.  Human-readable summaries go to
stdout, diagnostics to stderr, and machine artifacts (CSV/JSON/raw volumes)
only ever to files.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import data as data_mod
from .evaluation import (
    MetricsRecord,
    binarize,
    evaluate_volumes,
    infer_volume,
    write_metrics_csv,
)
from .experiment import (
    ExperimentConfig,
    load_experiment_config,
    plan_cells,
    run_experiment,
)
from .network import NetworkConfig, load_checkpoint, save_checkpoint
from .sampling import (
    DatasetIndex,
    MODES,
    apply_plan,
    check_plan,
    load_index,
    load_plan,
    sample_plan,
    save_index,
    save_plan,
)
from .serialization import FormatError, float64_bytes, read_json, write_json
from .training import TrainerConfig, train, write_train_log

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; the contract here reserves 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _auto_patch(dims: tuple[int, ...], cap: int = 64) -> int:
    patch = min(min(dims), cap)
    patch -= patch % 4
    if patch < 4:
        raise ValueError(f"volume dims {dims} are too small for any valid patch size")
    return patch


def _cmd_generate(args) -> int:
    spec = data_mod.default_desk_spec()
    if args.spec:
        spec = data_mod.phantom_spec_from_dict(read_json(args.spec))
    volumes = data_mod.generate_cohort(spec, args.count, args.seed, prefix=args.prefix)
    out = Path(args.out)
    data_mod.save_cohort(volumes, out)
    index = DatasetIndex.from_volumes(volumes)
    save_index(index, out / "index.json")
    print(f"wrote {len(volumes)} volumes ({'x'.join(str(d) for d in spec.dims)}, "
          f"{len(spec.roster)} classes) to {out}")
    print(f"index: {out / 'index.json'}")
    return EXIT_OK


def _cmd_sample(args) -> int:
    index = load_index(args.index)
    plan = sample_plan(index, args.mode, args.m, args.seed)
    check_plan(plan, index)
    save_plan(plan, args.out)
    counts = plan.class_counts()
    print(f"{plan.mode} plan: m={plan.m}, {plan.labeled_instance_count()} labeled structures "
          f"over {len(plan.volume_ids())} volumes")
    print(f"per-class counts: {counts}")
    print(f"plan written to {args.out}")
    return EXIT_OK


def _load_cohort_dir(path) -> list:
    return data_mod.load_cohort(path)


def _cmd_train(args) -> int:
    volumes = _load_cohort_dir(args.data)
    plan = load_plan(args.plan)
    training_set = apply_plan(plan, volumes)
    net_cfg = NetworkConfig.from_dict(read_json(args.net)) if args.net else NetworkConfig(
        num_classes=len(volumes[0].roster)
    )
    trainer_cfg = TrainerConfig.from_dict(read_json(args.trainer)) if args.trainer else TrainerConfig()
    val_volumes = _load_cohort_dir(args.val) if args.val else None
    print("resolved network config: " + json.dumps(net_cfg.to_dict(), sort_keys=True))
    print("resolved trainer config: " + json.dumps(trainer_cfg.to_dict(), sort_keys=True))
    result = train(training_set, net_cfg, trainer_cfg, val_volumes=val_volumes)
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_plan(plan, run_dir / "plan.json")
    save_checkpoint(
        result.params,
        run_dir / "checkpoint.ckpt",
        extra={"best_iteration": result.best_iteration, "best_val_dice": result.best_val_dice},
    )
    write_train_log(result.history, volumes[0].roster, run_dir / "train_log.csv")
    last = result.history[-1]["total_loss"] if result.history else float("nan")
    print(f"trained {trainer_cfg.iterations} iterations on {len(training_set)} volumes; "
          f"final batch loss {last:.6f}")
    if result.best_val_dice is not None:
        print(f"best validation Dice {result.best_val_dice:.4f} at iteration {result.best_iteration}")
    print(f"artifacts in {run_dir}")
    return EXIT_OK


def _cmd_infer(args) -> int:
    params, _extra = load_checkpoint(args.model)
    volume = data_mod.load_volume(args.volume)
    patch = args.patch or _auto_patch(volume.dims)
    probs = infer_volume(params, volume.image, patch, args.overlap)
    pred = binarize(probs, args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    roster = list(volume.roster)[: params.config.num_classes]
    if len(roster) != params.config.num_classes:
        raise ValueError(
            f"checkpoint emits {params.config.num_classes} classes but volume roster has {len(volume.roster)}"
        )
    header = {
        "format_version": 1,
        "id": volume.volume_id,
        "dims": list(volume.dims),
        "roster": roster,
        "patch_size": patch,
        "overlap": args.overlap,
        "threshold": args.threshold,
    }
    write_json(out / "header.json", header)
    for i, name in enumerate(roster):
        (out / f"prob_{name}.raw").write_bytes(float64_bytes(probs[i]))
        (out / f"pred_{name}.raw").write_bytes(pred[i].tobytes())
    pos = {name: int(pred[i].sum()) for i, name in enumerate(roster)}
    print(f"inferred {volume.volume_id} with patch {patch}; positive voxels per class: {pos}")
    print(f"predictions in {out}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    params, extra = load_checkpoint(args.model)
    data_dir = Path(args.data) / args.split if args.split else Path(args.data)
    volumes = _load_cohort_dir(data_dir)
    patch = args.patch or _auto_patch(volumes[0].dims)
    per_volume = evaluate_volumes(params, volumes, patch, args.overlap, args.threshold)
    record = MetricsRecord(
        run_id=str(extra.get("run_id", "eval")),
        mode=str(extra.get("mode", "adhoc")),
        m=int(extra.get("m", 0) or 0),
        repetition=int(extra.get("repetition", 0) or 0),
        seed=int(extra.get("seed", 0) or 0),
        roster=volumes[0].roster,
        per_volume=per_volume,
    )
    write_metrics_csv(record, args.out)
    for name in record.roster:
        mean = record.class_mean(name)
        shown = f"{mean:.4f}" if mean is not None else "undefined"
        print(f"{name}: mean Dice {shown} over {len(record.class_values(name))} volumes")
    overall = record.mean_dice()
    print(f"overall mean Dice: {overall:.4f}" if overall is not None else "overall mean Dice: undefined")
    print(f"metrics written to {args.out}")
    return EXIT_OK


def _cmd_experiment(args) -> int:
    config = load_experiment_config(args.config)
    cells = plan_cells(config)
    if args.dry_run:
        print(f"{len(cells)} cells for out_dir {config.out_dir}:")
        for c in cells:
            print(f"  {c.run_id} (seed {c.seed})")
        return EXIT_OK
    path = run_experiment(config, log=print)
    print(f"aggregate written to {path}")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="volseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("generate", help="write a cohort of labeled phantom volumes")
    p.add_argument("--out", required=True, help="output directory for volume subdirectories")
    p.add_argument("--spec", help="phantom spec JSON; defaults to the built-in 32-cube layout")
    p.add_argument("--count", type=int, default=1, help="number of volumes (default 1)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--prefix", default="vol", help="volume id prefix (default vol)")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("sample", help="build a subset plan from a dataset index")
    p.add_argument("--index", required=True, help="index.json written by generate")
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--m", required=True, type=int, help="labeled volumes per class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="plan JSON path")
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("train", help="train one network on a plan-restricted cohort")
    p.add_argument("--data", required=True, help="cohort directory")
    p.add_argument("--plan", required=True, help="subset plan JSON")
    p.add_argument("--out", required=True, help="run directory for checkpoint and logs")
    p.add_argument("--net", help="network config JSON (default: standard architecture)")
    p.add_argument("--trainer", help="trainer config JSON (default: reference protocol)")
    p.add_argument("--val", help="validation cohort directory for best-checkpoint selection")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="run sliding-window inference on one volume")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--volume", required=True, help="volume directory")
    p.add_argument("--out", required=True, help="output directory for probability/prediction rasters")
    p.add_argument("--patch", type=int, help="window size (default: fit to volume)")
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("evaluate", help="score a checkpoint on a labeled cohort")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="cohort directory (or parent of split dirs)")
    p.add_argument("--split", help="subdirectory of --data to evaluate, e.g. test")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--patch", type=int, help="window size (default: fit to volume)")
    p.add_argument("--overlap", type=float, default=0.5)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("experiment", help="run or resume a full (mode, budget, repetition) grid")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--dry-run", action="store_true", help="list grid cells without training")
    p.set_defaults(func=_cmd_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (FormatError, FileNotFoundError, NotADirectoryError, json.JSONDecodeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # anything else is a bug or environment failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
