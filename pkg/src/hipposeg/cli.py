"""Command-line front end: synth, train, predict, evaluate, ablate,
consensus-report.

Every run writes its outputs plus a manifest.json (resolved config, input
paths, output hashes, seeds) into one run directory, either --out or
$HIPPOSEG_RUN_ROOT/<command>-<timestamp>-s<seed>.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .fusion import segment_volume
from .metrics import (
    aggregate,
    consensus_vs_single_report,
    evaluate_volume,
    format_summary,
    write_consensus_csv,
    write_records_csv,
    write_summary,
)
from .network import head_for_loss, load_ensemble, save_checkpoint
from .phantoms import (
    COHORTS,
    PhantomCase,
    PhantomSpec,
    Split,
    _largest_remainder,
    generate,
    split_holdout,
)
from .training import (
    TrainConfig,
    ablation_grid,
    config_from_json,
    config_to_json,
    grid_configs,
    train_ensemble,
)
from .volumes import (
    LabelMask,
    OrientationError,
    Volume,
    load_mask,
    load_volume,
    normalize_minmax,
    save_mask,
    save_volume,
    to_canonical,
)
from .nifti import NiftiError

DATASET_FORMAT = 1
SPLITS = ("train", "val", "test")


# --------------------------------------------------------------------------
# run directories, manifests
# --------------------------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    started: str = ""
    duration_s: float = 0.0
    version: str = __version__

    def write(self, run_dir: Path) -> Path:
        path = run_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        return path


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_outputs(run_dir: Path, paths) -> dict:
    return {str(Path(p).relative_to(run_dir)): _sha256(Path(p)) for p in paths}


def _run_dir(args, command: str, seed) -> Path:
    if getattr(args, "out", None):
        run_dir = Path(args.out)
    else:
        root = Path(os.environ.get("HIPPOSEG_RUN_ROOT", "runs"))
        stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
        run_dir = root / f"{command}-{stamp}-s{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# --------------------------------------------------------------------------
# dataset directory format
# --------------------------------------------------------------------------

def write_dataset(run_dir: Path, cases, split: Split, meta: dict) -> list[Path]:
    """Write volumes/masks NIfTI pairs plus dataset.json; returns all paths."""
    (run_dir / "volumes").mkdir(exist_ok=True)
    (run_dir / "masks").mkdir(exist_ok=True)
    split_of = {}
    for name, subset in split.subsets().items():
        for case in subset:
            split_of[case.case_id] = name
    items, paths = [], []
    for case in cases:
        vol_rel = f"volumes/{case.case_id}.nii.gz"
        mask_rel = f"masks/{case.case_id}.nii.gz"
        save_volume(case.volume, run_dir / vol_rel)
        save_mask(case.mask, run_dir / mask_rel, like=case.volume)
        paths += [run_dir / vol_rel, run_dir / mask_rel]
        items.append({
            "case_id": case.case_id,
            "cohort": case.cohort,
            "split": split_of[case.case_id],
            "volume": vol_rel,
            "mask": mask_rel,
        })
    manifest = dict(meta)
    manifest["format_version"] = DATASET_FORMAT
    manifest["items"] = items
    ds_path = run_dir / "dataset.json"
    ds_path.write_text(json.dumps(manifest, indent=2))
    paths.append(ds_path)
    return paths


def read_dataset(data_dir) -> dict:
    path = Path(data_dir) / "dataset.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    meta = json.loads(path.read_text())
    if meta.get("format_version") != DATASET_FORMAT:
        raise ValueError(f"{path}: unsupported dataset format {meta.get('format_version')!r}")
    return meta


def load_cases(data_dir, splits=None) -> list[PhantomCase]:
    """Load dataset volumes as canonical, normalized cases.

    `splits` limits to the given split names (None loads everything).
    """
    data_dir = Path(data_dir)
    meta = read_dataset(data_dir)
    cases = []
    for item in meta["items"]:
        if splits is not None and item["split"] not in splits:
            continue
        volume = load_volume(data_dir / item["volume"])
        mask = load_mask(data_dir / item["mask"])
        volume, mask, _tf = to_canonical(volume, mask)
        volume = normalize_minmax(volume)
        cases.append(PhantomCase(volume, mask, item["cohort"], item["case_id"]))
    if not cases:
        wanted = "any split" if splits is None else "/".join(splits)
        raise ValueError(f"no cases in {data_dir} for {wanted}")
    return cases


def load_split(data_dir) -> Split:
    return Split(
        train=load_cases(data_dir, ("train",)),
        val=load_cases(data_dir, ("val",)),
        test=load_cases(data_dir, ("test",)),
    )


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cohorts = [c.strip() for c in args.cohorts.split(",") if c.strip()]
    for c in cohorts:
        if c not in COHORTS:
            raise ValueError(f"unknown cohort {c!r}; choose from {COHORTS}")
    per_cohort = _largest_remainder(args.count, [1.0 / len(cohorts)] * len(cohorts))

    run_dir = _run_dir(args, "synth", args.seed)
    started, t0 = _now(), time.monotonic()
    cases = []
    for cohort, n in zip(cohorts, per_cohort):
        if n == 0:
            continue
        cohort_seed = int(np.random.SeedSequence(
            [args.seed, COHORTS.index(cohort)]).generate_state(1)[0])
        spec = PhantomSpec(seed=cohort_seed, shape=tuple(args.shape), cohort=cohort,
                           noise_sigma=args.noise_sigma, count=n)
        cases.extend(generate(spec))
    split = split_holdout(cases, tuple(args.fractions), seed=args.seed)

    meta = {
        "seed": args.seed,
        "shape": list(args.shape),
        "noise_sigma": args.noise_sigma,
        "fractions": list(args.fractions),
        "counts": {c: n for c, n in zip(cohorts, per_cohort) if n},
    }
    paths = write_dataset(run_dir, cases, split, meta)
    manifest = RunManifest(
        command="synth",
        config={**meta, "cohorts": cohorts, "count": args.count},
        outputs=_hash_outputs(run_dir, paths),
        seeds={"master": args.seed},
        started=started,
        duration_s=round(time.monotonic() - t0, 3),
    )
    manifest.write(run_dir)
    sizes = {name: len(subset) for name, subset in split.subsets().items()}
    print(f"wrote {len(cases)} phantom pairs to {run_dir} (split {sizes})")
    return 0


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

PRESETS = ("best", "desk") + tuple(f"grid-row{i}" for i in range(1, 7))


def _preset_config(name: str, scale: str, seed: int) -> TrainConfig:
    base = TrainConfig.desk_preset(seed=seed) if scale == "desk" \
        else TrainConfig.full_preset(seed=seed)
    if name in ("best", "desk"):
        return base
    row = int(name.rsplit("row", 1)[1]) - 1
    return grid_configs(base)[row]


def _deep_update(dst: dict, src: dict) -> dict:
    for key, value in src.items():
        if isinstance(value, dict) and isinstance(dst.get(key), dict):
            _deep_update(dst[key], value)
        else:
            dst[key] = value
    return dst


def resolve_train_config(args) -> tuple[TrainConfig, dict]:
    """Precedence: CLI flag > config file > preset > built-in default."""
    scale = args.scale or ("desk" if args.preset == "desk" else "full")
    cfg = config_to_json(_preset_config(args.preset, scale, args.seed))
    file_cfg = {}
    if args.config:
        file_cfg = json.loads(Path(args.config).read_text())
        _deep_update(cfg, file_cfg)
    flag_overrides = {}
    for flag, path in (
        ("optimizer", ("optimizer",)),
        ("lr", ("initial_lr",)),
        ("loss", ("loss",)),
        ("max_epochs", ("max_epochs",)),
        ("patience", ("patience",)),
        ("batch_size", ("batch_size",)),
        ("epoch_sizes", ("epoch_sizes",)),
        ("depth", ("network", "depth")),
        ("base_width", ("network", "base_width")),
        ("positive_fraction", ("sampler", "positive_fraction")),
    ):
        value = getattr(args, flag)
        if value is None:
            continue
        node = cfg
        for key in path[:-1]:
            node = node[key]
        node[path[-1]] = value
        flag_overrides[flag] = value
    if args.augment is not None:
        cfg["sampler"]["augment"]["enabled"] = args.augment
        flag_overrides["augment"] = args.augment
    cfg["seed"] = args.seed
    # keep the head consistent with the loss unless explicitly pinned
    explicit_head = "network" in file_cfg and "head" in file_cfg["network"]
    if not explicit_head:
        cfg["network"]["head"] = head_for_loss(cfg["loss"])
    config = config_from_json(cfg)
    provenance = {
        "preset": args.preset,
        "scale": scale,
        "config_file": args.config,
        "flag_overrides": flag_overrides,
    }
    return config, provenance


def cmd_train(args) -> int:
    torch.set_num_threads(args.workers)
    config, provenance = resolve_train_config(args)
    split = load_split(args.data)
    run_dir = _run_dir(args, "train", config.seed)
    started, t0 = _now(), time.monotonic()

    def progress(orientation, stats):
        alpha = "" if stats.alpha is None else f" alpha {stats.alpha:.3f}"
        print(f"[{orientation}] epoch {stats.epoch} train {stats.train_dice:.4f} "
              f"val {stats.val_dice:.4f} lr {stats.lr:g}{alpha}", flush=True)

    result = train_ensemble(split, config, progress=progress if args.verbose else None)

    paths = []
    for orientation, report in result.reports.items():
        report.save_json(run_dir / "reports" / f"{orientation}.json")
        report.save_csv(run_dir / "reports" / f"{orientation}.csv")
        paths += [run_dir / "reports" / f"{orientation}.json",
                  run_dir / "reports" / f"{orientation}.csv"]
        if args.plots:
            plot = run_dir / "plots" / f"{orientation}.png"
            _plot_report(report, plot)
            paths.append(plot)
    for orientation, net in result.nets.items():
        ckpt = run_dir / "checkpoints" / f"{orientation}.pt"
        report = result.reports[orientation]
        save_checkpoint(net, ckpt, meta={
            "orientation": orientation,
            "best_epoch": report.best_epoch,
            "best_val_dice": report.best_val_dice,
            "seed": config.seed,
        })
        paths.append(ckpt)

    manifest = RunManifest(
        command="train",
        config={"resolved": config_to_json(config), "provenance": provenance,
                "workers": args.workers},
        inputs=[str(Path(args.data).resolve())],
        outputs=_hash_outputs(run_dir, paths),
        seeds={"master": config.seed},
        started=started,
        duration_s=round(time.monotonic() - t0, 3),
    )
    manifest.write(run_dir)

    for orientation, report in result.reports.items():
        print(f"{orientation}: best val Dice {report.best_val_dice:.4f} "
              f"at epoch {report.best_epoch} ({report.stop_reason or 'diverged'})")
    if result.failed:
        for orientation, err in result.errors.items():
            print(f"error: {err}", file=sys.stderr)
        return 1
    print(f"checkpoints written to {run_dir / 'checkpoints'}")
    return 0


# --------------------------------------------------------------------------
# predict
# --------------------------------------------------------------------------

def _input_volumes(args):
    """Yield (volume_id, path) for --input files and/or --data items."""
    seen = []
    for path in args.input or []:
        stem = Path(path).name
        for suffix in (".nii.gz", ".nii"):
            if stem.endswith(suffix):
                stem = stem[: -len(suffix)]
                break
        seen.append((stem, Path(path)))
    if args.data:
        data_dir = Path(args.data)
        meta = read_dataset(data_dir)
        wanted = None if args.split == "all" else (args.split,)
        for item in meta["items"]:
            if wanted is None or item["split"] in wanted:
                seen.append((item["case_id"], data_dir / item["volume"]))
    if not seen:
        raise ValueError("no inputs: pass --input files and/or --data with a dataset")
    return seen


def cmd_predict(args) -> int:
    torch.set_num_threads(args.workers)
    ensemble, metas = load_ensemble(args.checkpoints)
    inputs = _input_volumes(args)
    run_dir = _run_dir(args, "predict", metas["sagittal"].get("seed", 0))
    started, t0 = _now(), time.monotonic()
    (run_dir / "masks").mkdir(exist_ok=True)

    paths = []
    for volume_id, path in inputs:
        original = load_volume(path, assume_canonical=args.assume_canonical)
        canonical, _m, transform = to_canonical(original)
        canonical = normalize_minmax(canonical)
        mask, activations = segment_volume(
            ensemble, canonical, threshold=args.threshold,
            n_keep=args.keep, postprocess=not args.no_postprocess,
        )
        out_mask = LabelMask(transform.invert(mask.data))
        out_path = run_dir / "masks" / f"{volume_id}.nii.gz"
        save_mask(out_mask, out_path, like=original)
        paths.append(out_path)
        if args.save_activations:
            (run_dir / "activations").mkdir(exist_ok=True)
            for arm, act in activations.items():
                act_path = run_dir / "activations" / f"{volume_id}_{arm}.nii.gz"
                save_volume(
                    Volume(transform.invert(act.data), original.spacing,
                           original.axes, original.affine),
                    act_path,
                )
                paths.append(act_path)
        print(f"{volume_id}: {int(out_mask.data.sum())} foreground voxels")

    manifest = RunManifest(
        command="predict",
        config={
            "checkpoints": str(Path(args.checkpoints).resolve()),
            "threshold": args.threshold,
            "keep": args.keep,
            "postprocess": not args.no_postprocess,
            "assume_canonical": args.assume_canonical,
            "workers": args.workers,
        },
        inputs=[str(p.resolve()) for _id, p in inputs],
        outputs=_hash_outputs(run_dir, paths),
        seeds={},
        started=started,
        duration_s=round(time.monotonic() - t0, 3),
    )
    manifest.write(run_dir)
    print(f"masks written to {run_dir / 'masks'}")
    return 0


# --------------------------------------------------------------------------
# evaluate
# --------------------------------------------------------------------------

def _evaluate_against(pred_dir: Path, data_dir: Path, splits) -> list:
    """EvalRecords for every dataset case found in pred_dir; errors list
    missing prediction files by id."""
    cases = load_cases(data_dir, splits)
    missing, records = [], []
    for case in cases:
        pred_path = None
        for suffix in (".nii.gz", ".nii"):
            cand = pred_dir / f"{case.case_id}{suffix}"
            if cand.exists():
                pred_path = cand
                break
        if pred_path is None:
            missing.append(case.case_id)
            continue
        pred = load_mask(pred_path, canonical=True)
        if pred.shape != case.mask.shape:
            raise ValueError(
                f"{pred_path}: shape {pred.shape} does not match truth {case.mask.shape}")
        records.append(evaluate_volume(
            pred, case.mask, volume_id=case.case_id, cohort=case.cohort))
    if missing:
        raise FileNotFoundError(
            f"missing predictions in {pred_dir} for {len(missing)} volume(s): "
            + ", ".join(sorted(missing)))
    return records


def cmd_evaluate(args) -> int:
    run_dir = _run_dir(args, "evaluate", 0)
    started, t0 = _now(), time.monotonic()
    splits = None if args.split == "all" else (args.split,)
    paths = []

    if bool(args.pred) == bool(args.matrix_entry):
        raise ValueError("pass either --pred with --data, or one or more --matrix-entry")

    if args.pred:
        if not args.data:
            raise ValueError("--pred requires --data for the ground truth")
        records = _evaluate_against(Path(args.pred), Path(args.data), splits)
        summary = aggregate(records)
        write_records_csv(records, run_dir / "records.csv")
        write_summary(summary, run_dir / "summary.csv", run_dir / "summary.json")
        paths += [run_dir / "records.csv", run_dir / "summary.csv", run_dir / "summary.json"]
        print(format_summary(summary))
        config = {"pred": str(Path(args.pred).resolve()),
                  "data": str(Path(args.data).resolve()), "split": args.split}
        inputs = [config["pred"], config["data"]]
    else:
        matrix_rows = []
        inputs = []
        for entry in args.matrix_entry:
            parts = entry.split(":")
            if len(parts) != 4:
                raise ValueError(
                    f"--matrix-entry must be TRAINED:TESTED:PRED_DIR:DATA_DIR, got {entry!r}")
            trained, tested, pred_dir, data_dir = parts
            records = _evaluate_against(Path(pred_dir), Path(data_dir), splits)
            summary = aggregate(records, by_cohort=False)["all"]
            matrix_rows.append({
                "trained_on": trained,
                "tested_on": tested,
                "n": summary["dice_both"]["n"],
                "dice_both_mean": summary["dice_both"]["mean"],
                "dice_both_std": summary["dice_both"]["std"],
            })
            inputs += [str(Path(pred_dir).resolve()), str(Path(data_dir).resolve())]
        matrix_path = run_dir / "matrix.csv"
        with matrix_path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["trained_on", "tested_on", "n", "dice_both_mean",
                             "dice_both_std"])
            for row in matrix_rows:
                writer.writerow([row["trained_on"], row["tested_on"], row["n"],
                                 row["dice_both_mean"], row["dice_both_std"]])
        paths.append(matrix_path)
        for row in matrix_rows:
            print(f"trained on {row['trained_on']:>12}  tested on {row['tested_on']:>12}  "
                  f"dice {row['dice_both_mean']:.2f}±{row['dice_both_std']:.2f} "
                  f"(n={row['n']})")
        config = {"matrix_entries": list(args.matrix_entry), "split": args.split}

    manifest = RunManifest(
        command="evaluate",
        config=config,
        inputs=inputs,
        outputs=_hash_outputs(run_dir, paths),
        seeds={},
        started=started,
        duration_s=round(time.monotonic() - t0, 3),
    )
    manifest.write(run_dir)
    return 0


# --------------------------------------------------------------------------
# ablate, consensus-report
# --------------------------------------------------------------------------

def cmd_ablate(args) -> int:
    torch.set_num_threads(args.workers)
    base = TrainConfig.desk_preset(seed=args.seed) if args.scale == "desk" \
        else TrainConfig.full_preset(seed=args.seed)
    rows = grid_configs(base)
    if args.rows != "all":
        wanted = [int(r) for r in args.rows.split(",")]
        if any(not 1 <= r <= len(rows) for r in wanted):
            raise ValueError(f"--rows entries must be in 1..{len(rows)}")
        rows = [rows[r - 1] for r in wanted]
    split = load_split(args.data)
    run_dir = _run_dir(args, "ablate", args.seed)
    started, t0 = _now(), time.monotonic()

    table = ablation_grid(split, rows)

    grid_path = run_dir / "grid.csv"
    with grid_path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["row", "optimizer", "initial_lr", "loss",
                         "mean_dice", "std_dice", "n_test", "error"])
        for entry in table:
            writer.writerow([entry["row"], entry["optimizer"], entry["initial_lr"],
                             entry["loss"], entry.get("mean_dice", ""),
                             entry.get("std_dice", ""), entry.get("n_test", ""),
                             entry["error"] or ""])
    paths = [grid_path]
    if args.plots:
        plot_path = run_dir / "grid.png"
        _plot_grid(table, plot_path)
        paths.append(plot_path)

    manifest = RunManifest(
        command="ablate",
        config={"scale": args.scale, "rows": args.rows, "seed": args.seed,
                "workers": args.workers},
        inputs=[str(Path(args.data).resolve())],
        outputs=_hash_outputs(run_dir, paths),
        seeds={"master": args.seed},
        started=started,
        duration_s=round(time.monotonic() - t0, 3),
    )
    manifest.write(run_dir)
    for entry in table:
        label = f"{entry['optimizer']} lr {entry['initial_lr']:g} {entry['loss']}"
        if entry["error"]:
            print(f"{label}: FAILED ({entry['error']})")
        else:
            print(f"{label}: dice {entry['mean_dice']:.4f}±{entry['std_dice']:.4f} "
                  f"(n={entry['n_test']})")
    return 0


def cmd_consensus_report(args) -> int:
    torch.set_num_threads(args.workers)
    ensemble, _metas = load_ensemble(args.checkpoints)
    splits = None if args.split == "all" else (args.split,)
    cases = load_cases(args.data, splits)
    run_dir = _run_dir(args, "consensus-report", 0)
    started, t0 = _now(), time.monotonic()

    report = consensus_vs_single_report(ensemble, cases, threshold=args.threshold)
    csv_path = run_dir / "consensus_vs_single.csv"
    write_consensus_csv(report, csv_path)
    json_path = run_dir / "consensus_summary.json"
    json_path.write_text(json.dumps(report["summary"], indent=2, sort_keys=True))
    paths = [csv_path, json_path]
    if args.plots:
        plot_path = run_dir / "consensus_boxplot.png"
        _plot_consensus(report, plot_path)
        paths.append(plot_path)

    manifest = RunManifest(
        command="consensus-report",
        config={"checkpoints": str(Path(args.checkpoints).resolve()),
                "data": str(Path(args.data).resolve()),
                "split": args.split, "threshold": args.threshold,
                "workers": args.workers},
        inputs=[str(Path(args.checkpoints).resolve()), str(Path(args.data).resolve())],
        outputs=_hash_outputs(run_dir, paths),
        seeds={},
        started=started,
        duration_s=round(time.monotonic() - t0, 3),
    )
    manifest.write(run_dir)
    for arm in ("sagittal", "coronal", "axial", "consensus"):
        s = report["summary"][arm]
        print(f"{arm:>10}: dice {s['mean']:.4f}±{s['std']:.4f} (n={s['n']})")
    return 0


# --------------------------------------------------------------------------
# plots (lazy matplotlib so --help stays fast)
# --------------------------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _plot_report(report, path: Path) -> None:
    plt = _pyplot()
    path.parent.mkdir(parents=True, exist_ok=True)
    epochs = [e.epoch for e in report.epochs]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, [e.train_dice for e in report.epochs], label="train Dice")
    ax.plot(epochs, [e.val_dice for e in report.epochs], label="validation Dice")
    ax.axvline(report.best_epoch, color="gray", linestyle=":",
               label=f"best epoch {report.best_epoch}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("Dice")
    ax.set_title(f"{report.orientation} ({report.stop_reason})")
    ax.set_ylim(0, 1)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _plot_grid(table, path: Path) -> None:
    plt = _pyplot()
    path.parent.mkdir(parents=True, exist_ok=True)
    ok = [t for t in table if not t["error"]]
    labels = [f"{t['optimizer']}\n{t['initial_lr']:g} {t['loss']}" for t in ok]
    means = [t["mean_dice"] for t in ok]
    stds = [t["std_dice"] for t in ok]
    fig, ax = plt.subplots(figsize=(1.6 * max(len(ok), 1) + 2, 4))
    ax.bar(range(len(ok)), means, yerr=stds, capsize=4)
    ax.set_xticks(range(len(ok)), labels, fontsize=8)
    ax.set_ylabel("test Dice (consensus + filtering)")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _plot_consensus(report, path: Path) -> None:
    plt = _pyplot()
    path.parent.mkdir(parents=True, exist_ok=True)
    arms = ("sagittal", "coronal", "axial", "consensus")
    data = [[row[a] for row in report["rows"]] for a in arms]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.boxplot(data, tick_labels=arms)
    ax.set_ylabel("Dice")
    ax.set_title("single-orientation vs consensus")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hipposeg",
        description="Tri-planar CNN ensemble segmentation pipeline on synthetic phantoms.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom dataset")
    p.add_argument("--out", help="run directory (default: auto under $HIPPOSEG_RUN_ROOT)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=30, help="total volumes across cohorts")
    p.add_argument("--cohorts", default="control",
                   help=f"comma-separated subset of {','.join(COHORTS)}")
    p.add_argument("--shape", type=int, nargs=3, default=[64, 64, 64],
                   metavar=("X", "Y", "Z"))
    p.add_argument("--noise-sigma", type=float, default=0.025)
    p.add_argument("--fractions", type=float, nargs=3, default=[0.8, 0.1, 0.1],
                   metavar=("TRAIN", "VAL", "TEST"))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the three orientation networks")
    p.add_argument("--data", required=True, help="dataset directory from `synth`")
    p.add_argument("--out")
    p.add_argument("--preset", choices=PRESETS, default="desk")
    p.add_argument("--scale", choices=("full", "desk"), default=None,
                   help="override the preset's schedule scale")
    p.add_argument("--config", help="JSON config file overlaying the preset")
    p.add_argument("--optimizer", choices=("sgd", "adam", "radam"), default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--loss", choices=("dice", "gdl", "boundary"), default=None)
    p.add_argument("--max-epochs", type=int, default=None, dest="max_epochs")
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--epoch-sizes", type=int, nargs=3, default=None, dest="epoch_sizes",
                   metavar=("SAG", "COR", "AXI"))
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--base-width", type=int, default=None, dest="base_width")
    p.add_argument("--positive-fraction", type=float, default=None,
                   dest="positive_fraction")
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1,
                   help="torch intra-op threads; 1 is fully deterministic")
    p.add_argument("--plots", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--verbose", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment volumes with trained checkpoints")
    p.add_argument("--checkpoints", required=True,
                   help="directory holding sagittal.pt/coronal.pt/axial.pt")
    p.add_argument("--input", nargs="+", help="NIfTI volume files")
    p.add_argument("--data", help="dataset directory (picks volumes by --split)")
    p.add_argument("--split", choices=SPLITS + ("all",), default="test")
    p.add_argument("--out")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--keep", type=int, default=2,
                   help="largest components kept by post-processing")
    p.add_argument("--no-postprocess", action="store_true")
    p.add_argument("--save-activations", action="store_true")
    p.add_argument("--assume-canonical", action="store_true",
                   help="accept volumes lacking orientation metadata as canonical")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", help="directory of predicted masks (<case_id>.nii.gz)")
    p.add_argument("--data", help="dataset directory with ground truth")
    p.add_argument("--split", choices=SPLITS + ("all",), default="test")
    p.add_argument("--matrix-entry", action="append", dest="matrix_entry",
                   metavar="TRAINED:TESTED:PRED_DIR:DATA_DIR",
                   help="repeatable; builds the trained-on/tested-on matrix")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train + score the hyperparameter grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--scale", choices=("full", "desk"), default="desk")
    p.add_argument("--rows", default="all", help="e.g. 1,2,6 (1-based grid rows)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--plots", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("consensus-report",
                       help="compare single-orientation vs consensus Dice")
    p.add_argument("--checkpoints", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS + ("all",), default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--plots", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_consensus_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, NiftiError, OrientationError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
