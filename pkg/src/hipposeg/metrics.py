"""Volume-level evaluation: Dice (whole and per-side), precision/recall,
cohort aggregation, and the consensus-vs-single-network comparison."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .fusion import binarize, segment_volume
from .losses import dice_coefficient
from .postprocess import remove_false_positives
from .volumes import LabelMask

METRIC_FIELDS = ("dice_both", "dice_left", "dice_right", "precision", "recall")


@dataclass(frozen=True)
class EvalRecord:
    """Per-volume scores for one prediction against its ground truth."""

    volume_id: str
    cohort: Optional[str]
    dice_both: float
    dice_left: float
    dice_right: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    tn: int


def _safe_ratio(num: int, den: int) -> float:
    """TP ratios; an empty denominator means nothing to get wrong -> 1."""
    return num / den if den > 0 else 1.0


def evaluate_volume(
    pred: LabelMask,
    truth: LabelMask,
    midline_axis: int = 0,
    volume_id: str = "",
    cohort: Optional[str] = None,
) -> EvalRecord:
    """Score one predicted mask against ground truth.

    Left/right Dice split the grid at floor(extent/2) along the midline
    (canonical sagittal) axis; the lower-index half is "left" and an odd
    middle plane goes to the right half. Empty-vs-empty halves score 1;
    a half with empty truth but foreground prediction scores 0.
    """
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    p = pred.data.astype(bool)
    g = truth.data.astype(bool)
    tp = int((p & g).sum())
    fp = int((p & ~g).sum())
    fn = int((~p & g).sum())
    tn = int((~p & ~g).sum())

    mid = pred.shape[midline_axis] // 2
    left = [slice(None)] * 3
    right = [slice(None)] * 3
    left[midline_axis] = slice(0, mid)
    right[midline_axis] = slice(mid, None)
    return EvalRecord(
        volume_id=volume_id,
        cohort=cohort,
        dice_both=float(dice_coefficient(p.astype(np.uint8), g.astype(np.uint8))),
        dice_left=float(dice_coefficient(pred.data[tuple(left)], truth.data[tuple(left)])),
        dice_right=float(dice_coefficient(pred.data[tuple(right)], truth.data[tuple(right)])),
        precision=_safe_ratio(tp, tp + fp),
        recall=_safe_ratio(tp, tp + fn),
        tp=tp, fp=fp, fn=fn, tn=tn,
    )


def aggregate(records: Sequence[EvalRecord], by_cohort: bool = True) -> dict:
    """Mean and sample standard deviation (n-1; 0 when n == 1) per metric.

    Returns {group: {metric: {"mean": m, "std": s, "n": n}}}; the overall
    group "all" is always present.
    """
    if not records:
        raise ValueError("aggregate requires at least one record")
    groups: dict[str, list[EvalRecord]] = {"all": list(records)}
    if by_cohort:
        for r in records:
            groups.setdefault(r.cohort or "unknown", []).append(r)
    out = {}
    for name in sorted(groups):
        rows = groups[name]
        stats = {}
        for metric in METRIC_FIELDS:
            vals = np.array([getattr(r, metric) for r in rows], dtype=np.float64)
            std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
            stats[metric] = {"mean": float(vals.mean()), "std": std, "n": len(vals)}
        out[name] = stats
    return out


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.2f}±{std:.2f}"


def format_summary(summary: dict) -> str:
    """Render an aggregate() result as an aligned text table."""
    header = ["group", "n"] + list(METRIC_FIELDS)
    rows = [header]
    for group, stats in summary.items():
        n = stats[METRIC_FIELDS[0]]["n"]
        rows.append([group, str(n)] + [
            format_mean_std(stats[m]["mean"], stats[m]["std"]) for m in METRIC_FIELDS
        ])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def write_records_csv(records: Sequence[EvalRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(asdict(records[0])))
        writer.writeheader()
        for r in records:
            writer.writerow(asdict(r))


def write_summary(summary: dict, csv_path, json_path=None) -> None:
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["group", "n"] + [f"{m} (mean±std)" for m in METRIC_FIELDS])
        for group, stats in summary.items():
            writer.writerow([group, stats[METRIC_FIELDS[0]]["n"]] + [
                format_mean_std(stats[m]["mean"], stats[m]["std"]) for m in METRIC_FIELDS
            ])
    if json_path is not None:
        Path(json_path).write_text(json.dumps(summary, indent=2, sort_keys=True))


ARMS = ("sagittal", "coronal", "axial", "consensus")


def consensus_vs_single_report(
    ensemble,
    cases: Sequence,
    threshold: float = 0.5,
    n_keep: int = 2,
    batch_size: int = 16,
) -> dict:
    """Per-volume Dice for each orientation network alone vs their consensus.

    Single arms threshold one orientation's activations and apply the same
    component filtering as the full pipeline; the consensus arm averages all
    three first. Returns {"rows": [...], "summary": {arm: {mean, std, n}}}.
    """
    cases = list(cases)
    if not cases:
        raise ValueError("consensus_vs_single_report requires a non-empty test set")
    rows = []
    for case in cases:
        _mask, acts = segment_volume(
            ensemble, case.volume, threshold=threshold, n_keep=n_keep, batch_size=batch_size
        )
        row = {"volume_id": case.case_id, "cohort": case.cohort}
        for arm in ARMS:
            arm_mask = remove_false_positives(binarize(acts[arm], threshold), n_max=n_keep)
            row[arm] = float(dice_coefficient(arm_mask.data, case.mask.data))
        rows.append(row)
    summary = {}
    for arm in ARMS:
        vals = np.array([r[arm] for r in rows], dtype=np.float64)
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        summary[arm] = {"mean": float(vals.mean()), "std": std, "n": len(vals)}
    return {"rows": rows, "summary": summary}


def write_consensus_csv(report: dict, path) -> None:
    """Boxplot-ready long-format CSV: one row per (volume, arm)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["volume_id", "cohort", "arm", "dice"])
        for row in report["rows"]:
            for arm in ARMS:
                writer.writerow([row["volume_id"], row["cohort"], arm, row[arm]])
