"""Acceptance gates for the whole pipeline.

Each test checks one headline property at its stated tolerance and
reports one [PASS]/[FAIL] line through the `gate` fixture (echoed again
in the terminal summary). The first block is oracle-based and cheap; the
later tests train two desk-scale ensembles at 64^3 and take most of the
suite's runtime.
"""
import copy
import csv
import itertools
import time

import numpy as np
import pytest
import torch

import hipposeg.training as training_mod
from hipposeg.cli import _plot_consensus, main as cli_main, write_dataset
from hipposeg.fusion import segment_volume
from hipposeg.losses import (
    BoundarySchedule,
    boundary_loss,
    dice_coefficient,
    distance_maps_for,
    generalized_dice_loss,
    signed_distance_map,
    surface_term,
)
from hipposeg.metrics import consensus_vs_single_report, evaluate_volume, write_consensus_csv
from hipposeg.network import NetworkConfig, build_network, save_checkpoint
from hipposeg.phantoms import PhantomSpec, Split, generate, generate_cohorts, split_holdout
from hipposeg.postprocess import keep_largest, label_components
from hipposeg.sampling import AugmentConfig, SamplerConfig, border_voxels, epoch_stream
from hipposeg.training import TrainConfig, evaluate_test_dice, train_ensemble, train_network
from hipposeg.volumes import LabelMask

from test_losses import (
    _random_losses,
    brute_force_border_distance,
    brute_force_signed_distance,
    dice_by_counting,
    relative_grad_error,
)
from test_postprocess import assert_same_partition, flood_fill_labels

SHAPE = (64, 64, 64)
ORIENTS = ("sagittal", "coronal", "axial")


def _phantoms(cohort, count, seed):
    return generate(PhantomSpec(seed=seed, shape=SHAPE, cohort=cohort, count=count))


# --------------------------------------------------------------------------
# oracle-based criteria
# --------------------------------------------------------------------------

def test_loss_gradients_vs_finite_differences(gate):
    t0 = time.monotonic()
    worst = {"dice": 0.0, "gdl": 0.0, "boundary": 0.0}
    for seed in range(50):
        for name, f, p in _random_losses(seed):
            worst[name] = max(worst[name], relative_grad_error(f, p))
    elapsed = time.monotonic() - t0
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 60
    gate("loss gradients match finite differences (50 seeds, rel err < 1e-4)", ok,
         "worst " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
         + f"; {elapsed:.1f}s")


def test_dice_against_set_counting(gate):
    t0 = time.monotonic()
    rng = np.random.default_rng(2024)
    worst = 0.0
    pairs = [(np.zeros((8, 8, 8), dtype=np.uint8),) * 2]  # both empty -> 1
    for _ in range(1000):
        p = (rng.random((8, 8, 8)) < rng.uniform(0.1, 0.9)).astype(np.uint8)
        g = (rng.random((8, 8, 8)) < rng.uniform(0.1, 0.9)).astype(np.uint8)
        pairs.append((p, g))
    for p, g in pairs:
        got = float(dice_coefficient(p, g))
        worst = max(worst, abs(got - dice_by_counting(p, g)))
    elapsed = time.monotonic() - t0
    ok = worst < 1e-12 and elapsed < 60
    gate("dice equals 2|P&G|/(|P|+|G|) on 1000+ random mask pairs (< 1e-12)", ok,
         f"worst abs err {worst:.2e}; {elapsed:.1f}s")


def test_connected_components_vs_flood_fill(gate):
    t0 = time.monotonic()
    rng = np.random.default_rng(17)
    mismatches = 0
    for _ in range(100):
        vol = (rng.random((16, 16, 16)) < rng.uniform(0.15, 0.6)).astype(np.uint8)
        for connectivity in (6, 26):
            comps = label_components(LabelMask(vol), connectivity=connectivity)
            try:
                assert_same_partition(comps.labels, flood_fill_labels(vol, connectivity))
            except AssertionError:
                mismatches += 1

    # tie rule: equal sizes keep the lower (earlier) label
    blob = np.zeros((8, 4, 8), dtype=np.uint8)
    blob[0, 0, 0:5] = 1
    blob[2, 0, 0:3] = 1
    blob[4, 0, 0:3] = 1
    blob[6, 0, 0] = 1
    comps = label_components(LabelMask(blob), connectivity=26)
    sizes = {label: int(s) for label, s in enumerate(comps.sizes, start=1)}
    three = sorted(label for label, s in sizes.items() if s == 3)
    five = [label for label, s in sizes.items() if s == 5]
    tie_ok = (sorted(sizes.values()) == [1, 3, 3, 5]
              and comps.largest_labels(2) == [five[0], three[0]])
    kept = keep_largest(comps, n_max=2)
    keep_ok = int(kept.data.sum()) == 8 and set(np.unique(kept.data)) == {0, 1}

    elapsed = time.monotonic() - t0
    ok = mismatches == 0 and tie_ok and keep_ok and elapsed < 120
    gate("connected components match flood fill on 100 volumes; keep-2 tie rule", ok,
         f"{mismatches} mismatches over 200 labelings; tie rule "
         f"{'holds' if tie_ok and keep_ok else 'BROKEN'}; {elapsed:.1f}s")


def test_boundary_schedule_endpoints(gate):
    worst_first, worst_last, worst_mid = 0.0, 0.0, 0.0
    max_epochs = 31  # odd horizon puts alpha exactly at 0.5 mid-schedule
    for seed in range(5):
        rng = np.random.default_rng(seed)
        fg = (rng.random((8, 8)) > 0.5).astype(np.float64)
        g = torch.from_numpy(np.stack([1.0 - fg, fg]))
        p = torch.from_numpy(rng.uniform(0.05, 0.95, size=(2, 8, 8)))
        phi = distance_maps_for(g)

        gdl = float(generalized_dice_loss(p, g))
        surf = float(surface_term(p, phi))
        first = float(boundary_loss(p, g, BoundarySchedule(0, max_epochs)))
        last = float(boundary_loss(p, g, BoundarySchedule(max_epochs - 1, max_epochs)))
        mid = float(boundary_loss(p, g, BoundarySchedule(15, max_epochs)))
        worst_first = max(worst_first, abs(first - gdl))
        worst_last = max(worst_last, abs(last - surf))
        worst_mid = max(worst_mid, abs(mid - (0.5 * gdl + 0.5 * surf)))
    ok = worst_first < 1e-12 and worst_last < 1e-12 and worst_mid < 1e-12
    gate("boundary loss: first epoch = GDL, last = surface term, blend exact", ok,
         f"endpoint errs {worst_first:.1e}/{worst_last:.1e}, midpoint {worst_mid:.1e}")


def test_signed_distance_vs_all_pairs_search(gate):
    worst = 0.0
    flag_errors = 0

    def check(fg):
        nonlocal worst, flag_errors
        dm = signed_distance_map(fg)
        n = int(fg.sum())
        if 0 < n < fg.size:
            want = brute_force_signed_distance(fg)
            if dm.from_border:
                flag_errors += 1
        else:
            want = brute_force_border_distance(fg.shape)
            if n:
                want = -want
            if not dm.from_border:
                flag_errors += 1
        worst = max(worst, float(np.max(np.abs(dm.phi - want))))

    for bits in range(512):  # every 3x3 mask
        fg = np.array([(bits >> k) & 1 for k in range(9)], dtype=np.uint8).reshape(3, 3)
        check(fg)
    rng = np.random.default_rng(23)
    for _ in range(120):
        h, w = rng.integers(1, 17, size=2)
        check((rng.random((h, w)) < rng.uniform(0.1, 0.9)).astype(np.uint8))

    ok = worst == 0.0 and flag_errors == 0
    gate("signed distance maps equal all-pairs boundary search on grids <= 16^2", ok,
         f"worst abs err {worst:.1e} over 632 grids, {flag_errors} flag errors")


def test_sampler_positive_statistics(gate, small_cases):
    config = SamplerConfig(
        patch_size=(32, 32), positive_fraction=0.8, orientation="sagittal",
        epoch_size=10_000, augment=AugmentConfig(enabled=False), seed=99,
    )
    borders = {
        case.case_id: set(map(tuple, border_voxels(case.mask, "sagittal")))
        for case in small_cases
    }
    drawn = []
    for batch in epoch_stream(small_cases, config, batch_size=100, epoch=1):
        drawn.extend(batch.provenance)
    assert len(drawn) == 10_000
    positives = [p for p in drawn if p.positive]
    fraction = len(positives) / len(drawn)
    off_border = sum(1 for p in positives if p.center not in borders[p.volume_id])
    ok = 0.78 <= fraction <= 0.82 and off_border == 0
    gate("sampler: positive fraction in [0.78, 0.82] over 10^4 draws, "
         "all positives border-centered", ok,
         f"fraction {fraction:.4f}, {off_border} positives off the border")


def test_trainer_semantics(gate, small_split, monkeypatch):
    checks = {}

    def fast_config(**overrides):
        defaults = dict(
            optimizer="adam", initial_lr=1e-3, batch_size=4, loss="dice",
            sampler=SamplerConfig(patch_size=(32, 32), epoch_size=4,
                                  augment=AugmentConfig(enabled=False)),
            network=NetworkConfig(depth=2, base_width=4, head="sigmoid-1ch"),
            seed=1,
        )
        defaults.update(overrides)
        return TrainConfig(**defaults)

    # scripted validation: best at epoch 2, then 3 stale epochs -> patience
    vals = iter([0.5, 0.9, 0.4, 0.4, 0.4])
    states = []

    def scripted(net, cases, orientation, threshold=0.5, batch_size=16):
        states.append(copy.deepcopy(net.state_dict()))
        return next(vals)

    monkeypatch.setattr(training_mod, "validation_dice", scripted)
    cfg = fast_config(max_epochs=10, patience=3)
    net = build_network(cfg.network, seed=0)
    net, report = train_network(net, small_split, cfg)
    final = net.state_dict()
    checks["patience stop after epoch 5"] = (
        report.stop_reason == "patience" and len(report.epochs) == 5)
    checks["best epoch 2 selected"] = (
        report.best_epoch == 2 and report.best_val_dice == 0.9)
    checks["best weights restored"] = (
        all(torch.equal(final[k], states[1][k]) for k in final)
        and any(not torch.equal(final[k], states[4][k]) for k in final))

    # default LR schedule drops x0.1 at epoch 250 (1-based)
    counter = itertools.count(1)
    monkeypatch.setattr(training_mod, "validation_dice",
                        lambda *a, **k: next(counter) / 1000.0)
    cfg = fast_config(max_epochs=251, patience=250)
    net = build_network(cfg.network, seed=0)
    _, report = train_network(net, small_split, cfg)
    lrs = [e.lr for e in report.epochs]
    checks["251 epochs to max"] = (
        len(lrs) == 251 and report.stop_reason == "max_epochs")
    checks["lr 1e-3 through epoch 249"] = all(lr == 1e-3 for lr in lrs[:249])
    checks["lr x0.1 from epoch 250"] = all(lr == 1e-3 * 0.1 for lr in lrs[249:])
    checks["improving run keeps last epoch as best"] = report.best_epoch == 251

    ok = all(checks.values())
    detail = ("all hand-traced expectations hold" if ok else
              "FAILED: " + "; ".join(k for k, v in checks.items() if not v))
    gate("trainer: patience stop, LR step at 250 (x0.1), best-checkpoint restore",
         ok, detail)


# --------------------------------------------------------------------------
# desk-scale experiments (two trained ensembles; several minutes each)
# --------------------------------------------------------------------------

@pytest.fixture(scope="session")
def control_run():
    """Desk-preset ensemble trained on 30 control phantoms at 64^3, timed."""
    cases = _phantoms("control", 30, seed=101)
    split = split_holdout(cases, (0.8, 0.1, 0.1), seed=101)
    config = TrainConfig.desk_preset(seed=11)
    t0 = time.monotonic()
    result = train_ensemble(split, config)
    duration = time.monotonic() - t0
    assert not result.failed, result.errors
    return {"result": result, "ensemble": result.ensemble(), "split": split,
            "train_s": duration}


@pytest.fixture(scope="session")
def mixed_run():
    """Same preset trained on a 12/12/12 control/resected-left/right mix."""
    cases = generate_cohorts(202, {
        "control": 12, "resected-left": 12, "resected-right": 12})
    split = split_holdout(cases, (0.8, 0.1, 0.1), seed=202)
    result = train_ensemble(split, TrainConfig.desk_preset(seed=12))
    assert not result.failed, result.errors
    return {"result": result, "ensemble": result.ensemble(), "split": split}


def test_desk_scale_end_to_end(gate, control_run):
    t0 = time.monotonic()
    scores = evaluate_test_dice(control_run["ensemble"], control_run["split"].test)
    total = control_run["train_s"] + (time.monotonic() - t0)
    mean_dice = float(np.mean(scores))
    ok = mean_dice >= 0.85 and total < 1200
    gate("desk preset: mean held-out Dice >= 0.85 within 20 min", ok,
         f"mean dice {mean_dice:.4f} over {len(scores)} test phantoms, "
         f"{total:.0f}s total")


def test_consensus_beats_single_orientations(gate, control_run, tmp_path_factory):
    cases = _phantoms("control", 20, seed=303)
    report = consensus_vs_single_report(control_run["ensemble"], cases)
    singles = [report["summary"][o]["mean"] for o in ORIENTS]
    cons = report["summary"]["consensus"]["mean"]

    out = tmp_path_factory.mktemp("consensus")
    write_consensus_csv(report, out / "consensus_vs_single.csv")
    _plot_consensus(report, out / "consensus_boxplot.png")
    emitted = ((out / "consensus_vs_single.csv").stat().st_size > 0
               and (out / "consensus_boxplot.png").stat().st_size > 0)

    ok = cons >= float(np.mean(singles)) - 0.02 and emitted
    gate("consensus Dice >= mean single-orientation Dice - 0.02 (20 phantoms)", ok,
         f"consensus {cons:.4f} vs singles "
         + "/".join(f"{s:.4f}" for s in singles)
         + ("; csv+plot emitted" if emitted else "; ARTIFACTS MISSING"))


def test_resection_failure_mode(gate, control_run):
    cases = _phantoms("resected-left", 20, seed=404)
    records = []
    for case in cases:
        mask, _acts = segment_volume(control_run["ensemble"], case.volume)
        records.append(evaluate_volume(mask, case.mask,
                                       volume_id=case.case_id, cohort=case.cohort))
    zero_left = sum(1 for r in records if r.dice_left == 0.0)
    mean_right = float(np.mean([r.dice_right for r in records]))
    ok = zero_left >= 0.30 * len(records) and mean_right >= 0.8
    gate("control-trained ensemble: dice_left == 0 on >= 30% of resected-left, "
         "intact side >= 0.8", ok,
         f"dice_left == 0 on {zero_left}/{len(records)}, "
         f"mean intact-side dice {mean_right:.4f}")


@pytest.fixture(scope="session")
def matrix_assets(tmp_path_factory, control_run, mixed_run):
    """Checkpoints for both ensembles plus on-disk test datasets."""
    root = tmp_path_factory.mktemp("matrix")
    checkpoints = {}
    for name, run in (("control", control_run), ("mixed", mixed_run)):
        ckpt_dir = root / f"ckpt-{name}"
        for orientation in ORIENTS:
            save_checkpoint(run["result"].nets[orientation],
                            ckpt_dir / f"{orientation}.pt",
                            meta={"orientation": orientation, "trained_on": name})
        checkpoints[name] = ckpt_dir

    datasets = {}
    test_sets = {
        "control": _phantoms("control", 10, seed=505),
        "mixed": generate_cohorts(606, {
            "control": 4, "resected-left": 4, "resected-right": 4}),
    }
    for name, cases in test_sets.items():
        data_dir = root / f"data-{name}"
        data_dir.mkdir()
        write_dataset(data_dir, cases, Split(test=list(cases)),
                      meta={"seed": name, "shape": list(SHAPE)})
        datasets[name] = data_dir
    return {"checkpoints": checkpoints, "datasets": datasets, "root": root}


def test_cross_domain_matrix(gate, matrix_assets):
    root = matrix_assets["root"]
    entries = []
    for trained in ("control", "mixed"):
        for tested in ("control", "mixed"):
            pred_dir = root / f"pred-{trained}-{tested}"
            rc = cli_main([
                "predict",
                "--checkpoints", str(matrix_assets["checkpoints"][trained]),
                "--data", str(matrix_assets["datasets"][tested]),
                "--split", "test", "--out", str(pred_dir),
            ])
            assert rc == 0
            entries.append(f"{trained}:{tested}:{pred_dir / 'masks'}:"
                           f"{matrix_assets['datasets'][tested]}")

    ev_dir = root / "evaluate"
    argv = ["evaluate", "--split", "test", "--out", str(ev_dir)]
    for entry in entries:
        argv += ["--matrix-entry", entry]
    assert cli_main(argv) == 0

    with (ev_dir / "matrix.csv").open() as f:
        rows = {(r["trained_on"], r["tested_on"]): float(r["dice_both_mean"])
                for r in csv.DictReader(f)}
    cross = rows[("control", "mixed")]
    ok = (len(rows) == 4
          and rows[("mixed", "mixed")] > cross
          and rows[("mixed", "control")] > cross)
    gate("cross-domain matrix: mixed-trained rows beat control->mixed", ok,
         "dice " + ", ".join(f"{a}->{b} {v:.3f}" for (a, b), v in sorted(rows.items())))
