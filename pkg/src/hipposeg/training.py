"""Training harness: per-orientation loops, LR step schedule, patience
early stopping, best-validation checkpointing, ensemble and grid drivers.

Epoch numbering is 1-based everywhere in configs and reports: with the
default step the learning rate is initial_lr for epochs 1..249 and
0.1 * initial_lr from epoch 250 on. The boundary-loss blend runs on the
same clock, alpha = 1 at epoch 1 and 0 at epoch max_epochs.
"""
from __future__ import annotations

import copy
import csv
import json
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .fusion import binarize, predict_orientation, segment_volume
from .losses import (
    BoundarySchedule,
    boundary_loss,
    dice_coefficient,
    dice_loss,
    generalized_dice_loss,
)
from .network import NetworkConfig, SegmentationNet, build_network, head_for_loss
from .sampling import AugmentConfig, SamplerConfig, epoch_stream
from .volumes import ORIENTATIONS

OPTIMIZERS = ("sgd", "adam", "radam")
LOSSES = ("dice", "gdl", "boundary")
# fixed constants not exposed through TrainConfig
SGD_MOMENTUM = 0.9
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class LrStep:
    """One-time learning-rate multiplication, 1-based epoch indexing."""

    factor: float = 0.1
    at_epoch: int = 250

    def lr_for_epoch(self, initial_lr: float, epoch: int) -> float:
        return initial_lr if epoch < self.at_epoch else initial_lr * self.factor


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "radam"
    initial_lr: float = 1e-3
    lr_step: LrStep = field(default_factory=LrStep)
    max_epochs: int = 1000
    patience: int = 200
    batch_size: int = 200
    loss: str = "boundary"
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    seed: int = 0
    # per-orientation epoch sizes used by train_ensemble; None keeps the
    # sampler defaults (5000/4000/3000)
    epoch_sizes: Optional[tuple[int, int, int]] = None

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.initial_lr <= 0:
            raise ValueError(f"initial_lr must be > 0, got {self.initial_lr}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 1 <= self.patience < self.max_epochs:
            raise ValueError(
                f"patience must satisfy 1 <= patience < max_epochs, "
                f"got patience={self.patience}, max_epochs={self.max_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss == "boundary" and self.max_epochs < 2:
            raise ValueError("boundary loss needs max_epochs >= 2 for its schedule")
        expected_head = head_for_loss(self.loss)
        if self.network.head != expected_head:
            raise ValueError(
                f"loss {self.loss!r} requires network head {expected_head!r}, "
                f"got {self.network.head!r}")
        f = self.network.downsample_factor
        if any(s % f for s in self.sampler.patch_size):
            raise ValueError(
                f"patch_size {self.sampler.patch_size} must be divisible by "
                f"2^depth = {f}")
        if self.epoch_sizes is not None:
            if len(self.epoch_sizes) != 3 or any(e < 1 for e in self.epoch_sizes):
                raise ValueError(
                    f"epoch_sizes must be 3 positive ints (sagittal, coronal, axial), "
                    f"got {self.epoch_sizes}")

    @classmethod
    def full_preset(cls, **overrides) -> "TrainConfig":
        """The reference configuration at full scale."""
        return cls(**overrides)

    @classmethod
    def desk_preset(cls, **overrides) -> "TrainConfig":
        """~10x scaled-down schedule that finishes in minutes on a CPU."""
        defaults = dict(
            max_epochs=60,
            patience=15,
            batch_size=32,
            epoch_sizes=(500, 400, 300),
        )
        defaults.update(overrides)
        return cls(**defaults)


# the reference hyperparameter grid: (optimizer, initial_lr, loss)
GRID_ROWS = (
    ("sgd", 5e-3, "dice"),
    ("adam", 1e-4, "dice"),
    ("adam", 1e-4, "gdl"),
    ("adam", 1e-4, "boundary"),
    ("radam", 1e-4, "boundary"),
    ("radam", 1e-3, "boundary"),
)


def grid_configs(base: TrainConfig) -> list[TrainConfig]:
    """The 6-row optimizer/lr/loss grid, inheriting scale from `base`."""
    rows = []
    for optimizer, lr, loss in GRID_ROWS:
        rows.append(replace(
            base,
            optimizer=optimizer,
            initial_lr=lr,
            loss=loss,
            network=replace(base.network, head=head_for_loss(loss)),
        ))
    return rows


@dataclass(frozen=True)
class EpochStats:
    epoch: int  # 1-based
    train_dice: float
    val_dice: float
    lr: float
    alpha: Optional[float] = None


@dataclass
class TrainReport:
    orientation: str
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    best_val_dice: float = float("-inf")
    stop_reason: str = ""

    def to_json(self) -> dict:
        return {
            "orientation": self.orientation,
            "epochs": [asdict(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "best_val_dice": self.best_val_dice,
            "stop_reason": self.stop_reason,
        }

    def save_json(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json(), indent=2))

    def save_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "train_dice", "val_dice", "lr", "alpha"])
            for e in self.epochs:
                writer.writerow([e.epoch, e.train_dice, e.val_dice, e.lr,
                                 "" if e.alpha is None else e.alpha])


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries the partial report."""

    def __init__(self, orientation: str, epoch: int, batch_index: int, report: TrainReport):
        super().__init__(
            f"{orientation} training diverged (non-finite loss) at epoch {epoch}, "
            f"batch {batch_index}")
        self.orientation = orientation
        self.epoch = epoch
        self.batch_index = batch_index
        self.report = report


def _make_optimizer(config: TrainConfig, net: SegmentationNet) -> torch.optim.Optimizer:
    params = net.parameters()
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.initial_lr, momentum=SGD_MOMENTUM)
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.initial_lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    return torch.optim.RAdam(params, lr=config.initial_lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def _batch_loss(net: SegmentationNet, config: TrainConfig, inputs, targets, epoch: int):
    """Forward one batch; returns (loss tensor, detached soft-Dice float)."""
    x = torch.from_numpy(np.ascontiguousarray(inputs))
    t = torch.from_numpy(np.ascontiguousarray(targets)).to(torch.float32)
    acts = net(x)
    if config.loss == "dice":
        p_fg = acts[:, 0]
        loss = dice_loss(p_fg, t)
    else:
        g = torch.stack([1.0 - t, t], dim=1)
        if config.loss == "gdl":
            loss = generalized_dice_loss(acts, g)
        else:
            schedule = BoundarySchedule(epoch - 1, config.max_epochs)
            loss = boundary_loss(acts, g, schedule)
        p_fg = acts[:, 1]
    train_dice = float(dice_coefficient(p_fg.detach(), t))
    return loss, train_dice


def validation_dice(
    net: SegmentationNet,
    cases: Sequence,
    orientation: str,
    threshold: float = 0.5,
    batch_size: int = 16,
) -> float:
    """Mean volume-level Dice of single-network thresholded predictions.

    No component filtering here: model selection stays per-network.
    """
    if not cases:
        raise ValueError("validation requires at least one volume")
    scores = []
    for case in cases:
        act = predict_orientation(net, case.volume, orientation, batch_size=batch_size)
        pred = binarize(act, threshold)
        scores.append(float(dice_coefficient(pred.data, case.mask.data)))
    return float(np.mean(scores))


def train_network(
    net: SegmentationNet,
    split,
    config: TrainConfig,
    progress=None,
) -> tuple[SegmentationNet, TrainReport]:
    """Train one orientation network; returns it loaded with the best-
    validation weights, not the last ones.

    `split` needs non-empty .train and .val case lists. `progress`, if
    given, is called with each EpochStats as it is produced.
    """
    if not getattr(split, "train", None) or not getattr(split, "val", None):
        raise ValueError("train_network requires non-empty train and val subsets")
    orientation = config.sampler.orientation
    report = TrainReport(orientation=orientation)
    optimizer = _make_optimizer(config, net)
    schedule_alpha = config.loss == "boundary"
    best_state = None
    epochs_since_best = 0

    for epoch in range(1, config.max_epochs + 1):
        lr = config.lr_step.lr_for_epoch(config.initial_lr, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        net.train()
        dice_sum, n_batches = 0.0, 0
        stream = epoch_stream(split.train, config.sampler,
                              batch_size=config.batch_size, epoch=epoch)
        for batch_index, batch in enumerate(stream):
            optimizer.zero_grad()
            loss, train_dice = _batch_loss(net, config, batch.inputs, batch.targets, epoch)
            if not torch.isfinite(loss):
                raise TrainingDiverged(orientation, epoch, batch_index, report)
            loss.backward()
            optimizer.step()
            dice_sum += train_dice
            n_batches += 1

        val = validation_dice(net, split.val, orientation)
        stats = EpochStats(
            epoch=epoch,
            train_dice=dice_sum / max(n_batches, 1),
            val_dice=val,
            lr=lr,
            alpha=BoundarySchedule(epoch - 1, config.max_epochs).alpha if schedule_alpha else None,
        )
        report.epochs.append(stats)
        if progress is not None:
            progress(stats)

        if val > report.best_val_dice:
            report.best_val_dice = val
            report.best_epoch = epoch
            best_state = copy.deepcopy(net.state_dict())
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= config.patience:
                report.stop_reason = "patience"
                break
    if not report.stop_reason:
        report.stop_reason = "max_epochs"

    net.load_state_dict(best_state)
    return net, report


@dataclass
class EnsembleResult:
    """Per-orientation training outcomes; partial on divergence."""

    nets: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return bool(self.errors)

    def ensemble(self):
        from .network import NetworkEnsemble

        if self.failed:
            raise RuntimeError(f"ensemble incomplete; failures: {sorted(self.errors)}")
        return NetworkEnsemble(**self.nets)


def orientation_seeds(master_seed: int, orientation: str) -> tuple[int, int]:
    """(network init seed, sampler seed), derived deterministically."""
    idx = ORIENTATIONS.index(orientation)
    state = np.random.SeedSequence([master_seed, idx]).generate_state(2)
    return int(state[0]), int(state[1])


def train_ensemble(split, config: TrainConfig, progress=None) -> EnsembleResult:
    """Train the three orientation networks with derived per-orientation
    seeds and epoch sizes; a divergence marks the run failed but keeps the
    other orientations' results."""
    result = EnsembleResult()
    for idx, orientation in enumerate(ORIENTATIONS):
        net_seed, sampler_seed = orientation_seeds(config.seed, orientation)
        sampler = replace(
            config.sampler,
            orientation=orientation,
            seed=sampler_seed,
            epoch_size=(config.epoch_sizes[idx] if config.epoch_sizes is not None
                        else config.sampler.epoch_size),
        )
        cfg = replace(config, sampler=sampler)
        net = build_network(config.network, seed=net_seed)
        epoch_progress = (lambda s, o=orientation: progress(o, s)) if progress else None
        try:
            net, report = train_network(net, split, cfg, progress=epoch_progress)
        except TrainingDiverged as err:
            result.errors[orientation] = str(err)
            result.reports[orientation] = err.report
            continue
        result.nets[orientation] = net
        result.reports[orientation] = report
    return result


def evaluate_test_dice(ensemble, cases: Sequence, batch_size: int = 16) -> list[float]:
    """Full-pipeline (consensus + filtering) Dice per test case."""
    scores = []
    for case in cases:
        mask, _acts = segment_volume(ensemble, case.volume, batch_size=batch_size)
        scores.append(float(dice_coefficient(mask.data, case.mask.data)))
    return scores


def ablation_grid(split, rows: Sequence[TrainConfig], progress=None) -> list[dict]:
    """Train an ensemble per config row and score it on the test subset
    with the full consensus + post-processing pipeline. Row failures are
    recorded and the grid continues."""
    rows = list(rows)
    if not rows:
        raise ValueError("ablation_grid requires at least one config row")
    if not getattr(split, "test", None):
        raise ValueError("ablation_grid requires a non-empty test subset")
    table = []
    for i, config in enumerate(rows):
        entry = {
            "row": i,
            "optimizer": config.optimizer,
            "initial_lr": config.initial_lr,
            "loss": config.loss,
        }
        try:
            result = train_ensemble(split, config, progress=progress)
            if result.failed:
                raise RuntimeError(
                    f"diverged orientations: {sorted(result.errors)}")
            scores = evaluate_test_dice(result.ensemble(), split.test)
            entry["mean_dice"] = float(np.mean(scores))
            entry["std_dice"] = float(np.std(scores, ddof=1)) if len(scores) > 1 else 0.0
            entry["n_test"] = len(scores)
            entry["error"] = None
        except (RuntimeError, ValueError) as err:
            entry["error"] = str(err)
        table.append(entry)
    return table


# --------------------------------------------------------------------------
# TrainConfig <-> JSON
# --------------------------------------------------------------------------

def config_to_json(config: TrainConfig) -> dict:
    return asdict(config)


def config_from_json(d: dict) -> TrainConfig:
    d = dict(d)
    if "lr_step" in d:
        d["lr_step"] = LrStep(**d["lr_step"])
    if "sampler" in d:
        s = dict(d["sampler"])
        if "augment" in s:
            a = dict(s["augment"])
            for key in ("intensity_shift_range", "rotation_degrees", "scale_range"):
                if key in a:
                    a[key] = tuple(a[key])
            s["augment"] = AugmentConfig(**a)
        if "patch_size" in s:
            s["patch_size"] = tuple(s["patch_size"])
        d["sampler"] = SamplerConfig(**s)
    if "network" in d:
        d["network"] = NetworkConfig(**d["network"])
    if d.get("epoch_sizes") is not None:
        d["epoch_sizes"] = tuple(d["epoch_sizes"])
    return TrainConfig(**d)
