"""2D encoder-decoder segmentation network with residual conv blocks.

One network per slice orientation; each takes a 3-channel input (the slice
plus its two neighbors) and emits per-pixel foreground activations. The
channel ladder follows a VGG-11-like progression, doubling per level and
capping at 8x the base width.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .volumes import center_crop_pad

ORIENTATIONS = ("sagittal", "coronal", "axial")
HEADS = ("sigmoid-1ch", "softmax-2ch")
# Batch-norm constants, fixed for reproducibility across torch versions.
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class NetworkConfig:
    depth: int = 4
    base_width: int = 8
    head: str = "softmax-2ch"
    input_channels: int = 3

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 1:
            raise ValueError(f"base_width must be >= 1, got {self.base_width}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")

    @property
    def out_channels(self) -> int:
        return 1 if self.head == "sigmoid-1ch" else 2

    @property
    def downsample_factor(self) -> int:
        return 2 ** self.depth

    def channels(self) -> list[int]:
        """Width at encoder levels 0..depth (the last entry is the bottleneck)."""
        return [self.base_width * min(2 ** i, 8) for i in range(self.depth + 1)]


def head_for_loss(loss: str) -> str:
    """Losses over one-hot targets need the two-channel softmax head."""
    return "sigmoid-1ch" if loss == "dice" else "softmax-2ch"


class ResidualDoubleConv(nn.Module):
    """conv3x3-BN-ReLU-conv3x3-BN plus a 1x1 projection shortcut."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1, bias=False)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class SegmentationNet(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        widths = config.channels()
        self.encoders = nn.ModuleList()
        ch = config.input_channels
        for w in widths[:-1]:
            self.encoders.append(ResidualDoubleConv(ch, w))
            ch = w
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = ResidualDoubleConv(ch, widths[-1])
        self.upsamples = nn.ModuleList()
        self.decoders = nn.ModuleList()
        ch = widths[-1]
        for w in reversed(widths[:-1]):
            self.upsamples.append(nn.ConvTranspose2d(ch, w, 2, stride=2))
            self.decoders.append(ResidualDoubleConv(2 * w, w))
            ch = w
        self.head = nn.Conv2d(ch, config.out_channels, 1)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Map (B, C, H, W) inputs to per-pixel activations in [0, 1]."""
        if x.ndim != 4:
            raise ValueError(f"expected a 4D batch, got shape {tuple(x.shape)}")
        if x.shape[1] != self.config.input_channels:
            raise ValueError(
                f"expected {self.config.input_channels} input channels, got {x.shape[1]}")
        f = self.config.downsample_factor
        if x.shape[2] % f or x.shape[3] % f:
            raise ValueError(
                f"spatial dims {tuple(x.shape[2:])} must be divisible by {f} "
                f"(depth {self.config.depth})")
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.upsamples, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([skip, x], dim=1))
        logits = self.head(x)
        if self.config.head == "sigmoid-1ch":
            return torch.sigmoid(logits)
        return torch.softmax(logits, dim=1)

    def foreground(self, activations: torch.Tensor) -> torch.Tensor:
        """Foreground probability map from the network output."""
        if self.config.head == "sigmoid-1ch":
            return activations[:, 0]
        return activations[:, 1]


def build_network(config: NetworkConfig, seed: int = 0) -> SegmentationNet:
    """Construct a network with weights drawn from a seeded generator.

    The global torch RNG state is left untouched.
    """
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return SegmentationNet(config)


def inference_shape(shape: tuple[int, int], factor: int) -> tuple[int, int]:
    """Smallest shape >= `shape` with both dims divisible by `factor`."""
    return tuple(-(-s // factor) * factor for s in shape)


def predict_slice(net: SegmentationNet, triplet: np.ndarray,
                  crop_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Foreground activation for one slice triplet, at the original size.

    The triplet is padded (never cropped, unless an explicit smaller
    crop_shape is forced) to a network-compatible shape, run in eval mode,
    and the activation is placed back on the original grid; any region
    outside a forced crop reads 0.
    """
    triplet = np.asarray(triplet, dtype=np.float32)
    if triplet.ndim != 3 or triplet.shape[0] != net.config.input_channels:
        raise ValueError(f"expected ({net.config.input_channels}, H, W) triplet, "
                         f"got shape {triplet.shape}")
    if crop_shape is None:
        crop_shape = inference_shape(triplet.shape[1:], net.config.downsample_factor)
    padded, placement = center_crop_pad(triplet, crop_shape)
    batch = _predict_batch(net, padded[None])
    return placement.invert(batch[0]).astype(np.float32)


def _predict_batch(net: SegmentationNet, inputs: np.ndarray) -> np.ndarray:
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            acts = net(torch.from_numpy(np.ascontiguousarray(inputs, dtype=np.float32)))
            fg = net.foreground(acts)
    finally:
        net.train(was_training)
    return fg.numpy().astype(np.float32)


@dataclass
class NetworkEnsemble:
    """Three orientation-specialized networks sharing one architecture."""

    sagittal: SegmentationNet
    coronal: SegmentationNet
    axial: SegmentationNet

    def __post_init__(self):
        configs = {net.config for net in self.nets().values()}
        if len(configs) != 1:
            raise ValueError("all ensemble members must share one NetworkConfig")

    @property
    def config(self) -> NetworkConfig:
        return self.sagittal.config

    def nets(self) -> dict[str, SegmentationNet]:
        return {"sagittal": self.sagittal, "coronal": self.coronal, "axial": self.axial}

    def net_for(self, orientation: str) -> SegmentationNet:
        try:
            return self.nets()[orientation]
        except KeyError:
            raise ValueError(f"unknown orientation {orientation!r}") from None


CHECKPOINT_VERSION = 1


def save_checkpoint(net: SegmentationNet, path, meta: dict | None = None) -> None:
    """Serialize weights plus the config needed to rebuild the module."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(net.config),
        "state_dict": net.state_dict(),
        "meta": dict(meta or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[SegmentationNet, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r} in {path}")
    net = SegmentationNet(NetworkConfig(**payload["config"]))
    net.load_state_dict(payload["state_dict"])
    net.eval()
    return net, payload["meta"]


def load_ensemble(directory) -> tuple[NetworkEnsemble, dict[str, dict]]:
    """Load {sagittal,coronal,axial}.pt checkpoints from a directory."""
    directory = Path(directory)
    nets, metas = {}, {}
    for orientation in ORIENTATIONS:
        path = directory / f"{orientation}.pt"
        if not path.exists():
            raise FileNotFoundError(f"missing checkpoint {path}")
        nets[orientation], metas[orientation] = load_checkpoint(path)
    return NetworkEnsemble(**nets), metas
