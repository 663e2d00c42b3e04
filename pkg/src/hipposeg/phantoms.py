"""Deterministic synthetic brain phantoms with hippocampus-like structures.

Each phantom is a bright ellipsoidal "brain" on dark background holding two
curved capsule structures placed symmetrically about the midsagittal plane
(axis 0). Cohorts: control, atrophy (smaller capsules), and resected-left/
right where one capsule is removed and its bed filled with tissue-like
noise, a darker cavity rim, and a couple of small bright blobs mimicking
leftover hippocampus-like texture. Small bright decoys elsewhere in the
brain keep the foreground class from being a pure intensity threshold.

All geometry is relative to the volume shape; all randomness flows from one
seeded generator per volume (spawned from the spec seed), so identical
specs give bit-identical output.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import ndimage

from .volumes import LabelMask, Volume, normalize_minmax

COHORTS = ("control", "atrophy", "resected-left", "resected-right")

# nominal intensities before noise and min-max normalization
BACKGROUND = 0.04
TISSUE = 0.52
VENTRICLE = 0.30
HIPPOCAMPUS = 0.74
DECOY = 0.70
CAVITY_RIM = 0.36


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    shape: tuple[int, int, int] = (64, 64, 64)
    cohort: str = "control"
    noise_sigma: float = 0.025
    count: int = 1

    def __post_init__(self):
        if self.cohort not in COHORTS:
            raise ValueError(f"cohort must be one of {COHORTS}, got {self.cohort!r}")
        if len(self.shape) != 3 or any(s < 32 for s in self.shape):
            raise ValueError(f"shape too small: each extent must be >= 32, got {self.shape}")
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass
class PhantomCase:
    """One generated volume with its ground-truth mask and cohort tag."""

    volume: Volume
    mask: LabelMask
    cohort: str
    case_id: str

    def __iter__(self) -> Iterator:
        # allow (volume, mask, cohort) unpacking
        return iter((self.volume, self.mask, self.cohort))


def _ellipsoid(shape, center, semi) -> np.ndarray:
    x = np.arange(shape[0], dtype=np.float64)[:, None, None]
    y = np.arange(shape[1], dtype=np.float64)[None, :, None]
    z = np.arange(shape[2], dtype=np.float64)[None, None, :]
    return (
        ((x - center[0]) / semi[0]) ** 2
        + ((y - center[1]) / semi[1]) ** 2
        + ((z - center[2]) / semi[2]) ** 2
    ) <= 1.0


def _fill_spheres(mask: np.ndarray, points: np.ndarray, radii: np.ndarray) -> None:
    """Union of spheres into a boolean volume, one local box per point."""
    shape = mask.shape
    for (px, py, pz), rho in zip(points, radii):
        lo = [max(0, int(np.floor(c - rho))) for c in (px, py, pz)]
        hi = [min(s, int(np.ceil(c + rho)) + 1) for c, s in zip((px, py, pz), shape)]
        if any(l >= h for l, h in zip(lo, hi)):
            continue
        x = np.arange(lo[0], hi[0], dtype=np.float64)[:, None, None]
        y = np.arange(lo[1], hi[1], dtype=np.float64)[None, :, None]
        z = np.arange(lo[2], hi[2], dtype=np.float64)[None, None, :]
        d2 = (x - px) ** 2 + (y - py) ** 2 + (z - pz) ** 2
        box = mask[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
        box |= d2 <= rho * rho


def _capsule_arc(rng, shape, brain_center, side_sign: int, cohort: str):
    """Sample the centerline points and radii of one curved capsule."""
    nx, ny, nz = shape
    sx = nx / 64.0
    arc_scale, rho_scale = (0.9, 0.8) if cohort == "atrophy" else (1.0, 1.0)

    hx = brain_center[0] + side_sign * 0.20 * nx + rng.uniform(-0.8, 0.8) * sx
    hy = brain_center[1] + rng.uniform(-0.02, 0.02) * ny
    hz = brain_center[2] - 0.04 * nz + rng.uniform(-0.8, 0.8) * sx
    r_arc = 0.14 * ny * arc_scale * (1.0 + rng.uniform(-0.08, 0.08))
    tilt = rng.uniform(-1.5, 1.5) * sx
    rho0 = 2.5 * sx * rho_scale * (1.0 + rng.uniform(-0.06, 0.06))

    theta = np.linspace(-np.pi / 3.0, np.pi / 3.0, 33)
    t = np.linspace(0.0, 1.0, theta.size)
    points = np.stack(
        [
            hx + tilt * (2.0 * t - 1.0),
            hy + r_arc * np.sin(theta),
            hz + r_arc * (np.cos(theta) - 0.85),
        ],
        axis=1,
    )
    radii = rho0 * (1.15 - 0.45 * t)  # thicker "head", tapering tail
    return points, radii


def _generate_one(spec: PhantomSpec, rng: np.random.Generator, case_id: str) -> PhantomCase:
    shape = spec.shape
    nx, ny, nz = shape
    center = np.array(
        [nx / 2.0, ny / 2.0, nz / 2.0]
    ) + rng.uniform(-1.0, 1.0, size=3) * (nx / 64.0)
    semi = np.array([0.40 * nx, 0.44 * ny, 0.38 * nz]) * (1.0 + rng.uniform(-0.04, 0.04, size=3))
    brain = _ellipsoid(shape, center, semi)

    intensity = np.full(shape, BACKGROUND, dtype=np.float64)
    # slowly varying tissue shading from two random cosine fields
    x = np.arange(nx)[:, None, None] / nx
    y = np.arange(ny)[None, :, None] / ny
    z = np.arange(nz)[None, None, :] / nz
    shading = np.zeros(shape)
    for _ in range(2):
        freq = rng.uniform(0.5, 1.5, size=3)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        shading += 0.03 * np.cos(2.0 * np.pi * (freq[0] * x + freq[1] * y + freq[2] * z) + phase)
    intensity[brain] = TISSUE + shading[brain]

    ventricle = _ellipsoid(
        shape,
        (center[0], center[1] + 0.06 * ny, center[2] + 0.16 * nz),
        (0.09 * nx, 0.14 * ny, 0.10 * nz),
    )
    intensity[ventricle & brain] = VENTRICLE

    structures = {}
    for side, sign in (("left", -1), ("right", 1)):
        points, radii = _capsule_arc(rng, shape, center, sign, spec.cohort)
        side_mask = np.zeros(shape, dtype=bool)
        _fill_spheres(side_mask, points, radii)
        structures[side] = (side_mask, points, radii)

    resected = {"resected-left": "left", "resected-right": "right"}.get(spec.cohort)
    mask = np.zeros(shape, dtype=bool)
    for side, (side_mask, points, radii) in structures.items():
        if side == resected:
            continue
        mask |= side_mask
        intensity[side_mask] = HIPPOCAMPUS

    if resected is not None:
        side_mask, points, radii = structures[resected]
        cavity = ndimage.binary_dilation(side_mask, iterations=2)
        rim = ndimage.binary_dilation(cavity) & ~cavity
        # fill looks like ordinary tissue, only rougher
        intensity[cavity] = TISSUE + shading[cavity]
        intensity[cavity] += rng.normal(0.0, 1.5 * spec.noise_sigma, size=int(cavity.sum()))
        intensity[rim & brain] = CAVITY_RIM
        # leftover hippocampus-like texture inside the cavity
        bait = np.zeros(shape, dtype=bool)
        picks = rng.choice(np.arange(8, points.shape[0] - 8), size=2, replace=False)
        bait_radii = rng.uniform(1.5, 2.0, size=2) * (nx / 64.0)
        _fill_spheres(bait, points[picks], bait_radii)
        intensity[bait] = HIPPOCAMPUS

    for _ in range(2):
        dx = rng.uniform(0.12, 0.20) * nx * rng.choice([-1.0, 1.0])
        dy = rng.uniform(-0.12, 0.12) * ny
        dz = rng.uniform(0.14, 0.20) * nz
        decoy = np.zeros(shape, dtype=bool)
        _fill_spheres(
            decoy,
            np.array([[center[0] + dx, center[1] + dy, center[2] + dz]]),
            np.array([rng.uniform(1.6, 2.2) * (nx / 64.0)]),
        )
        intensity[decoy & brain] = DECOY

    intensity += rng.normal(0.0, spec.noise_sigma, size=shape)
    np.clip(intensity, 0.0, None, out=intensity)
    volume = normalize_minmax(Volume(intensity.astype(np.float32)))
    return PhantomCase(volume, LabelMask(mask.astype(np.uint8)), spec.cohort, case_id)


def generate(spec: PhantomSpec) -> list[PhantomCase]:
    """Generate `spec.count` phantoms; per-volume RNGs are spawned from the
    spec seed, so case i is identical regardless of count."""
    children = np.random.SeedSequence(spec.seed).spawn(spec.count)
    return [
        _generate_one(spec, np.random.default_rng(children[i]),
                      f"{spec.cohort}-s{spec.seed}-{i:03d}")
        for i in range(spec.count)
    ]


def generate_cohorts(
    seed: int,
    counts: dict[str, int],
    shape: tuple[int, int, int] = (64, 64, 64),
    noise_sigma: float = 0.025,
) -> list[PhantomCase]:
    """Generate several cohorts with per-cohort seeds derived from one seed."""
    unknown = set(counts) - set(COHORTS)
    if unknown:
        raise ValueError(f"unknown cohorts {sorted(unknown)}; choose from {COHORTS}")
    cases = []
    for cohort in COHORTS:
        n = int(counts.get(cohort, 0))
        if n == 0:
            continue
        cohort_seed = int(
            np.random.SeedSequence([seed, COHORTS.index(cohort)]).generate_state(1)[0]
        )
        cases.extend(generate(PhantomSpec(
            seed=cohort_seed, shape=shape, cohort=cohort,
            noise_sigma=noise_sigma, count=n,
        )))
    return cases


@dataclass
class Split:
    """A train/val/test partition of a dataset."""

    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def subsets(self) -> dict[str, list]:
        return {"train": self.train, "val": self.val, "test": self.test}


def _largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    quotas = [n * f for f in fractions]
    counts = [int(np.floor(q)) for q in quotas]
    leftover = n - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def split_holdout(
    cases: Sequence,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    cohort_of=None,
) -> Split:
    """Deterministic cohort-stratified train/val/test partition.

    Within each cohort, shuffled cases are allocated by largest-remainder
    rounding of the fractions (ties favor train, then val).
    """
    cases = list(cases)
    if not cases:
        raise ValueError("split_holdout requires a non-empty dataset")
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError(f"fractions must be 3 non-negative values, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions} (sum {sum(fractions)})")
    if cohort_of is None:
        cohort_of = lambda case: case.cohort

    by_cohort: dict[str, list] = {}
    for case in cases:
        by_cohort.setdefault(cohort_of(case), []).append(case)

    rng = np.random.default_rng(seed)
    split = Split()
    buckets = split.subsets()
    for cohort in sorted(by_cohort):
        group = by_cohort[cohort]
        perm = rng.permutation(len(group))
        counts = _largest_remainder(len(group), fractions)
        start = 0
        for name, k in zip(("train", "val", "test"), counts):
            buckets[name].extend(group[perm[j]] for j in range(start, start + k))
            start += k
    for name, subset in buckets.items():
        if not subset:
            raise ValueError(
                f"split with fractions {fractions} would leave the {name} subset empty"
            )
    return split
