"""Loss functions against independent oracles.

- dice_coefficient vs plain set counting on binary arrays
- signed_distance_map vs an all-pairs brute-force distance search
- analytic gradients (autograd) vs central finite differences
- the boundary-loss schedule's endpoint identities
"""
import numpy as np
import pytest
import torch

from hipposeg.losses import (
    FOREGROUND_CHANNEL,
    BoundarySchedule,
    boundary_loss,
    boundary_pixels,
    dice_coefficient,
    dice_loss,
    distance_maps_for,
    generalized_dice_loss,
    signed_distance_map,
    surface_term,
)

assert FOREGROUND_CHANNEL == 1


def one_hot(fg: np.ndarray) -> np.ndarray:
    return np.stack([1.0 - fg, fg]).astype(np.float64)


# ---------------------------------------------------------------------------
# Dice
# ---------------------------------------------------------------------------

def dice_by_counting(p: np.ndarray, g: np.ndarray) -> float:
    """Set-based reference: 2|P & G| / (|P| + |G|), 1 when both empty."""
    p = p.astype(bool)
    g = g.astype(bool)
    total = p.sum() + g.sum()
    if total == 0:
        return 1.0
    return 2.0 * np.logical_and(p, g).sum() / total


def test_dice_matches_counting_oracle():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(300):
        density = rng.random()
        p = (rng.random((8, 8, 8)) < density).astype(np.uint8)
        g = (rng.random((8, 8, 8)) < rng.random()).astype(np.uint8)
        worst = max(worst, abs(dice_coefficient(p, g) - dice_by_counting(p, g)))
    assert worst < 1e-12


def test_dice_edge_cases():
    zeros = np.zeros((4, 4), dtype=np.uint8)
    ones = np.ones((4, 4), dtype=np.uint8)
    assert dice_coefficient(zeros, zeros) == 1.0
    assert dice_coefficient(ones, zeros) == 0.0
    assert dice_coefficient(ones, ones) == 1.0
    assert dice_loss(ones, ones) == 0.0
    # symmetric in its arguments
    rng = np.random.default_rng(1)
    p, g = (rng.random((5, 5)) > 0.5), (rng.random((5, 5)) > 0.5)
    assert dice_coefficient(p, g) == pytest.approx(dice_coefficient(g, p), abs=1e-15)


def test_dice_torch_numpy_agree():
    rng = np.random.default_rng(2)
    p = rng.random((6, 6))
    g = (rng.random((6, 6)) > 0.5).astype(np.float64)
    d_np = dice_coefficient(p, g)
    d_t = float(dice_coefficient(torch.from_numpy(p), torch.from_numpy(g)))
    assert d_np == pytest.approx(d_t, abs=1e-12)
    both_empty = dice_coefficient(torch.zeros(3, 3), torch.zeros(3, 3))
    assert float(both_empty) == 1.0


def test_dice_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        dice_coefficient(np.zeros((2, 2)), np.zeros((3, 3)))


# ---------------------------------------------------------------------------
# generalized Dice loss
# ---------------------------------------------------------------------------

def test_gdl_perfect_prediction_is_zero():
    rng = np.random.default_rng(3)
    fg = (rng.random((8, 8)) > 0.6).astype(np.float64)
    g = one_hot(fg)
    assert generalized_dice_loss(g, g) == pytest.approx(0.0, abs=1e-9)


def test_gdl_value_against_hand_formula():
    rng = np.random.default_rng(4)
    fg = (rng.random((6, 6)) > 0.5).astype(np.float64)
    g = one_hot(fg)
    p = rng.random((2, 6, 6))
    eps = 1e-6
    w = 1.0 / (g.sum(axis=(1, 2)) + eps) ** 2
    num = (w * (p * g).sum(axis=(1, 2))).sum()
    den = (w * (p + g).sum(axis=(1, 2))).sum()
    expected = 1.0 - 2.0 * num / den
    assert generalized_dice_loss(p, g) == pytest.approx(expected, abs=1e-12)


def test_gdl_weights_rebalance_classes():
    # a rare foreground mistake must cost more than the same-sized
    # background mistake under inverse-volume weighting
    fg = np.zeros((8, 8))
    fg[0, :2] = 1.0  # 2 of 64 pixels
    g = one_hot(fg)
    miss_fg = g.copy()
    miss_fg[:, 0, :2] = [[1.0, 1.0], [0.0, 0.0]]  # predict background there
    miss_bg = g.copy()
    miss_bg[:, 7, :2] = [[0.0, 0.0], [1.0, 1.0]]  # same area, other direction
    assert generalized_dice_loss(miss_fg, g) > generalized_dice_loss(miss_bg, g)


def test_gdl_batched_and_torch():
    rng = np.random.default_rng(5)
    fg = (rng.random((3, 4, 4)) > 0.5).astype(np.float64)
    g = np.stack([1.0 - fg, fg], axis=1)
    p = rng.random((3, 2, 4, 4))
    val_np = generalized_dice_loss(p, g)
    val_t = generalized_dice_loss(torch.from_numpy(p), torch.from_numpy(g))
    assert val_np == pytest.approx(float(val_t), abs=1e-12)
    assert 0.0 <= val_np <= 1.0


def test_gdl_empty_class_is_stable():
    g = one_hot(np.zeros((5, 5)))
    p = np.random.default_rng(6).random((2, 5, 5))
    val = generalized_dice_loss(p, g)
    assert np.isfinite(val)


def test_gdl_validates_one_hot():
    p = np.random.default_rng(7).random((2, 4, 4))
    bad_sum = np.ones((2, 4, 4))
    with pytest.raises(ValueError, match="one-hot"):
        generalized_dice_loss(p, bad_sum)
    soft = np.stack([np.full((4, 4), 0.5), np.full((4, 4), 0.5)])
    with pytest.raises(ValueError, match="one-hot"):
        generalized_dice_loss(p, soft)
    with pytest.raises(ValueError, match="channels"):
        generalized_dice_loss(np.zeros((3, 4, 4)), np.zeros((3, 4, 4)))
    with pytest.raises(ValueError, match="shape"):
        generalized_dice_loss(np.zeros((2, 8, 8)), np.zeros((2, 4, 4)))


# ---------------------------------------------------------------------------
# signed distance maps
# ---------------------------------------------------------------------------

def brute_force_signed_distance(fg: np.ndarray) -> np.ndarray:
    """All-pairs reference: distance to the nearest boundary pixel."""
    fg = fg.astype(bool)
    h, w = fg.shape
    border = []
    for i in range(h):
        for j in range(w):
            if not fg[i, j]:
                continue
            neighbors = [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
            if any(0 <= a < h and 0 <= b < w and not fg[a, b] for a, b in neighbors):
                border.append((i, j))
    assert border, "caller must ensure the mask has a boundary"
    phi = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            d2 = min((i - a) ** 2 + (j - b) ** 2 for a, b in border)
            phi[i, j] = -np.sqrt(d2) if fg[i, j] else np.sqrt(d2)
    return phi


def brute_force_border_distance(shape) -> np.ndarray:
    h, w = shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            out[i, j] = min(i + 1, j + 1, h - i, w - j)
    return out


def test_signed_distance_matches_brute_force_random():
    rng = np.random.default_rng(8)
    checked = 0
    while checked < 60:
        h, w = rng.integers(2, 17, size=2)
        fg = (rng.random((h, w)) < rng.uniform(0.2, 0.8)).astype(np.uint8)
        if fg.sum() in (0, fg.size):
            continue
        dm = signed_distance_map(fg)
        assert not dm.from_border
        np.testing.assert_array_equal(dm.phi, brute_force_signed_distance(fg))
        checked += 1


def test_signed_distance_exhaustive_3x3():
    # every possible 3x3 mask with a boundary
    for bits in range(1, 2 ** 9 - 1):
        fg = np.array([(bits >> k) & 1 for k in range(9)], dtype=np.uint8).reshape(3, 3)
        dm = signed_distance_map(fg)
        np.testing.assert_array_equal(dm.phi, brute_force_signed_distance(fg))


def test_signed_distance_structured_cases():
    single = np.zeros((7, 7), dtype=np.uint8)
    single[3, 3] = 1
    dm = signed_distance_map(single)
    assert dm.phi[3, 3] == 0.0  # a lone pixel is its own boundary
    assert dm.phi[3, 4] == 1.0
    assert dm.phi[0, 0] == pytest.approx(np.sqrt(18))

    stripe = np.zeros((5, 8), dtype=np.uint8)
    stripe[:, :3] = 1
    dm = signed_distance_map(stripe)
    np.testing.assert_array_equal(dm.phi[:, 2], 0.0)
    np.testing.assert_array_equal(dm.phi[:, 0], -2.0)
    np.testing.assert_array_equal(dm.phi[:, 7], 5.0)


def test_signed_distance_empty_and_full_fall_back_to_border():
    empty = signed_distance_map(np.zeros((4, 6), dtype=np.uint8))
    assert empty.from_border
    np.testing.assert_array_equal(empty.phi, brute_force_border_distance((4, 6)))
    full = signed_distance_map(np.ones((4, 6), dtype=np.uint8))
    assert full.from_border
    np.testing.assert_array_equal(full.phi, -brute_force_border_distance((4, 6)))


def test_signed_distance_validates_input():
    with pytest.raises(ValueError, match="2D"):
        signed_distance_map(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError, match="0 or 1"):
        signed_distance_map(np.full((3, 3), 2.0))


def test_boundary_pixels_oracle():
    rng = np.random.default_rng(9)
    fg = (rng.random((10, 10)) < 0.5)
    got = boundary_pixels(fg)
    h, w = fg.shape
    for i in range(h):
        for j in range(w):
            neighbors = [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
            expect = fg[i, j] and any(
                0 <= a < h and 0 <= b < w and not fg[a, b] for a, b in neighbors)
            assert got[i, j] == expect


# ---------------------------------------------------------------------------
# boundary loss schedule
# ---------------------------------------------------------------------------

def test_schedule_alpha_trace():
    assert BoundarySchedule(0, 11).alpha == 1.0
    assert BoundarySchedule(10, 11).alpha == 0.0
    assert BoundarySchedule(5, 11).alpha == pytest.approx(0.5)
    assert BoundarySchedule(3, 11).alpha == pytest.approx(1.0 - 3 / 10)
    assert BoundarySchedule(25, 11).alpha == 0.0  # clamped past the horizon
    with pytest.raises(ValueError, match="max_epochs"):
        BoundarySchedule(0, 1)
    with pytest.raises(ValueError, match="epoch"):
        BoundarySchedule(-1, 10)


def test_boundary_loss_endpoint_identities():
    rng = np.random.default_rng(10)
    fg = (rng.random((8, 8)) > 0.6).astype(np.float64)
    g = one_hot(fg)
    p = rng.random((2, 8, 8))

    first = boundary_loss(p, g, BoundarySchedule(0, 40))
    assert abs(first - generalized_dice_loss(p, g)) < 1e-12

    last = boundary_loss(p, g, BoundarySchedule(39, 40))
    phi = signed_distance_map(fg).phi
    assert abs(last - surface_term(p, phi)) < 1e-12

    mid = BoundarySchedule(13, 40)
    expected = mid.alpha * generalized_dice_loss(p, g) + \
        (1.0 - mid.alpha) * surface_term(p, phi)
    assert boundary_loss(p, g, mid) == pytest.approx(expected, abs=1e-15)


def test_boundary_loss_accepts_precomputed_phi():
    rng = np.random.default_rng(12)
    fg = (rng.random((6, 6)) > 0.5).astype(np.float64)
    g = one_hot(fg)
    p = rng.random((2, 6, 6))
    schedule = BoundarySchedule(3, 10)
    phi = distance_maps_for(g)
    assert boundary_loss(p, g, schedule, phi=phi) == \
        pytest.approx(boundary_loss(p, g, schedule), abs=1e-15)


def test_distance_maps_for_batch():
    rng = np.random.default_rng(13)
    fg = (rng.random((4, 5, 5)) > 0.5).astype(np.float64)
    g = np.stack([1.0 - fg, fg], axis=1)
    phi = distance_maps_for(g)
    assert phi.shape == (4, 5, 5)
    for b in range(4):
        np.testing.assert_array_equal(phi[b], signed_distance_map(fg[b]).phi)


def test_surface_term_hand_value():
    p = np.zeros((2, 2, 2))
    p[1] = [[0.5, 1.0], [0.0, 0.25]]
    phi = np.array([[2.0, -1.0], [4.0, 0.0]])
    assert surface_term(p, phi) == pytest.approx((1.0 - 1.0 + 0.0 + 0.0) / 4)


# ---------------------------------------------------------------------------
# gradients vs finite differences
# ---------------------------------------------------------------------------

def finite_difference_grad(f, p: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    grad = torch.zeros_like(p)
    flat = p.detach().clone().view(-1)
    for k in range(flat.numel()):
        orig = float(flat[k])
        flat[k] = orig + h
        up = float(f(flat.view(p.shape)))
        flat[k] = orig - h
        down = float(f(flat.view(p.shape)))
        flat[k] = orig
        grad.view(-1)[k] = (up - down) / (2 * h)
    return grad


def relative_grad_error(f, p: torch.Tensor) -> float:
    p = p.clone().requires_grad_(True)
    f(p).backward()
    analytic = p.grad.detach()
    numeric = finite_difference_grad(f, p.detach())
    denom = max(float(numeric.norm()), 1e-12)
    return float((analytic - numeric).norm()) / denom


def _random_losses(seed: int):
    """(name, closure, input) triples for one random 8x8 problem."""
    rng = np.random.default_rng(seed)
    fg = (rng.random((8, 8)) > 0.5).astype(np.float64)
    g1 = torch.from_numpy(fg)
    g2 = torch.from_numpy(one_hot(fg))
    phi = distance_maps_for(g2)
    p1 = torch.from_numpy(rng.uniform(0.05, 0.95, size=(8, 8)))
    p2 = torch.from_numpy(rng.uniform(0.05, 0.95, size=(2, 8, 8)))
    schedule = BoundarySchedule(7, 20)
    return [
        ("dice", lambda p: dice_loss(p, g1), p1),
        ("gdl", lambda p: generalized_dice_loss(p, g2), p2),
        ("boundary", lambda p: boundary_loss(p, g2, schedule, phi=phi), p2),
    ]


@pytest.mark.parametrize("seed", range(8))
def test_gradients_match_finite_differences(seed):
    for name, f, p in _random_losses(seed):
        err = relative_grad_error(f, p)
        assert err < 1e-4, f"{name} gradient error {err:.2e} at seed {seed}"
