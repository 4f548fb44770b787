import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import hard, random_pallet, soft
from palletmask.baselines import HeuristicMask, HeuristicMaskRule, PlannerKind, heuristic_mask, support_maps
from palletmask.env import placeable
from palletmask.geometry import GridConfig, PalletState, build_pallet, oriented_dims, support_contact
from palletmask.oracle import OracleConfig, annotate_feasibility

GRID = GridConfig(10, 10, 10)
RULE = HeuristicMaskRule()


@pytest.mark.parametrize(
    "ratio,corners,expected",
    [(0.7, 4, True), (0.85, 3, True), (0.9, 2, False), (0.6, 4, False), (0.96, 0, True), (0.79, 3, False), (0.7, 3, False)],
)
def test_rule_cases(ratio, corners, expected):
    assert bool(RULE.accepts(ratio, corners)) is expected


@given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 4))
def test_rule_monotone_in_ratio(r1, r2, corners):
    lo, hi = sorted((r1, r2))
    if RULE.accepts(lo, corners):
        assert RULE.accepts(hi, corners)


def test_empty_pallet_all_placeable():
    box = soft(0, (3, 3, 2))
    m = heuristic_mask(PalletState(GRID), box, 0)
    assert np.array_equal(m.bits, placeable(PalletState(GRID), box, 0))


def test_too_big_footprint():
    assert not heuristic_mask(PalletState(GridConfig(2, 2, 5)), soft(0, (3, 3, 1)), 0).any()


def test_not_a_subset_of_oracle():
    # a hard box fully on top of a soft one is geometrically perfect but crushes it
    pallet = build_pallet(GRID, [(soft(0, (3, 3, 3)), 0, 0, 0)])
    box = hard(1, (3, 3, 3))
    h = heuristic_mask(pallet, box, 0)
    oracle = annotate_feasibility(pallet, box, 0, OracleConfig().without_noise())
    assert h.bits[0, 0] and not oracle.bits[0, 0]


def test_provider_wraps_function():
    pallet = random_pallet(np.random.default_rng(2), GRID, 6)
    box = soft(50, (3, 3, 2))
    assert HeuristicMask()(pallet, box, 1) == heuristic_mask(pallet, box, 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 5))
def test_support_maps_match_geometry(seed, o):
    rng = np.random.default_rng(seed)
    pallet = random_pallet(rng, GRID, int(rng.integers(1, 10)))
    box = soft(99, (4, 3, 2))
    z, ratio, corners = support_maps(pallet, box, o)
    ox, oy, _ = oriented_dims(box, o)
    for _ in range(5):
        x, y = int(rng.integers(10 - ox + 1)), int(rng.integers(10 - oy + 1))
        pl = pallet.placement(box, o, x, y)
        sc = support_contact(pallet, pl)
        assert z[x, y] == pl.z
        assert ratio[x, y] == pytest.approx(sc.support_ratio)
        assert corners[x, y] == sc.support_corners


def test_planner_kind_flags():
    assert PlannerKind("olmask").learns_mask
    assert PlannerKind.RANDOM_PLACEMENT.learns_mask and PlannerKind.RANDOM_SELECTION.learns_mask
    assert not PlannerKind.NOMASK.learns_mask and not PlannerKind.HEURISTIC.learns_mask
