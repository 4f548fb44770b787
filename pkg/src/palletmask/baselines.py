"""Comparison planners: heuristic support mask, no mask, and the two random ablations."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .env import placeable
from .geometry import BoxSpec, PalletState, oriented_dims
from .oracle import FeasibilityMap


class PlannerKind(str, enum.Enum):
    NOMASK = "nomask"
    HEURISTIC = "heuristic"
    RANDOM_SELECTION = "random_selection"
    RANDOM_PLACEMENT = "random_placement"
    OLMASK = "olmask"

    @property
    def learns_mask(self) -> bool:
        return self in (PlannerKind.OLMASK, PlannerKind.RANDOM_SELECTION, PlannerKind.RANDOM_PLACEMENT)


@dataclass(frozen=True)
class HeuristicMaskRule:
    """Disjunction of ``support_ratio > r and corners <cmp> c`` cases.

    Each case is ``(min_ratio, min_corners, exact)``; with ``exact`` the corner
    count must equal ``min_corners``, otherwise it must be at least that.
    """

    cases: tuple[tuple[float, int, bool], ...] = ((0.6, 4, True), (0.8, 3, False), (0.95, 0, False))

    def accepts(self, ratio, corners):
        ratio = np.asarray(ratio, dtype=float)
        corners = np.asarray(corners)
        ok = np.zeros(np.broadcast(ratio, corners).shape, dtype=bool)
        for r, c, exact in self.cases:
            ok |= (ratio > r) & ((corners == c) if exact else (corners >= c))
        return ok


def support_maps(pallet: PalletState, box: BoxSpec, o: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rest height, support ratio and supported-corner count for every anchor of the footprint."""
    ox, oy, _ = oriented_dims(box, o)
    hm = pallet.heightmap
    win = sliding_window_view(hm, (ox, oy))
    z = win.max(axis=(2, 3))
    ratio = (win == z[..., None, None]).sum(axis=(2, 3)) / float(ox * oy)
    corners = (
        (win[..., 0, 0] == z).astype(int)
        + (win[..., -1, 0] == z)
        + (win[..., 0, -1] == z)
        + (win[..., -1, -1] == z)
    )
    ratio = np.where(z == 0, 1.0, ratio)
    corners = np.where(z == 0, 4, corners)
    return z, ratio, corners


def heuristic_mask(pallet: PalletState, box: BoxSpec, o: int, rule: HeuristicMaskRule = HeuristicMaskRule()) -> FeasibilityMap:
    """Support-geometry mask that ignores density and rigidity."""
    L, W, _ = pallet.config.shape
    bits = np.zeros((L, W), dtype=bool)
    ox, oy, _ = oriented_dims(box, o)
    if ox > L or oy > W:
        return FeasibilityMap(bits)
    _, ratio, corners = support_maps(pallet, box, o)
    bits[: ratio.shape[0], : ratio.shape[1]] = rule.accepts(ratio, corners)
    return FeasibilityMap(bits & placeable(pallet, box, o))


class HeuristicMask:
    def __init__(self, rule: HeuristicMaskRule = HeuristicMaskRule()):
        self.rule = rule

    def __call__(self, pallet, box, o):
        return heuristic_mask(pallet, box, o, self.rule)


def run_baseline(kind, experiment_cfg, seeds=None):
    """Train and evaluate one planner kind; thin wrapper over :func:`palletmask.harness.run_experiment`."""
    from .harness import run_experiment

    cfg = experiment_cfg.replace(planner=PlannerKind(kind))
    if seeds is not None:
        cfg = cfg.replace(seeds=tuple(seeds))
    return run_experiment(cfg)
