"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .geometry import N_ORIENTATIONS, BoxSpec, PalletState


def check_orientation(o) -> int:
    if isinstance(o, bool) or not isinstance(o, (int, np.integer)) or not 0 <= int(o) < N_ORIENTATIONS:
        raise ValueError(f"orientation must be an integer in [0, {N_ORIENTATIONS}), got {o!r}")
    return int(o)


def check_box(box) -> BoxSpec:
    if not isinstance(box, BoxSpec):
        raise TypeError(f"expected BoxSpec, got {type(box).__name__}")
    return box


def check_pallet(pallet) -> PalletState:
    if not isinstance(pallet, PalletState):
        raise TypeError(f"expected PalletState, got {type(pallet).__name__}")
    return pallet


def check_samples(X, require_labels: bool = False) -> list:
    """Materialise ``X`` as a list of mask samples, validating each entry."""
    from .masklearn import MaskSample

    if isinstance(X, (str, bytes)) or not isinstance(X, Sequence) and not hasattr(X, "__iter__"):
        raise TypeError("X must be an iterable of MaskSample")
    samples = list(X)
    shape = None
    for i, s in enumerate(samples):
        if not isinstance(s, MaskSample):
            raise TypeError(f"X[{i}] is {type(s).__name__}, expected MaskSample")
        check_pallet(s.pallet)
        check_box(s.box)
        check_orientation(s.orientation)
        if shape is None:
            shape = s.pallet.config.shape
        elif s.pallet.config.shape != shape:
            raise ValueError("all samples must share one grid shape")
        if require_labels and s.label is None:
            raise ValueError(f"X[{i}] has no label")
        if s.label is not None and s.label.bits.shape != shape[:2]:
            raise ValueError(f"X[{i}] label shape {s.label.bits.shape} does not match the grid")
    return samples
