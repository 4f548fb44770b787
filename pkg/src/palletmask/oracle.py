"""Quasi-static stability judge and exhaustive feasibility annotation.

A placement is stable when

* at least ``min_support_ratio`` of its base rests on supporters,
* its centre of mass projects inside the convex hull of the supported contact
  region (optionally grown by ``com_margin``), and
* no box is crushed: the load a box passes down (its own mass plus everything
  resting on it, split across supporters by contact area) stays within
  ``rigidity * crush_coefficient * top_area``.

:func:`check_placement` evaluates one placement directly. :func:`annotate_feasibility`
evaluates every position at once with batched polygon clipping and a linear
load-transfer matrix; the two are kept as separate code paths on purpose.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from typing import Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import (
    EMPTY,
    FLOOR,
    BoxSpec,
    PalletState,
    Placement,
    footprint_polygon,
    oriented_dims,
    support_contact,
)

LOAD_RTOL = 1e-9
RATIO_TOL = 1e-12
MAX_ROT_DEG = 15.0
MAX_OFFSET = 0.5


@dataclass(frozen=True)
class OracleConfig:
    min_support_ratio: float = 0.25
    crush_coefficient: float = 20_000.0
    noise_sigma_xy: float = 0.05
    noise_sigma_rot_deg: float = 5.0
    noise_samples: int = 5
    com_margin: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.min_support_ratio <= 1.0:
            raise ValueError("min_support_ratio must lie in (0, 1]")
        if self.noise_samples < 1:
            raise ValueError("noise_samples must be >= 1")
        if self.noise_sigma_xy < 0 or self.noise_sigma_rot_deg < 0:
            raise ValueError("noise sigmas must be non-negative")
        if self.crush_coefficient <= 0:
            raise ValueError("crush_coefficient must be positive")
        if self.com_margin < 0:
            raise ValueError("com_margin must be non-negative")

    @property
    def noisy(self) -> bool:
        return self.noise_sigma_xy > 0 or self.noise_sigma_rot_deg > 0

    def without_noise(self) -> "OracleConfig":
        return OracleConfig(self.min_support_ratio, self.crush_coefficient, 0.0, 0.0, 1, self.com_margin)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: Mapping) -> "OracleConfig":
        return cls(**d)


class Cause(str, enum.Enum):
    OK = "Ok"
    INSUFFICIENT_SUPPORT = "InsufficientSupport"
    COM_OUTSIDE_SUPPORT = "ComOutsideSupport"
    CRUSH_COLLAPSE = "CrushCollapse"


@dataclass(frozen=True)
class StabilityVerdict:
    stable: bool
    cause: Cause = Cause.OK
    crushed_box_id: int | None = None

    def to_dict(self) -> dict:
        return {"stable": self.stable, "cause": self.cause.value, "crushed_box_id": self.crushed_box_id}

    @classmethod
    def from_dict(cls, d: Mapping) -> "StabilityVerdict":
        return cls(bool(d["stable"]), Cause(d["cause"]), d.get("crushed_box_id"))


STABLE = StabilityVerdict(True)


def capacity(box: BoxSpec, o: int, cfg: OracleConfig) -> float:
    ox, oy, _ = oriented_dims(box, o)
    return box.rigidity * cfg.crush_coefficient * ox * oy


# ---------------------------------------------------------------------------
# scalar route


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns hull vertices counter-clockwise."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=float).tolist())))
    if len(pts) <= 2:
        return np.array(pts, dtype=float).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def _segment_distance(p, a, b) -> float:
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0 else min(1.0, max(0.0, float((p - a) @ ab) / denom))
    return float(np.linalg.norm(p - (a + t * ab)))


def point_in_hull(point, points: np.ndarray, margin: float = 0.0, tol: float = 1e-9) -> bool:
    """Whether ``point`` lies in the convex hull of ``points`` grown by ``margin``."""
    p = np.asarray(point, dtype=float)
    hull = convex_hull(points)
    if len(hull) == 0:
        return False
    if len(hull) >= 3:
        inside = True
        for i in range(len(hull)):
            a, b = hull[i], hull[(i + 1) % len(hull)]
            if (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) < -tol:
                inside = False
                break
        if inside:
            return True
    if len(hull) == 1:
        dist = float(np.linalg.norm(p - hull[0]))
    else:
        dist = min(_segment_distance(p, hull[i], hull[(i + 1) % len(hull)]) for i in range(len(hull)))
    return dist <= margin + tol


def propagate_loads(
    pallet: PalletState, extra: tuple[float, Mapping[int, float]] | None = None
) -> tuple[dict[int, float], float, float | None]:
    """Total downward load carried by each placed box.

    ``extra`` optionally adds a not-yet-placed box as ``(mass, contact)``.
    Returns ``(loads by box id, load absorbed by the floor, load of the extra box)``.
    """
    loads = {p.box.id: p.box.mass for p in pallet.placed}
    floor = 0.0

    def push(load: float, contact: Mapping[int, float]):
        nonlocal floor
        total = sum(contact.values())
        for sid, area in contact.items():
            share = load * area / total
            if sid == FLOOR:
                floor += share
            else:
                loads[sid] += share

    extra_load = None
    if extra is not None:
        extra_load = extra[0]
        push(extra[0], extra[1])
    for p, contact in zip(reversed(pallet.placed), reversed(pallet.contacts)):
        push(loads[p.box.id], contact)
    return loads, floor, extra_load


def _validate_noise(offset, rot_deg) -> None:
    if abs(offset[0]) > MAX_OFFSET or abs(offset[1]) > MAX_OFFSET:
        raise ValueError("placement offset must be within half a cell")
    if abs(rot_deg) > MAX_ROT_DEG:
        raise ValueError(f"rotation noise must be within {MAX_ROT_DEG} degrees")


def _crush_verdict(pallet: PalletState, cfg: OracleConfig, loads: Mapping[int, float], extra=None) -> StabilityVerdict:
    for p in pallet.placed:
        if loads[p.box.id] > capacity(p.box, p.orientation, cfg) * (1 + LOAD_RTOL):
            return StabilityVerdict(False, Cause.CRUSH_COLLAPSE, p.box.id)
    if extra is not None:
        placement, load = extra
        if load > capacity(placement.box, placement.orientation, cfg) * (1 + LOAD_RTOL):
            return StabilityVerdict(False, Cause.CRUSH_COLLAPSE, placement.box.id)
    return STABLE


def check_placement(
    pallet: PalletState,
    placement: Placement,
    offset: tuple[float, float] = (0.0, 0.0),
    rot_deg: float = 0.0,
    cfg: OracleConfig = OracleConfig(),
) -> StabilityVerdict:
    """Judge a single placement, optionally perturbed by sub-cell noise."""
    _validate_noise(offset, rot_deg)
    sc = support_contact(pallet, placement, offset, rot_deg)
    if sc.support_ratio < cfg.min_support_ratio - RATIO_TOL:
        return StabilityVerdict(False, Cause.INSUFFICIENT_SUPPORT)

    ox, oy, _ = placement.dims
    com = (placement.x + ox / 2.0 + offset[0], placement.y + oy / 2.0 + offset[1])
    if placement.z > 0:
        pts = np.concatenate(sc.region) if sc.region else np.empty((0, 2))
        if not point_in_hull(com, pts, cfg.com_margin):
            return StabilityVerdict(False, Cause.COM_OUTSIDE_SUPPORT)

    loads, _, new_load = propagate_loads(pallet, (placement.box.mass, sc.contact))
    return _crush_verdict(pallet, cfg, loads, (placement, new_load))


def _support_from_cells(pallet: PalletState, p: Placement):
    ox, oy, _ = p.dims
    if p.z == 0:
        return 1.0, True
    layer = pallet.cells[p.x : p.x + ox, p.y : p.y + oy, p.z - 1]
    ii, jj = np.nonzero(layer != EMPTY)
    ratio = len(ii) / float(ox * oy)
    pts = np.concatenate(
        [np.stack([ii, jj], 1), np.stack([ii + 1, jj], 1), np.stack([ii, jj + 1], 1), np.stack([ii + 1, jj + 1], 1)]
    ) + np.array([p.x, p.y])
    com = (p.x + ox / 2.0, p.y + oy / 2.0)
    return ratio, len(ii) > 0 and point_in_hull(com, pts)


def check_pallet_stable(pallet: PalletState, cfg: OracleConfig = OracleConfig()) -> StabilityVerdict:
    """Re-evaluate every placed box, in placement order, at zero noise."""
    for p in pallet.placed:
        ratio, com_ok = _support_from_cells(pallet, p)
        if ratio < cfg.min_support_ratio - RATIO_TOL:
            return StabilityVerdict(False, Cause.INSUFFICIENT_SUPPORT)
        if cfg.com_margin == 0 and not com_ok:
            return StabilityVerdict(False, Cause.COM_OUTSIDE_SUPPORT)
        if cfg.com_margin != 0:
            sc = support_contact(pallet, p)
            pts = np.concatenate(sc.region) if p.z > 0 else np.empty((0, 2))
            ox, oy, _ = p.dims
            if p.z > 0 and not point_in_hull((p.x + ox / 2.0, p.y + oy / 2.0), pts, cfg.com_margin):
                return StabilityVerdict(False, Cause.COM_OUTSIDE_SUPPORT)
    loads, _, _ = propagate_loads(pallet)
    return _crush_verdict(pallet, cfg, loads)


# ---------------------------------------------------------------------------
# feasibility maps

_FMAP_MAGIC = b"PMFM"
_FMAP_VERSION = 1


@dataclass
class FeasibilityMap:
    """Boolean ``(length, width)`` map of anchor positions judged feasible."""

    bits: np.ndarray
    probabilities: np.ndarray | None = None

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ValueError("feasibility map must be 2-D")

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def any(self) -> bool:
        return bool(self.bits.any())

    def positions(self) -> np.ndarray:
        return np.argwhere(self.bits)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeasibilityMap):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))

    def to_bytes(self) -> bytes:
        l, w = self.bits.shape
        return _FMAP_MAGIC + struct.pack("<BHH", _FMAP_VERSION, l, w) + np.packbits(self.bits.ravel()).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "FeasibilityMap":
        if data[:4] != _FMAP_MAGIC:
            raise ValueError("not a feasibility map")
        version, l, w = struct.unpack("<BHH", data[4:9])
        if version != _FMAP_VERSION:
            raise ValueError(f"unsupported feasibility map version {version}")
        payload = np.frombuffer(data[9:], dtype=np.uint8)
        if payload.size != (l * w + 7) // 8:
            raise ValueError("truncated feasibility map")
        return cls(np.unpackbits(payload)[: l * w].reshape(l, w).astype(bool))

    def to_pgm(self) -> bytes:
        l, w = self.bits.shape
        # rows are y so the image reads like a top-down view
        img = (self.bits.T[::-1] * 255).astype(np.uint8)
        return f"P5\n{l} {w}\n255\n".encode() + img.tobytes()


# ---------------------------------------------------------------------------
# batched route


def _clip_halfplanes(polys: np.ndarray, rects: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clip each convex polygon ``polys[r]`` to the rectangle ``rects[r] = (x0, y0, x1, y1)``.

    Returns padded vertices and vertex counts.
    """
    pts = polys
    n = np.full(len(pts), pts.shape[1], dtype=np.int64)
    for axis, col, keep_ge in ((0, 0, True), (0, 2, False), (1, 1, True), (1, 3, False)):
        R, M, _ = pts.shape
        if R == 0:
            break
        bound = rects[:, col][:, None]
        idx = np.arange(M)[None, :]
        valid = idx < n[:, None]
        nxt = np.where(idx + 1 < n[:, None], idx + 1, 0)
        a = pts
        b = pts[np.arange(R)[:, None], nxt]
        av, bv = a[..., axis], b[..., axis]
        a_in = (av >= bound) if keep_ge else (av <= bound)
        b_in = (bv >= bound) if keep_ge else (bv <= bound)
        crossing = (a_in != b_in) & valid
        denom = np.where(crossing, bv - av, 1.0)
        t = np.where(crossing, (bound - av) / denom, 0.0)
        inter = a + t[..., None] * (b - a)
        cand = np.stack([a, inter], axis=2).reshape(R, 2 * M, 2)
        keep = np.stack([a_in & valid, crossing], axis=2).reshape(R, 2 * M)
        # compact the kept vertices to the front, preserving their order
        n = keep.sum(axis=1)
        slot = np.cumsum(keep, axis=1) - 1
        r, k = np.nonzero(keep)
        pts = np.zeros((R, max(int(n.max()), 1), 2))
        pts[r, slot[r, k]] = cand[r, k]
    return pts, n


def _padded_area(pts: np.ndarray, n: np.ndarray) -> np.ndarray:
    if len(pts) == 0:
        return np.zeros(0)
    M = pts.shape[1]
    idx = np.arange(M)[None, :]
    filled = np.where((idx < n[:, None])[..., None], pts, pts[:, :1, :])
    x, y = filled[..., 0], filled[..., 1]
    s = (x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y).sum(axis=1)
    return 0.5 * np.abs(s)


def _com_inside_batch(com: np.ndarray, owner: np.ndarray, pts: np.ndarray, n_pairs: int) -> np.ndarray:
    """Angular-gap containment: ``com[k]`` lies in hull(pts[owner == k]) iff no gap exceeds pi."""
    inside = np.zeros(n_pairs, dtype=bool)
    if len(pts) == 0:
        return inside
    v = pts - com[owner]
    r = np.hypot(v[:, 0], v[:, 1])
    on_vertex = np.zeros(n_pairs, dtype=bool)
    np.logical_or.at(on_vertex, owner[r < 1e-12], True)
    keep = r >= 1e-12
    owner, v = owner[keep], v[keep]
    ang = np.arctan2(v[:, 1], v[:, 0])
    order = np.lexsort((ang, owner))
    owner, ang = owner[order], ang[order]
    if len(owner):
        starts = np.flatnonzero(np.r_[True, owner[1:] != owner[:-1]])
        ends = np.r_[starts[1:], len(owner)] - 1
        gaps = np.diff(ang, append=0.0)
        gaps[ends] = 0.0
        wrap = ang[starts] + 2 * math.pi - ang[ends]
        max_gap = np.maximum(np.maximum.reduceat(gaps, starts), wrap)
        inside[owner[starts]] = max_gap <= math.pi + 1e-9
    return inside | on_vertex


class _PalletLoads:
    """Per-pallet load bookkeeping for the batched route.

    ``transfer[i, b]`` is the fraction of load entering box ``i`` that is carried by box ``b``.
    """

    def __init__(self, pallet: PalletState, cfg: OracleConfig):
        n = len(pallet.placed)
        self.transfer = np.zeros((n, n))
        for i, contact in enumerate(pallet.contacts):
            self.transfer[i, i] = 1.0
            total = sum(contact.values())
            for sid, area in contact.items():
                if sid != FLOOR:
                    self.transfer[i] += (area / total) * self.transfer[pallet.index_of(sid)]
        masses = np.array([p.box.mass for p in pallet.placed])
        self.base = masses @ self.transfer if n else np.zeros(0)
        self.capacity = np.array([capacity(p.box, p.orientation, cfg) for p in pallet.placed])


def _evaluate_batch(
    pallet: PalletState,
    loads: _PalletLoads,
    box: BoxSpec,
    o: int,
    px: np.ndarray,
    py: np.ndarray,
    pz: np.ndarray,
    noise: np.ndarray,
    cfg: OracleConfig,
) -> np.ndarray:
    """Stability of ``len(px)`` perturbed placements resting above the floor.

    ``noise`` rows are ``(dx, dy, rot_deg)``.
    """
    ox, oy, _ = oriented_dims(box, o)
    P = len(px)
    area = float(ox * oy)
    L, W, _ = pallet.config.shape
    hx, hy = ox / 2.0, oy / 2.0
    local = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
    t = np.radians(noise[:, 2])
    c, s = np.cos(t), np.sin(t)
    rotx = local[None, :, 0] * c[:, None] - local[None, :, 1] * s[:, None]
    roty = local[None, :, 0] * s[:, None] + local[None, :, 1] * c[:, None]
    com = np.stack([px + hx + noise[:, 0], py + hy + noise[:, 1]], axis=1)
    polys = np.stack([rotx + com[:, :1], roty + com[:, 1:]], axis=2)

    radius = math.hypot(hx, hy)
    disp = np.hypot(noise[:, 0], noise[:, 1]) + 2 * radius * np.sin(np.abs(t) / 2)
    pad = int(math.ceil(disp.max() - 1e-12)) if P else 0
    wx, wy = np.meshgrid(np.arange(-pad, ox + pad), np.arange(-pad, oy + pad), indexing="ij")
    wx, wy = wx.ravel(), wy.ravel()
    ci = px[:, None] + wx[None, :]
    cj = py[:, None] + wy[None, :]
    in_grid = (ci >= 0) & (ci < L) & (cj >= 0) & (cj < W)
    ci_c, cj_c = np.clip(ci, 0, L - 1), np.clip(cj, 0, W - 1)
    at_level = in_grid & (pallet.heightmap[ci_c, cj_c] == pz[:, None])
    owner, k = np.nonzero(at_level)
    ri, rj = ci[owner, k], cj[owner, k]
    rects = np.stack([ri, rj, ri + 1, rj + 1], axis=1).astype(float)
    clipped, counts = _clip_halfplanes(polys[owner], rects)
    areas = _padded_area(clipped, counts)
    real = areas > 1e-12
    owner, ri, rj, areas = owner[real], ri[real], rj[real], areas[real]
    clipped, counts = clipped[real], counts[real]

    supported = np.bincount(owner, weights=areas, minlength=P)
    ok = supported / area >= cfg.min_support_ratio - RATIO_TOL

    M = clipped.shape[1] if len(clipped) else 0
    vmask = np.arange(M)[None, :] < counts[:, None]
    vert_owner = np.repeat(owner, M).reshape(-1, M)[vmask]
    verts = clipped[vmask]
    if cfg.com_margin == 0:
        com_ok = _com_inside_batch(com, vert_owner, verts, P)
    else:
        com_ok = np.array([point_in_hull(com[k], verts[vert_owner == k], cfg.com_margin) for k in range(P)])
    ok &= com_ok

    n_boxes = len(pallet.placed)
    mass = box.mass
    crush_ok = np.full(P, mass <= capacity(box, o, cfg) * (1 + LOAD_RTOL))
    if n_boxes:
        sid = pallet.cells[ri, rj, pz[owner] - 1]
        bidx = np.array([pallet.index_of(int(v)) for v in sid], dtype=np.int64) if len(sid) else np.zeros(0, np.int64)
        frac = np.zeros((P, n_boxes))
        np.add.at(frac, (owner, bidx), areas / np.maximum(supported[owner], 1e-300))
        total = loads.base[None, :] + mass * (frac @ loads.transfer)
        crush_ok &= np.all(total <= loads.capacity[None, :] * (1 + LOAD_RTOL), axis=1)
    return ok & crush_ok


def draw_noise(cfg: OracleConfig, seed: int, x: int, y: int, cell_size: float = 1.0) -> np.ndarray:
    """``noise_samples`` rows of ``(dx, dy, rot_deg)`` for position ``(x, y)``.

    Each position owns its own stream so results do not depend on how positions
    are grouped or scheduled.
    """
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, x, y])
    xy = rng.normal(0.0, cfg.noise_sigma_xy / cell_size, size=(cfg.noise_samples, 2))
    rot = rng.normal(0.0, cfg.noise_sigma_rot_deg, size=(cfg.noise_samples, 1))
    return np.concatenate([np.clip(xy, -MAX_OFFSET, MAX_OFFSET), np.clip(rot, -MAX_ROT_DEG, MAX_ROT_DEG)], axis=1)


def annotate_feasibility(
    pallet: PalletState,
    box: BoxSpec,
    o: int,
    cfg: OracleConfig = OracleConfig(),
    rng_seed: int = 0,
) -> FeasibilityMap:
    """Label every anchor position of ``box`` in orientation ``o``.

    A position is feasible when the placement is stable unperturbed and under
    every one of the ``noise_samples`` perturbations. Positions on the bare
    floor are feasible and positions with too little support are infeasible
    without sampling; both shortcuts coincide with what sampling would give.
    """
    L, W, H = pallet.config.shape
    ox, oy, oz = oriented_dims(box, o)
    bits = np.zeros((L, W), dtype=bool)
    if ox > L or oy > W:
        return FeasibilityMap(bits)
    loads = _PalletLoads(pallet, cfg)
    # an already-overloaded pallet or a box that crushes under its own weight
    # fails the load condition everywhere, floor included
    if np.any(loads.base > loads.capacity * (1 + LOAD_RTOL)) or box.mass > capacity(box, o, cfg) * (1 + LOAD_RTOL):
        return FeasibilityMap(bits)
    windows = sliding_window_view(pallet.heightmap, (ox, oy))
    z = windows.max(axis=(2, 3))
    height_ok = z + oz <= H
    on_floor = height_ok & (z == 0)
    support = (windows == z[..., None, None]).sum(axis=(2, 3)) / float(ox * oy)
    starved = support < cfg.min_support_ratio - RATIO_TOL
    nx, ny = z.shape
    bits[:nx, :ny] = on_floor
    todo = np.argwhere(height_ok & ~on_floor & ~starved)
    if len(todo) == 0:
        return FeasibilityMap(bits)

    rows = [np.zeros((len(todo), 3))]
    owners = [np.arange(len(todo))]
    if cfg.noisy:
        cell = pallet.config.cell_size
        draws = np.stack([draw_noise(cfg, rng_seed, int(x), int(y), cell) for x, y in todo])
        rows.append(draws.reshape(-1, 3))
        owners.append(np.repeat(np.arange(len(todo)), cfg.noise_samples))
    noise = np.concatenate(rows)
    owner = np.concatenate(owners)
    px, py = todo[owner, 0], todo[owner, 1]
    pz = z[px, py]
    stable = _evaluate_batch(pallet, loads, box, o, px, py, pz, noise, cfg)
    all_stable = np.ones(len(todo), dtype=bool)
    np.logical_and.at(all_stable, owner, stable)
    bits[todo[:, 0], todo[:, 1]] = all_stable
    return FeasibilityMap(bits)


def feasibility_bruteforce(pallet: PalletState, box: BoxSpec, o: int, cfg: OracleConfig = OracleConfig()) -> FeasibilityMap:
    """Zero-noise map from a direct loop over :func:`check_placement`."""
    L, W, H = pallet.config.shape
    ox, oy, oz = oriented_dims(box, o)
    bits = np.zeros((L, W), dtype=bool)
    for x in range(L - ox + 1):
        for y in range(W - oy + 1):
            p = pallet.placement(box, o, x, y)
            if p.z + oz > H:
                continue
            bits[x, y] = check_placement(pallet, p, cfg=cfg).stable
    return FeasibilityMap(bits)
