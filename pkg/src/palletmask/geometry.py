"""Voxel-grid geometry for the pallet: boxes, orientations, heightmaps, support.

All coordinates are integer cells. ``x`` runs along the pallet length, ``y``
along its width and ``z`` upward. A placement is anchored at the lowest
``(x, y)`` corner of its oriented footprint.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

EMPTY = -1
FLOOR = -2
PALLET_FORMAT_VERSION = 1

# axis permutation applied to (length, width, height) for each orientation code
_PERMUTATIONS: tuple[tuple[int, int, int], ...] = (
    (0, 1, 2),
    (0, 2, 1),
    (1, 0, 2),
    (1, 2, 0),
    (2, 0, 1),
    (2, 1, 0),
)
N_ORIENTATIONS = len(_PERMUTATIONS)


class GeometryError(ValueError):
    """Base class for invalid placements."""


class OutOfBounds(GeometryError):
    pass


class HeightExceeded(GeometryError):
    pass


class Overlap(GeometryError):
    pass


@dataclass(frozen=True)
class GridConfig:
    length_cells: int = 25
    width_cells: int = 25
    height_cells: int = 20
    cell_size: float = 1.0

    def __post_init__(self):
        for name in ("length_cells", "width_cells", "height_cells"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if not self.cell_size > 0:
            raise ValueError(f"cell_size must be positive, got {self.cell_size!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.length_cells, self.width_cells, self.height_cells)

    @property
    def max_volume(self) -> float:
        """Pallet capacity in physical units (cubic inches at the default cell size)."""
        return self.length_cells * self.width_cells * self.height_cells * self.cell_size**3

    def to_dict(self) -> dict:
        return {
            "length_cells": self.length_cells,
            "width_cells": self.width_cells,
            "height_cells": self.height_cells,
            "cell_size": self.cell_size,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GridConfig":
        return cls(**d)


@dataclass(frozen=True)
class BoxSpec:
    id: int
    dims: tuple[int, int, int]
    density: float
    rigidity: float

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims) or tuple(self.dims) != dims:
            raise ValueError(f"dims must be three positive integers, got {self.dims!r}")
        object.__setattr__(self, "dims", dims)
        if not self.density > 0 or not self.rigidity > 0:
            raise ValueError("density and rigidity must be positive")
        if self.id < 0:
            raise ValueError("box ids must be non-negative")

    @property
    def volume(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def mass(self) -> float:
        return self.density * self.volume

    def to_dict(self) -> dict:
        return {"id": self.id, "dims": list(self.dims), "density": self.density, "rigidity": self.rigidity}

    @classmethod
    def from_dict(cls, d: Mapping) -> "BoxSpec":
        return cls(id=int(d["id"]), dims=tuple(d["dims"]), density=float(d["density"]), rigidity=float(d["rigidity"]))


def _check_orientation(o: int) -> int:
    o = int(o)
    if not 0 <= o < N_ORIENTATIONS:
        raise ValueError(f"orientation code must be in [0, {N_ORIENTATIONS}), got {o}")
    return o


def oriented_dims(box: BoxSpec | Sequence[int], o: int) -> tuple[int, int, int]:
    """Dimensions of ``box`` along (x, y, z) after applying orientation ``o``."""
    dims = box.dims if isinstance(box, BoxSpec) else tuple(box)
    perm = _PERMUTATIONS[_check_orientation(o)]
    return (dims[perm[0]], dims[perm[1]], dims[perm[2]])


def unorient_dims(dims: Sequence[int], o: int) -> tuple[int, int, int]:
    """Inverse of :func:`oriented_dims`."""
    perm = _PERMUTATIONS[_check_orientation(o)]
    out = [0, 0, 0]
    for i, p in enumerate(perm):
        out[p] = dims[i]
    return tuple(out)


@dataclass(frozen=True)
class Placement:
    box: BoxSpec
    orientation: int
    x: int
    y: int
    z: int = 0

    @property
    def dims(self) -> tuple[int, int, int]:
        return oriented_dims(self.box, self.orientation)

    @property
    def footprint(self) -> tuple[slice, slice]:
        ox, oy, _ = self.dims
        return slice(self.x, self.x + ox), slice(self.y, self.y + oy)

    def to_dict(self) -> dict:
        return {"box": self.box.to_dict(), "orientation": self.orientation, "x": self.x, "y": self.y}


@dataclass
class SupportContact:
    """Result of :func:`support_contact`.

    ``contact`` maps supporter id (a box id or :data:`FLOOR`) to contact area in
    cell units. ``region`` holds the supported contact polygons, used for the
    center-of-mass test.
    """

    support_ratio: float
    support_corners: int
    contact: dict[int, float]
    region: list[np.ndarray] = field(default_factory=list)


class PalletState:
    """Voxelised pallet. Treated as a value: mutating operations return a copy."""

    __slots__ = ("config", "cells", "density", "rigidity", "heightmap", "placed", "contacts", "_index")

    def __init__(self, config: GridConfig):
        self.config = config
        shape = config.shape
        self.cells = np.full(shape, EMPTY, dtype=np.int32)
        self.density = np.zeros(shape, dtype=np.float64)
        self.rigidity = np.zeros(shape, dtype=np.float64)
        self.heightmap = np.zeros(shape[:2], dtype=np.int64)
        self.placed: tuple[Placement, ...] = ()
        self.contacts: tuple[dict[int, float], ...] = ()
        self._index: dict[int, int] = {}

    def copy(self) -> "PalletState":
        new = PalletState.__new__(PalletState)
        new.config = self.config
        new.cells = self.cells.copy()
        new.density = self.density.copy()
        new.rigidity = self.rigidity.copy()
        new.heightmap = self.heightmap.copy()
        new.placed = self.placed
        new.contacts = self.contacts
        new._index = dict(self._index)
        return new

    def __len__(self) -> int:
        return len(self.placed)

    def index_of(self, box_id: int) -> int:
        return self._index[box_id]

    def placement_of(self, box_id: int) -> Placement:
        return self.placed[self._index[box_id]]

    @property
    def occupied_volume(self) -> int:
        return int(np.count_nonzero(self.cells != EMPTY))

    @property
    def placed_volume(self) -> int:
        return sum(p.box.volume for p in self.placed)

    def placement(self, box: BoxSpec, o: int, x: int, y: int) -> Placement:
        """Build a placement of ``box`` at ``(x, y)`` resting at its drop height."""
        return Placement(box, int(o), int(x), int(y), rest_height(self, box, o, x, y))

    # serialization: placements only, everything else is re-derived on load
    def to_json(self) -> str:
        return json.dumps(
            {
                "format": "palletmask-pallet",
                "version": PALLET_FORMAT_VERSION,
                "config": self.config.to_dict(),
                "placements": [p.to_dict() for p in self.placed],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "PalletState":
        doc = json.loads(text)
        if doc.get("version") != PALLET_FORMAT_VERSION:
            raise ValueError(f"unsupported pallet document version {doc.get('version')!r}")
        pallet = cls(GridConfig.from_dict(doc["config"]))
        for p in doc["placements"]:
            box = BoxSpec.from_dict(p["box"])
            pallet = place(pallet, pallet.placement(box, p["orientation"], p["x"], p["y"]))
        return pallet

    def __eq__(self, other) -> bool:
        if not isinstance(other, PalletState):
            return NotImplemented
        return self.config == other.config and self.placed == other.placed

    def __repr__(self) -> str:
        return f"PalletState({self.config.shape}, boxes={len(self.placed)})"


def _check_footprint(config: GridConfig, ox: int, oy: int, x: int, y: int) -> None:
    if x < 0 or y < 0 or x + ox > config.length_cells or y + oy > config.width_cells:
        raise OutOfBounds(f"footprint {ox}x{oy} at ({x}, {y}) leaves the {config.length_cells}x{config.width_cells} grid")


def rest_height(pallet: PalletState, box: BoxSpec, o: int, x: int, y: int) -> int:
    """Height at which the box comes to rest when dropped at ``(x, y)``."""
    ox, oy, _ = oriented_dims(box, o)
    _check_footprint(pallet.config, ox, oy, x, y)
    return int(pallet.heightmap[x : x + ox, y : y + oy].max())


def footprint_polygon(x: float, y: float, ox: int, oy: int, offset=(0.0, 0.0), rot_deg: float = 0.0) -> np.ndarray:
    """Corners (4, 2) of a footprint shifted by ``offset`` and rotated about its centre."""
    cx = x + ox / 2.0 + offset[0]
    cy = y + oy / 2.0 + offset[1]
    hx, hy = ox / 2.0, oy / 2.0
    local = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
    if rot_deg:
        t = math.radians(rot_deg)
        c, s = math.cos(t), math.sin(t)
        local = local @ np.array([[c, s], [-s, c]])
    return local + np.array([cx, cy])


def clip_to_rect(poly: np.ndarray, x0: float, y0: float, x1: float, y1: float) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon to an axis-aligned rectangle."""
    pts = [tuple(p) for p in poly]
    for axis, bound, keep_ge in ((0, x0, True), (0, x1, False), (1, y0, True), (1, y1, False)):
        if not pts:
            break
        out = []
        n = len(pts)
        for i in range(n):
            a, b = pts[i], pts[(i + 1) % n]
            a_in = a[axis] >= bound if keep_ge else a[axis] <= bound
            b_in = b[axis] >= bound if keep_ge else b[axis] <= bound
            if a_in:
                out.append(a)
            if a_in != b_in:
                t = (bound - a[axis]) / (b[axis] - a[axis])
                out.append((a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])))
        pts = out
    return np.array(pts, dtype=float).reshape(-1, 2)


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _support_cells(pallet: PalletState, x0: int, x1: int, y0: int, y1: int, z: int):
    """Cells in ``[x0, x1) x [y0, y1)`` (clipped to the grid) whose column tops out at ``z``."""
    L, W, _ = pallet.config.shape
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, L), min(y1, W)
    hm = pallet.heightmap[x0:x1, y0:y1]
    ii, jj = np.nonzero(hm == z)
    ii = ii + x0
    jj = jj + y0
    ids = pallet.cells[ii, jj, z - 1]
    return ii, jj, ids


def support_contact(
    pallet: PalletState,
    placement: Placement,
    offset: tuple[float, float] = (0.0, 0.0),
    rot_deg: float = 0.0,
) -> SupportContact:
    """Support ratio, supported corner count and per-supporter contact areas.

    With a zero offset and rotation the computation is an exact cell count.
    Otherwise the perturbed footprint is clipped against the unit squares of
    every supporting cell. The floor is an unbounded supporter. Corners are
    always evaluated on the unperturbed grid.
    """
    ox, oy, _ = placement.dims
    x, y, z = placement.x, placement.y, placement.z
    _check_footprint(pallet.config, ox, oy, x, y)
    area = float(ox * oy)
    corner_cells = ((x, y), (x + ox - 1, y), (x, y + oy - 1), (x + ox - 1, y + oy - 1))
    perturbed = bool(offset[0] or offset[1] or rot_deg)

    if z == 0:
        poly = footprint_polygon(x, y, ox, oy, offset, rot_deg)
        return SupportContact(1.0, 4, {FLOOR: area}, [poly])

    hm = pallet.heightmap
    corners = sum(1 for cx, cy in corner_cells if hm[cx, cy] == z)
    if not perturbed:
        ii, jj, ids = _support_cells(pallet, x, x + ox, y, y + oy, z)
        contact: dict[int, float] = {}
        for sid in ids.tolist():
            contact[sid] = contact.get(sid, 0.0) + 1.0
        region = [np.array([[i, j], [i + 1, j], [i + 1, j + 1], [i, j + 1]], dtype=float) for i, j in zip(ii, jj)]
        return SupportContact(len(ii) / area, corners, contact, region)

    poly = footprint_polygon(x, y, ox, oy, offset, rot_deg)
    lo = np.floor(poly.min(axis=0)).astype(int)
    hi = np.ceil(poly.max(axis=0)).astype(int)
    ii, jj, ids = _support_cells(pallet, lo[0], hi[0], lo[1], hi[1], z)
    contact = {}
    region = []
    total = 0.0
    for i, j, sid in zip(ii.tolist(), jj.tolist(), ids.tolist()):
        piece = clip_to_rect(poly, i, j, i + 1, j + 1)
        a = polygon_area(piece)
        if a <= 1e-12:
            continue
        total += a
        contact[sid] = contact.get(sid, 0.0) + a
        region.append(piece)
    return SupportContact(total / area, corners, contact, region)


def place(pallet: PalletState, placement: Placement) -> PalletState:
    """Return a new pallet with ``placement`` added.

    ``placement.z`` must be the rest height at its footprint.
    """
    cfg = pallet.config
    ox, oy, oz = placement.dims
    x, y, z = placement.x, placement.y, placement.z
    _check_footprint(cfg, ox, oy, x, y)
    if placement.box.id in pallet._index:
        raise ValueError(f"box id {placement.box.id} already on the pallet")
    if z < 0 or z + oz > cfg.height_cells:
        raise HeightExceeded(f"top at {z + oz} exceeds the {cfg.height_cells}-cell height limit")
    block = pallet.cells[x : x + ox, y : y + oy, z : z + oz]
    if np.any(block != EMPTY):
        raise Overlap(f"box {placement.box.id} overlaps occupied cells")
    if z != int(pallet.heightmap[x : x + ox, y : y + oy].max()):
        raise GeometryError("placement z is not the rest height of its footprint")

    contact = support_contact(pallet, placement).contact
    new = pallet.copy()
    new.cells[x : x + ox, y : y + oy, z : z + oz] = placement.box.id
    new.density[x : x + ox, y : y + oy, z : z + oz] = placement.box.density
    new.rigidity[x : x + ox, y : y + oy, z : z + oz] = placement.box.rigidity
    new.heightmap[x : x + ox, y : y + oy] = z + oz
    new._index[placement.box.id] = len(pallet.placed)
    new.placed = pallet.placed + (placement,)
    new.contacts = pallet.contacts + (contact,)
    return new


def build_pallet(config: GridConfig, moves: Iterable[tuple[BoxSpec, int, int, int]]) -> PalletState:
    """Convenience: drop boxes ``(box, orientation, x, y)`` in order."""
    pallet = PalletState(config)
    for box, o, x, y in moves:
        pallet = place(pallet, pallet.placement(box, o, x, y))
    return pallet
