"""Palletization MDP: buffer, action encoding, reward, and episode stepping."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import N_ORIENTATIONS, BoxSpec, GridConfig, PalletState, oriented_dims, place
from .oracle import FeasibilityMap, OracleConfig, StabilityVerdict, annotate_feasibility, check_placement

BOX_FEATURES = 5


class EpisodeDone(RuntimeError):
    """Raised when stepping an episode that has already ended."""


class EndReason(str, enum.Enum):
    INFEASIBLE = "Infeasible"
    UNSTABLE = "Unstable"
    SUCCESS = "Success"


@dataclass(frozen=True)
class BoxType:
    dims: tuple[int, int, int]
    density: float
    rigidity: float

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "density": self.density, "rigidity": self.rigidity}

    @classmethod
    def from_dict(cls, d: Mapping) -> "BoxType":
        return cls(tuple(int(v) for v in d["dims"]), float(d["density"]), float(d["rigidity"]))


FULL_INVENTORY = (
    (BoxType((6, 6, 4), 500.0, 0.5), 10),
    (BoxType((6, 6, 6), 500.0, 0.5), 10),
    (BoxType((6, 6, 6), 5000.0, 3.0), 10),
    (BoxType((8, 6, 6), 5000.0, 3.0), 10),
)

# the same four prototypes at half scale, for the 10x10x10 desk grid
DESK_INVENTORY = (
    (BoxType((3, 3, 2), 500.0, 0.5), 3),
    (BoxType((3, 3, 3), 500.0, 0.5), 3),
    (BoxType((3, 3, 3), 5000.0, 3.0), 3),
    (BoxType((4, 3, 3), 5000.0, 3.0), 3),
)


@dataclass(frozen=True)
class EpisodeConfig:
    grid: GridConfig = GridConfig()
    inventory: tuple[tuple[BoxType, int], ...] = FULL_INVENTORY
    buffer_size: int = 5
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.buffer_size < 1:
            raise ValueError("buffer_size must be >= 1")
        if not self.inventory or any(count < 0 for _, count in self.inventory):
            raise ValueError("inventory must list (box type, non-negative count) pairs")
        for bt, _ in self.inventory:
            if not any(
                all(d <= g for d, g in zip(oriented_dims(bt.dims, o), self.grid.shape)) for o in range(N_ORIENTATIONS)
            ):
                raise ValueError(f"box {bt.dims} cannot fit the grid in any orientation")

    @property
    def total_boxes(self) -> int:
        return sum(count for _, count in self.inventory)

    @property
    def n_actions(self) -> int:
        return self.buffer_size * N_ORIENTATIONS * self.grid.length_cells * self.grid.width_cells

    def with_seed(self, seed: int) -> "EpisodeConfig":
        return EpisodeConfig(self.grid, self.inventory, self.buffer_size, int(seed))

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.to_dict(),
            "inventory": [{"box": bt.to_dict(), "count": c} for bt, c in self.inventory],
            "buffer_size": self.buffer_size,
            "shuffle_seed": self.shuffle_seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EpisodeConfig":
        return cls(
            GridConfig.from_dict(d["grid"]),
            tuple((BoxType.from_dict(e["box"]), int(e["count"])) for e in d["inventory"]),
            int(d["buffer_size"]),
            int(d.get("shuffle_seed", 0)),
        )


def paper_episode_config(seed: int = 0) -> EpisodeConfig:
    return EpisodeConfig(GridConfig(25, 25, 20, 1.0), FULL_INVENTORY, 5, seed)


def desk_episode_config(seed: int = 0) -> EpisodeConfig:
    return EpisodeConfig(GridConfig(10, 10, 10, 1.0), DESK_INVENTORY, 2, seed)


@dataclass(frozen=True)
class BufferState:
    slots: tuple[BoxSpec | None, ...]
    remaining: tuple[BoxSpec, ...] = ()

    @property
    def capacity(self) -> int:
        return len(self.slots)

    @property
    def boxes_left(self) -> int:
        return sum(b is not None for b in self.slots) + len(self.remaining)

    def take(self, slot: int) -> tuple[BoxSpec, "BufferState"]:
        """Remove the box in ``slot`` and refill the slot from the queue."""
        box = self.slots[slot]
        if box is None:
            raise ValueError(f"slot {slot} is empty")
        slots = list(self.slots)
        remaining = self.remaining
        if remaining:
            slots[slot], remaining = remaining[0], remaining[1:]
        else:
            slots[slot] = None
        return box, BufferState(tuple(slots), remaining)

    def encode(self) -> np.ndarray:
        """Flat ``5 * N`` vector of (l, w, h, density, rigidity); empty slots are zero."""
        out = np.zeros(BOX_FEATURES * len(self.slots))
        for i, b in enumerate(self.slots):
            if b is not None:
                out[BOX_FEATURES * i : BOX_FEATURES * (i + 1)] = (*b.dims, b.density, b.rigidity)
        return out

    def occupied_slots(self) -> list[int]:
        return [i for i, b in enumerate(self.slots) if b is not None]


@dataclass(frozen=True)
class Action:
    slot: int
    orientation: int
    x: int
    y: int


def encode_action(a: Action, cfg: EpisodeConfig) -> int:
    L, W = cfg.grid.length_cells, cfg.grid.width_cells
    return ((a.slot * N_ORIENTATIONS + a.orientation) * L + a.x) * W + a.y


def decode_action(index: int, cfg: EpisodeConfig) -> Action:
    L, W = cfg.grid.length_cells, cfg.grid.width_cells
    index = int(index)
    if not 0 <= index < cfg.n_actions:
        raise ValueError(f"action index {index} outside [0, {cfg.n_actions})")
    index, y = divmod(index, W)
    index, x = divmod(index, L)
    slot, o = divmod(index, N_ORIENTATIONS)
    return Action(slot, o, x, y)


@dataclass
class StepOutcome:
    reward: float
    done: bool
    end_reason: EndReason | None = None
    info: dict = field(default_factory=dict)


def expand_inventory(cfg: EpisodeConfig) -> list[BoxSpec]:
    boxes = []
    for bt, count in cfg.inventory:
        for _ in range(count):
            boxes.append(BoxSpec(len(boxes), bt.dims, bt.density, bt.rigidity))
    return boxes


def reset(cfg: EpisodeConfig) -> tuple[PalletState, BufferState]:
    """Empty pallet plus a freshly shuffled inventory, first ``N`` boxes in the buffer."""
    boxes = expand_inventory(cfg)
    order = np.random.default_rng(cfg.shuffle_seed).permutation(len(boxes))
    queue = [boxes[i] for i in order]
    n = cfg.buffer_size
    slots = tuple(queue[:n]) + (None,) * max(0, n - len(queue))
    return PalletState(cfg.grid), BufferState(slots, tuple(queue[n:]))


def reward(verdict: StabilityVerdict | None, box: BoxSpec | None, grid: GridConfig) -> float:
    """Per-step reward: -1 for an empty slot, else stability indicator times volume share."""
    if box is None:
        return -1.0
    if verdict is None or not verdict.stable:
        return 0.0
    return box.volume * grid.cell_size**3 / grid.max_volume


def space_utilization(pallet: PalletState) -> float:
    cfg = pallet.config
    return pallet.placed_volume * cfg.cell_size**3 / cfg.max_volume


def placeable(pallet: PalletState, box: BoxSpec, o: int) -> np.ndarray:
    """Anchor positions whose footprint is in bounds and whose top stays under the height cap."""
    L, W, H = pallet.config.shape
    ox, oy, oz = oriented_dims(box, o)
    bits = np.zeros((L, W), dtype=bool)
    if ox > L or oy > W:
        return bits
    z = sliding_window_view(pallet.heightmap, (ox, oy)).max(axis=(2, 3))
    bits[: z.shape[0], : z.shape[1]] = z + oz <= H
    return bits


class MaskProvider(Protocol):
    def __call__(self, pallet: PalletState, box: BoxSpec, o: int) -> FeasibilityMap: ...


class PassThroughMask:
    """Every geometrically valid position is feasible."""

    def __call__(self, pallet, box, o):
        return FeasibilityMap(placeable(pallet, box, o))


class OracleMask:
    """Ground-truth mask from the stability oracle (zero noise unless configured otherwise)."""

    def __init__(self, cfg: OracleConfig | None = None, seed: int = 0):
        self.cfg = cfg if cfg is not None else OracleConfig().without_noise()
        self.seed = seed

    def __call__(self, pallet, box, o):
        return annotate_feasibility(pallet, box, o, self.cfg, self.seed)


class FixedMask:
    def __init__(self, fmap: FeasibilityMap):
        self.fmap = fmap

    def __call__(self, pallet, box, o):
        return self.fmap


def snap(fmap: FeasibilityMap | np.ndarray, x: int, y: int, rng: np.random.Generator) -> tuple[int, int] | None:
    """Nearest feasible position to ``(x, y)``; ties broken uniformly at random."""
    bits = fmap.bits if isinstance(fmap, FeasibilityMap) else np.asarray(fmap, dtype=bool)
    pos = np.argwhere(bits)
    if len(pos) == 0:
        return None
    d2 = (pos[:, 0] - x) ** 2 + (pos[:, 1] - y) ** 2
    best = np.flatnonzero(d2 == d2.min())
    pick = best[0] if len(best) == 1 else best[rng.integers(len(best))]
    return int(pos[pick, 0]), int(pos[pick, 1])


def step(
    pallet: PalletState,
    buffer: BufferState,
    action: Action,
    mask_provider: MaskProvider,
    oracle_cfg: OracleConfig = OracleConfig(),
    rng: np.random.Generator | None = None,
) -> tuple[PalletState, BufferState, StepOutcome]:
    """Apply one action.

    An empty slot costs -1 and leaves the state untouched. Otherwise the mask
    for the chosen box and orientation is queried, the target is snapped to the
    nearest feasible position and the box is dropped there. An unstable drop
    ends the episode and the collapsing box is not kept on the pallet, so the
    returned pallet is the last stable one.
    """
    rng = rng if rng is not None else np.random.default_rng()
    grid = pallet.config
    info = {"slot": action.slot, "orientation": action.orientation, "target": (action.x, action.y)}
    if not 0 <= action.slot < buffer.capacity or buffer.slots[action.slot] is None:
        info.update(utilization=space_utilization(pallet), boxes_placed=len(pallet), penalty=True)
        return pallet, buffer, StepOutcome(reward(None, None, grid), False, None, info)

    box = buffer.slots[action.slot]
    fmap = mask_provider(pallet, box, action.orientation)
    bits = fmap.bits & placeable(pallet, box, action.orientation)
    pos = snap(bits, action.x, action.y, rng)
    info.update(box_id=box.id, position=pos, penalty=False)
    if pos is None:
        info.update(utilization=space_utilization(pallet), boxes_placed=len(pallet), verdict=None)
        return pallet, buffer, StepOutcome(0.0, True, EndReason.INFEASIBLE, info)

    placement = pallet.placement(box, action.orientation, *pos)
    verdict = check_placement(pallet, placement, cfg=oracle_cfg.without_noise())
    info.update(verdict=verdict, z=placement.z)
    if not verdict.stable:
        info.update(utilization=space_utilization(pallet), boxes_placed=len(pallet))
        return pallet, buffer, StepOutcome(reward(verdict, box, grid), True, EndReason.UNSTABLE, info)

    new_pallet = place(pallet, placement)
    _, new_buffer = buffer.take(action.slot)
    done = new_buffer.boxes_left == 0
    info.update(utilization=space_utilization(new_pallet), boxes_placed=len(new_pallet))
    return new_pallet, new_buffer, StepOutcome(reward(verdict, box, grid), done, EndReason.SUCCESS if done else None, info)


class PalletEnv:
    """Stateful wrapper around :func:`reset` / :func:`step` for rollout loops."""

    def __init__(self, cfg: EpisodeConfig, oracle_cfg: OracleConfig = OracleConfig(), seed: int = 0):
        self.cfg = cfg
        self.oracle_cfg = oracle_cfg
        self.rng = np.random.default_rng(seed)
        self.pallet: PalletState | None = None
        self.buffer: BufferState | None = None
        self.done = True
        self.episode_seed: int | None = None

    def reset(self, episode_seed: int | None = None) -> tuple[PalletState, BufferState]:
        if episode_seed is None:
            episode_seed = int(self.rng.integers(2**31))
        self.episode_seed = int(episode_seed)
        self.rng = np.random.default_rng([self.episode_seed, 1])
        self.pallet, self.buffer = reset(self.cfg.with_seed(self.episode_seed))
        self.done = False
        return self.pallet, self.buffer

    def step(self, action: Action, mask_provider: MaskProvider) -> StepOutcome:
        if self.done:
            raise EpisodeDone("episode has ended; call reset()")
        self.pallet, self.buffer, out = step(self.pallet, self.buffer, action, mask_provider, self.oracle_cfg, self.rng)
        self.done = out.done
        return out

    def selected_box(self, action: Action) -> BoxSpec | None:
        if 0 <= action.slot < self.buffer.capacity:
            return self.buffer.slots[action.slot]
        return None


def random_action(cfg: EpisodeConfig, rng: np.random.Generator, slots: Sequence[int] | None = None) -> Action:
    """Uniform action; restricted to ``slots`` when given."""
    L, W = cfg.grid.length_cells, cfg.grid.width_cells
    slot = int(rng.choice(slots)) if slots else int(rng.integers(cfg.buffer_size))
    return Action(slot, int(rng.integers(N_ORIENTATIONS)), int(rng.integers(L)), int(rng.integers(W)))
