import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import hard, soft
from palletmask.env import (
    DESK_INVENTORY,
    FULL_INVENTORY,
    Action,
    BoxType,
    BufferState,
    EndReason,
    EpisodeConfig,
    EpisodeDone,
    FixedMask,
    OracleMask,
    PalletEnv,
    PassThroughMask,
    decode_action,
    desk_episode_config,
    encode_action,
    expand_inventory,
    paper_episode_config,
    placeable,
    random_action,
    reset,
    reward,
    snap,
    space_utilization,
    step,
)
from palletmask.geometry import GridConfig, PalletState, build_pallet
from palletmask.oracle import Cause, FeasibilityMap, OracleConfig, StabilityVerdict


def single_cell_mask(shape, x, y):
    bits = np.zeros(shape, dtype=bool)
    bits[x, y] = True
    return FixedMask(FeasibilityMap(bits))


class TestReset:
    def test_full_inventory_counts(self):
        pallet, buf = reset(paper_episode_config(0))
        assert len(pallet) == 0
        assert buf.capacity == 5 and len(buf.occupied_slots()) == 5
        assert len(buf.remaining) == 35 and buf.boxes_left == 40

    def test_deterministic(self):
        a = reset(paper_episode_config(3))[1]
        b = reset(paper_episode_config(3))[1]
        c = reset(paper_episode_config(4))[1]
        assert a == b
        assert a != c

    def test_small_inventory(self):
        cfg = EpisodeConfig(GridConfig(10, 10, 10), ((BoxType((2, 2, 2), 500.0, 0.5), 3),), 5, 0)
        _, buf = reset(cfg)
        assert buf.occupied_slots() == [0, 1, 2]
        assert buf.slots[3] is None and buf.slots[4] is None

    def test_ids_unique(self):
        ids = [b.id for b in expand_inventory(paper_episode_config())]
        assert sorted(ids) == list(range(40))

    def test_box_too_big_rejected(self):
        with pytest.raises(ValueError):
            EpisodeConfig(GridConfig(2, 2, 2), ((BoxType((3, 3, 3), 500.0, 0.5), 1),), 1, 0)

    def test_config_round_trip(self):
        cfg = desk_episode_config(7)
        assert EpisodeConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.total_boxes == 12
        assert cfg.n_actions == 2 * 6 * 10 * 10


class TestBuffer:
    def test_take_refills(self):
        _, buf = reset(desk_episode_config(1))
        first = buf.remaining[0]
        box, nxt = buf.take(1)
        assert box == buf.slots[1]
        assert nxt.slots[1] == first
        assert nxt.boxes_left == buf.boxes_left - 1

    def test_take_empty(self):
        with pytest.raises(ValueError):
            BufferState((None,)).take(0)

    def test_encoding(self):
        buf = BufferState((soft(0, (3, 3, 2)), None))
        np.testing.assert_array_equal(buf.encode(), [3, 3, 2, 500, 0.5, 0, 0, 0, 0, 0])


class TestActions:
    def test_flat_index_formula(self):
        cfg = paper_episode_config()
        assert cfg.n_actions == 18_750
        a = Action(2, 3, 7, 11)
        assert encode_action(a, cfg) == ((2 * 6 + 3) * 25 + 7) * 25 + 11
        assert decode_action(encode_action(a, cfg), cfg) == a

    @given(st.integers(0, 18_749))
    def test_round_trip(self, idx):
        cfg = paper_episode_config()
        assert encode_action(decode_action(idx, cfg), cfg) == idx

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            decode_action(18_750, paper_episode_config())


class TestReward:
    def test_stable_volume_share(self, paper_grid):
        assert reward(StabilityVerdict(True), soft(0), paper_grid) == pytest.approx(216 / 12500)

    def test_unstable(self, paper_grid):
        assert reward(StabilityVerdict(False, Cause.CRUSH_COLLAPSE, 1), hard(0), paper_grid) == 0.0

    def test_empty_slot(self, paper_grid):
        assert reward(None, None, paper_grid) == -1.0

    def test_utilization(self, paper_grid):
        assert space_utilization(PalletState(paper_grid)) == 0.0
        p = build_pallet(paper_grid, [(hard(0, (8, 6, 6)), 0, 0, 0)])
        assert space_utilization(p) == pytest.approx(0.02304)

    def test_full_inventory_max_utilization(self):
        total = sum(np.prod(bt.dims) * n for bt, n in FULL_INVENTORY)
        assert total / 12500 == pytest.approx(0.6912)


class TestSnap:
    def test_identity(self):
        bits = np.ones((5, 5), dtype=bool)
        assert snap(bits, 2, 3, np.random.default_rng(0)) == (2, 3)

    def test_unique_nearest(self):
        bits = np.zeros((25, 25), dtype=bool)
        bits[0, 0] = True
        assert snap(bits, 24, 24, np.random.default_rng(0)) == (0, 0)

    def test_empty(self):
        assert snap(np.zeros((3, 3), dtype=bool), 1, 1, np.random.default_rng(0)) is None

    def test_ties_are_seeded_and_cover_all(self):
        bits = np.zeros((5, 5), dtype=bool)
        bits[0, 2] = bits[4, 2] = True
        picks = {snap(bits, 2, 2, np.random.default_rng(s)) for s in range(40)}
        assert picks == {(0, 2), (4, 2)}
        assert snap(bits, 2, 2, np.random.default_rng(9)) == snap(bits, 2, 2, np.random.default_rng(9))


class TestStep:
    def setup_method(self):
        self.cfg = desk_episode_config(0)
        self.pallet, self.buf = reset(self.cfg)

    def test_empty_slot_penalty(self):
        buf = BufferState((None, self.buf.slots[1]), self.buf.remaining)
        p2, b2, out = step(self.pallet, buf, Action(0, 0, 0, 0), PassThroughMask())
        assert out.reward == -1.0 and not out.done and out.end_reason is None
        assert p2 is self.pallet and b2 is buf

    def test_placed_at_target(self):
        p2, b2, out = step(self.pallet, self.buf, Action(0, 0, 2, 3), PassThroughMask())
        assert out.info["position"] == (2, 3)
        assert p2.placed[0].x == 2 and p2.placed[0].y == 3
        assert out.reward == pytest.approx(self.buf.slots[0].volume / 1000)
        assert b2.boxes_left == self.buf.boxes_left - 1

    def test_snaps_to_single_feasible(self):
        mask = single_cell_mask((10, 10), 0, 0)
        p2, _, out = step(self.pallet, self.buf, Action(0, 0, 9, 9), mask)
        assert out.info["position"] == (0, 0)

    def test_empty_mask_infeasible(self):
        mask = FixedMask(FeasibilityMap(np.zeros((10, 10), dtype=bool)))
        p2, b2, out = step(self.pallet, self.buf, Action(0, 0, 0, 0), mask)
        assert out.done and out.end_reason is EndReason.INFEASIBLE and out.reward == 0.0
        assert p2 is self.pallet

    def test_unstable_terminates_without_keeping_box(self):
        grid = GridConfig(10, 10, 10)
        pallet = build_pallet(grid, [(soft(0, (3, 3, 3)), 0, 0, 0)])
        buf = BufferState((hard(1, (3, 3, 3)),))
        p2, _, out = step(pallet, buf, Action(0, 0, 0, 0), PassThroughMask())
        assert out.done and out.end_reason is EndReason.UNSTABLE and out.reward == 0.0
        assert out.info["verdict"].cause is Cause.CRUSH_COLLAPSE
        assert p2 == pallet

    def test_success(self):
        grid = GridConfig(4, 4, 4)
        cfg = EpisodeConfig(grid, ((BoxType((2, 2, 2), 500.0, 0.5), 2),), 1, 0)
        pallet, buf = reset(cfg)
        pallet, buf, out = step(pallet, buf, Action(0, 0, 0, 0), PassThroughMask())
        assert not out.done
        pallet, buf, out = step(pallet, buf, Action(0, 0, 2, 2), PassThroughMask())
        assert out.done and out.end_reason is EndReason.SUCCESS
        assert out.info["utilization"] == pytest.approx(16 / 64)

    def test_mask_respects_height(self):
        grid = GridConfig(3, 3, 4)
        pallet = build_pallet(grid, [(soft(0, (3, 3, 3)), 0, 0, 0)])
        assert not placeable(pallet, soft(1, (1, 1, 2)), 0).any()
        assert placeable(pallet, soft(1, (1, 1, 1)), 0).all()


class TestPalletEnv:
    def test_done_guard(self):
        env = PalletEnv(desk_episode_config())
        with pytest.raises(EpisodeDone):
            env.step(Action(0, 0, 0, 0), PassThroughMask())
        env.reset(1)
        env.done = True
        with pytest.raises(EpisodeDone):
            env.step(Action(0, 0, 0, 0), PassThroughMask())

    def test_episode_reproducible(self):
        def run(seed):
            env = PalletEnv(desk_episode_config())
            env.reset(seed)
            rng = np.random.default_rng(0)
            trace = []
            while not env.done:
                out = env.step(random_action(env.cfg, rng, env.buffer.occupied_slots()), PassThroughMask())
                trace.append((out.reward, out.info.get("position")))
            return trace

        assert run(5) == run(5)


def _rollout(seed: int, provider, cfg: EpisodeConfig):
    env = PalletEnv(cfg)
    env.reset(seed)
    rng = np.random.default_rng(seed + 1)
    total, out = 0.0, None
    while not env.done:
        out = env.step(random_action(cfg, rng, env.buffer.occupied_slots()), provider)
        total += out.reward
    return total, out


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_telescoping(seed):
    total, out = _rollout(seed, PassThroughMask(), desk_episode_config())
    assert total == pytest.approx(out.info["utilization"], abs=1e-9)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_oracle_mask_never_unstable(seed):
    _, out = _rollout(seed, OracleMask(), desk_episode_config())
    assert out.end_reason is not EndReason.UNSTABLE


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_one_end_reason_per_episode(seed):
    env = PalletEnv(desk_episode_config())
    env.reset(seed)
    rng = np.random.default_rng(seed)
    reasons = []
    while not env.done:
        out = env.step(random_action(env.cfg, rng), PassThroughMask())
        assert (out.end_reason is not None) == out.done
        reasons.append(out.end_reason)
    assert sum(r is not None for r in reasons) == 1
    if reasons[-1] is EndReason.SUCCESS:
        assert len(env.pallet) == env.cfg.total_boxes
