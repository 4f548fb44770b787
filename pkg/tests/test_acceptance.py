"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk-scale training criteria (3 and 4) share one session fixture that
trains and evaluates OLMask, HeuristicMask and Nomask over three seeds; it is
by far the slowest part of the suite.
"""
import time

import numpy as np
import pytest
import torch

from conftest import HARD, SOFT, random_pallet, tiny_experiment
from palletmask.baselines import PlannerKind
from palletmask.env import (
    DESK_INVENTORY,
    EndReason,
    OracleMask,
    PalletEnv,
    PassThroughMask,
    desk_episode_config,
    random_action,
)
from palletmask.geometry import BoxSpec, GridConfig, PalletState, build_pallet, oriented_dims, place
from palletmask.harness import desk_preset, read_curve, run_experiment
from palletmask.masklearn import MaskSample, annotate_batch
from palletmask.oracle import Cause, OracleConfig, annotate_feasibility, check_placement, propagate_loads
from palletmask.policy import ppo_loss, PpoConfig
from palletmask.training import end_reason_frequencies, evaluate, training_loop
from test_policy import TINY, finite_difference_check, toy_problem

ZERO = OracleConfig().without_noise()


# -- 1 ------------------------------------------------------------------------


def _oracle_suite() -> dict[str, int]:
    grid = GridConfig(8, 8, 8)
    empty = PalletState(grid)
    counts = dict(floor=0, starved=0, crush=0, soft_on_soft=0, conservation=0)
    failures = []

    # every footprint, height and floor anchor, both materials
    for kind in (SOFT, HARD):
        for a in range(1, 9):
            for b in range(1, 9):
                for c in range(1, 9):
                    box = BoxSpec(0, (a, b, c), **kind)
                    for x in range(9 - a):
                        for y in range(9 - b):
                            counts["floor"] += 1
                            if not check_placement(empty, empty.placement(box, 0, x, y), cfg=ZERO).stable:
                                failures.append(("floor", a, b, c, x, y))

    # a 2x2 post and every top footprint / anchor resting on it with under a quarter support
    post = BoxSpec(0, (2, 2, 2), **SOFT)
    base = build_pallet(grid, [(post, 0, 3, 3)])
    for a in range(1, 9):
        for b in range(1, 9):
            top = BoxSpec(1, (a, b, 1), **SOFT)
            for x in range(9 - a):
                for y in range(9 - b):
                    p = base.placement(top, 0, x, y)
                    if p.z != 2:
                        continue
                    overlap = max(0, min(x + a, 5) - max(x, 3)) * max(0, min(y + b, 5) - max(y, 3))
                    if overlap / (a * b) < 0.25:
                        counts["starved"] += 1
                        v = check_placement(base, p, cfg=ZERO)
                        if v.stable or v.cause is not Cause.INSUFFICIENT_SUPPORT:
                            failures.append(("starved", a, b, x, y))

    # full-footprint stacks: hard on soft crushes, soft on soft holds
    for a in range(1, 9):
        for b in range(1, 9):
            lower = build_pallet(grid, [(BoxSpec(0, (a, b, 2), **SOFT), 0, 0, 0)])
            for c in range(2, 7):
                counts["crush"] += 1
                v = check_placement(lower, lower.placement(BoxSpec(1, (a, b, c), **HARD), 0, 0, 0), cfg=ZERO)
                if v.stable or v.cause is not Cause.CRUSH_COLLAPSE or v.crushed_box_id != 0:
                    failures.append(("crush", a, b, c))
                counts["soft_on_soft"] += 1
                if not check_placement(lower, lower.placement(BoxSpec(1, (a, b, c), **SOFT), 0, 0, 0), cfg=ZERO).stable:
                    failures.append(("soft_on_soft", a, b, c))

    # load conservation: a 3x3x2 block then a 4x4x1 slab and a 2x2x2 cube at every anchor that rests on something
    first = build_pallet(grid, [(BoxSpec(0, (3, 3, 2), **HARD), 0, 2, 2)])
    slab = BoxSpec(1, (4, 4, 1), **SOFT)
    cube = BoxSpec(2, (2, 2, 2), **HARD)
    for x in range(5):
        for y in range(5):
            second = place(first, first.placement(slab, 0, x, y))
            for u in range(7):
                for v in range(7):
                    p = second.placement(cube, 0, u, v)
                    if p.z + 2 > 8:
                        continue
                    third = place(second, p)
                    _, floor, _ = propagate_loads(third)
                    total = sum(q.box.mass for q in third.placed)
                    counts["conservation"] += 1
                    if abs(floor - total) > 1e-9 * total:
                        failures.append(("conservation", x, y, u, v))
    counts["failures"] = failures
    return counts


def test_criterion_1_oracle_behaviour_suite(criterion):
    t = time.perf_counter()
    counts = _oracle_suite()
    elapsed = time.perf_counter() - t
    failures = counts.pop("failures")
    ok = not failures and elapsed < 10.0 and all(v > 0 for v in counts.values())
    criterion(1, ok, f"{sum(counts.values())} cases {counts}, {len(failures)} failures, {elapsed:.2f}s (< 10s)")


# -- 2 ------------------------------------------------------------------------


def _direct_map(pallet, box, o):
    L, W, H = pallet.config.shape
    ox, oy, oz = oriented_dims(box, o)
    bits = np.zeros((L, W), dtype=bool)
    for x in range(L - ox + 1):
        for y in range(W - oy + 1):
            p = pallet.placement(box, o, x, y)
            bits[x, y] = p.z + oz <= H and check_placement(pallet, p, cfg=ZERO).stable
    return bits


def test_criterion_2_annotation_matches_direct_loop(criterion):
    rng = np.random.default_rng(2024)
    grid = desk_episode_config().grid
    types = [bt for bt, _ in DESK_INVENTORY]
    k1 = OracleConfig(noise_sigma_xy=0.0, noise_sigma_rot_deg=0.0, noise_samples=1)
    mismatched = cells = 0
    for i in range(100):
        pallet = random_pallet(rng, grid, int(rng.integers(0, 13)), dims_choices=[bt.dims for bt in types])
        bt = types[rng.integers(len(types))]
        box = BoxSpec(1000, bt.dims, bt.density, bt.rigidity)
        o = int(rng.integers(6))
        fast = annotate_feasibility(pallet, box, o, k1, i).bits
        slow = _direct_map(pallet, box, o)
        mismatched += int((fast != slow).sum())
        cells += fast.size
    criterion(2, mismatched == 0, f"{mismatched} of {cells} cells differ over 100 desk pallets")


# -- 3 and 4 ------------------------------------------------------------------

PLANNERS = (PlannerKind.OLMASK, PlannerKind.HEURISTIC, PlannerKind.NOMASK)


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    t = time.perf_counter()
    reports = {}
    for kind in PLANNERS:
        cfg = desk_preset().replace(planner=kind, output_dir=str(root / kind.value))
        reports[kind] = run_experiment(cfg)
    return reports, root, time.perf_counter() - t


@pytest.mark.slow
def test_criterion_3_mask_iou_desk(desk_runs, criterion):
    _, root, _ = desk_runs
    curve = read_curve(root / "olmask" / "curve_mean.csv")
    last = curve[-10:]
    final = float(np.mean([r["val_iou"] for r in last]))
    steps = int(curve[-1]["timestep"])
    ok = final >= 0.90 and steps <= 200_000
    criterion(3, ok, f"seed-mean val IoU over the last {len(last)} updates = {final:.3f} (>= 0.90) at {steps} steps (<= 200k)")


@pytest.mark.slow
def test_criterion_4_planner_ordering(desk_runs, criterion):
    reports, _, elapsed = desk_runs
    util = {k.value: reports[k].mean["space_utilization"] for k in PLANNERS}
    unstable = {k.value: reports[k].mean["unstable_rate"] for k in PLANNERS}
    ok = (
        util["olmask"] > util["heuristic"]
        and util["olmask"] > util["nomask"]
        and unstable["olmask"] < 0.10
        and unstable["nomask"] > 0.80
        and elapsed < 7200
    )
    fmt = lambda d: ", ".join(f"{k}={v:.3f}" for k, v in d.items())
    criterion(4, ok, f"utilization {fmt(util)}; unstable {fmt(unstable)}; {elapsed / 60:.1f} min (< 120)")


# -- 5 ------------------------------------------------------------------------


def test_criterion_5_oracle_mask_never_unstable(criterion):
    cfg = desk_episode_config()
    episodes = evaluate(None, OracleMask(), PlannerKind.NOMASK, cfg, OracleConfig(), 1000, seed=5, n_envs=16)
    freq = end_reason_frequencies(episodes)
    n_unstable = sum(e.end_reason is EndReason.UNSTABLE for e in episodes)
    criterion(5, n_unstable == 0 and len(episodes) == 1000, f"{n_unstable} unstable of {len(episodes)} episodes; rates {freq}")


# -- 6 ------------------------------------------------------------------------


def test_criterion_6_reward_telescopes(criterion):
    cfg = desk_episode_config()
    env = PalletEnv(cfg)
    rng = np.random.default_rng(6)
    worst, penalties = 0.0, 0
    for ep in range(1000):
        env.reset(ep)
        total = 0.0
        while not env.done:
            out = env.step(random_action(cfg, rng, env.buffer.occupied_slots()), PassThroughMask())
            penalties += out.reward < 0
            total += out.reward
        worst = max(worst, abs(total - out.info["utilization"]))
    criterion(6, worst <= 1e-9 and penalties == 0, f"max |sum r - utilization| = {worst:.2e} over 1000 episodes, {penalties} penalties")


# -- 7 ------------------------------------------------------------------------


def test_criterion_7_gradients_and_trivial_ppo(criterion):
    net, x, actions, old_logp, adv, ret = toy_problem(n_actions=10)

    def loss():
        out = net(x)
        return ppo_loss(out[:, :10], out[:, 10], actions, old_logp, adv, ret, PpoConfig())[0]

    rel = finite_difference_check(loss, list(net.parameters()))

    torch.manual_seed(0)
    ppo = PpoConfig(rollout_length=64, parallel_envs=8, minibatch_size=128, total_timesteps=50_000, hidden=64, learning_rate=1e-3)
    res = training_loop(TINY, ppo, kind=PlannerKind.NOMASK, seed=0)
    eps = evaluate(res.policy, PassThroughMask(), PlannerKind.NOMASK, TINY, OracleConfig(), 200, seed=0)
    success = end_reason_frequencies(eps)["Success"]
    ok = rel < 1e-4 and success == 1.0 and res.timesteps <= 50_000
    criterion(7, ok, f"gradient relative error {rel:.2e} (< 1e-4); greedy success {success:.3f} after {res.timesteps} steps")


# -- 8 ------------------------------------------------------------------------


def test_criterion_8_determinism(tmp_path, criterion):
    same = []
    for planner in ("olmask", "heuristic"):
        a, b = tmp_path / f"{planner}_a", tmp_path / f"{planner}_b"
        cfg = tiny_experiment(seeds=(0, 1), timesteps=128, planner=planner)
        run_experiment(cfg.replace(output_dir=str(a)))
        run_experiment(cfg.replace(output_dir=str(b)))
        for name in ("curve_seed0.csv", "curve_seed1.csv", "curve_mean.csv", "replay_seed0.jsonl", "replay_seed1.jsonl", "report.json"):
            same.append((a / name).read_bytes() == (b / name).read_bytes())

    rng = np.random.default_rng(8)
    grid = desk_episode_config().grid
    pending = [
        MaskSample(random_pallet(rng, grid, int(rng.integers(0, 10))), BoxSpec(500, (3, 3, 2), **SOFT), int(rng.integers(6)), seed=i)
        for i in range(24)
    ]
    labels = [[s.label for s in annotate_batch(pending, OracleConfig(), workers=w)] for w in (1, 2, 4)]
    annotations_same = labels[0] == labels[1] == labels[2]
    ok = all(same) and annotations_same
    criterion(8, ok, f"{sum(same)}/{len(same)} artifacts byte-identical; annotations equal across 1/2/4 workers: {annotations_same}")
