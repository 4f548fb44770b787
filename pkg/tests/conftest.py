import numpy as np
import pytest
import torch

from palletmask.geometry import BoxSpec, GeometryError, GridConfig, PalletState, oriented_dims, place

torch.set_num_threads(1)

SOFT = dict(density=500.0, rigidity=0.5)
HARD = dict(density=5000.0, rigidity=3.0)


def soft(i, dims=(6, 6, 6)):
    return BoxSpec(i, dims, **SOFT)


def hard(i, dims=(6, 6, 6)):
    return BoxSpec(i, dims, **HARD)


@pytest.fixture
def paper_grid():
    return GridConfig(25, 25, 20)


@pytest.fixture
def desk_grid():
    return GridConfig(10, 10, 10)


def random_pallet(rng: np.random.Generator, grid: GridConfig, n_boxes: int, dims_choices=None) -> PalletState:
    """Drop random boxes at random positions, skipping drops that would not fit."""

    dims_choices = dims_choices or [(3, 3, 2), (3, 3, 3), (4, 3, 3), (2, 2, 2)]
    pallet = PalletState(grid)
    for i in range(n_boxes):
        dims = dims_choices[rng.integers(len(dims_choices))]
        kind = SOFT if rng.random() < 0.5 else HARD
        box = BoxSpec(i, dims, **kind)
        o = int(rng.integers(6))
        ox, oy, _ = oriented_dims(box, o)
        if ox > grid.length_cells or oy > grid.width_cells:
            continue
        x = int(rng.integers(grid.length_cells - ox + 1))
        y = int(rng.integers(grid.width_cells - oy + 1))
        try:
            pallet = place(pallet, pallet.placement(box, o, x, y))
        except GeometryError:
            continue
    return pallet


def tiny_experiment(tmp_path=None, planner="olmask", seeds=(0,), timesteps=64, **kw):
    """A seconds-scale experiment on a 4x4x4 pallet with two boxes."""
    from palletmask.env import BoxType, EpisodeConfig
    from palletmask.harness import ExperimentConfig
    from palletmask.policy import PpoConfig
    from palletmask.training import MaskLearningConfig

    env = EpisodeConfig(
        GridConfig(4, 4, 4), ((BoxType((2, 2, 2), 500.0, 0.5), 1), (BoxType((2, 2, 2), 5000.0, 3.0), 1)), 1, 0
    )
    return ExperimentConfig(
        env=env,
        ppo=PpoConfig(rollout_length=16, parallel_envs=2, minibatch_size=16, epochs_per_update=1, total_timesteps=timesteps, hidden=16),
        mask=MaskLearningConfig(hidden=8, dataset_capacity=200, record_probability=0.5),
        planner=planner,
        seeds=seeds,
        output_dir=str(tmp_path) if tmp_path is not None else None,
        eval_episodes=kw.pop("eval_episodes", 6),
        eval_envs=kw.pop("eval_envs", 3),
        **kw,
    )


CRITERIA_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` prints one PASS/FAIL line, then asserts ``ok``."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def report(n: int, ok: bool, detail: str) -> None:
        line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}"
        CRITERIA_LINES.append(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        assert ok, detail

    return report


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES):
            terminalreporter.write_line(line)
