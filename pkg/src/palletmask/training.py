"""Rollout engine and the joint policy / mask training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .baselines import HeuristicMask, PlannerKind
from .env import (
    Action,
    EndReason,
    EpisodeConfig,
    FixedMask,
    MaskProvider,
    PalletEnv,
    PassThroughMask,
    decode_action,
    encode_action,
    placeable,
    random_action,
)
from .masklearn import (
    DATASET_CAPACITY,
    RECORD_PROBABILITY,
    FeasibilityMaskClassifier,
    FeasibleDataset,
    LearnedMask,
    MaskSample,
    annotate_batch,
    record,
    train_epochs,
)
from .oracle import FeasibilityMap, OracleConfig
from .policy import ActorCritic, PolicyObservation, PpoConfig, RolloutBuffer, act_batch, update

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskLearningConfig:
    enabled: bool = True
    record_probability: float = RECORD_PROBABILITY
    dataset_capacity: int = DATASET_CAPACITY
    epochs: int = 2
    threshold: float = 0.5
    hidden: int = 48
    learning_rate: float = 5e-4
    batch_size: int = 64
    workers: int = 1
    split_seed: int = 0

    def __post_init__(self):
        if not 0 <= self.record_probability <= 1:
            raise ValueError("record_probability must lie in [0, 1]")
        if self.dataset_capacity < 1 or self.epochs < 0 or self.workers < 1:
            raise ValueError("dataset_capacity and workers must be positive, epochs non-negative")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "MaskLearningConfig":
        return cls(**d)


@dataclass
class EpisodeResult:
    seed: int
    reward: float
    length: int
    utilization: float
    end_reason: EndReason
    records: list = field(default_factory=list)


def _batch_masks(provider: MaskProvider, queries: list) -> list[FeasibilityMap]:
    if hasattr(provider, "batch"):
        return provider.batch(queries)
    return [provider(*q) for q in queries]


class VecRollout:
    """``E`` independent environments stepped in lock-step.

    Every episode draws its box order and its tie-breaking stream from its own
    seed, so an episode's outcome does not depend on which slot ran it.
    Environments whose ``done`` flag is set when :meth:`step` is called sit idle.
    """

    def __init__(
        self,
        env_cfg: EpisodeConfig,
        oracle_cfg: OracleConfig,
        n_envs: int,
        seed: int,
        kind: PlannerKind,
        episode_seeds: Sequence[int] | None = None,
    ):
        self.env_cfg = env_cfg
        self.kind = PlannerKind(kind)
        self.seed_rng = np.random.default_rng([seed, 7])
        self.queue = None if episode_seeds is None else iter(list(episode_seeds))
        self.envs = [PalletEnv(env_cfg, oracle_cfg) for _ in range(n_envs)]
        self.ep_reward = np.zeros(n_envs)
        self.ep_len = np.zeros(n_envs, dtype=int)
        self.ep_records: list[list] = [[] for _ in range(n_envs)]
        for env in self.envs:
            self._reset(env)

    def _reset(self, env: PalletEnv) -> None:
        if self.queue is None:
            env.reset(int(self.seed_rng.integers(2**31)))
            return
        nxt = next(self.queue, None)
        if nxt is None:
            env.done = True
        else:
            env.reset(int(nxt))

    def live(self) -> list[int]:
        return [e for e, env in enumerate(self.envs) if not env.done]

    def observations(self, which: Sequence[int] | None = None) -> list[PolicyObservation]:
        which = range(len(self.envs)) if which is None else which
        return [PolicyObservation.from_state(self.envs[e].pallet, self.envs[e].buffer) for e in which]

    def step(
        self,
        indices: Sequence[int],
        provider: MaskProvider,
        on_transition: Callable | None = None,
        log_records: bool = False,
    ) -> tuple[np.ndarray, np.ndarray, list[EpisodeResult | None]]:
        """Apply one flat action per environment.

        Returns rewards, done flags and, for environments whose episode ended,
        the finished :class:`EpisodeResult` (the environment is then reset).
        """
        E = len(self.envs)
        live = self.live()
        actions: dict[int, Action] = {}
        for e in live:
            env = self.envs[e]
            a = decode_action(int(indices[e]), self.env_cfg)
            if self.kind is PlannerKind.RANDOM_SELECTION:
                occupied = env.buffer.occupied_slots()
                if occupied:
                    a = replace(a, slot=int(env.rng.choice(occupied)))
            actions[e] = a
        queries, owners = [], []
        for e, a in actions.items():
            box = self.envs[e].selected_box(a)
            if box is not None:
                queries.append((self.envs[e].pallet, box, a.orientation))
                owners.append(e)
        maps: dict[int, FeasibilityMap] = dict(zip(owners, _batch_masks(provider, queries)))

        rewards = np.zeros(E)
        dones = np.zeros(E)
        finished: list[EpisodeResult | None] = [None] * E
        for e, a in actions.items():
            env = self.envs[e]
            fmap = maps.get(e)
            box = env.selected_box(a)
            if fmap is not None and self.kind is PlannerKind.RANDOM_PLACEMENT:
                pos = np.argwhere(fmap.bits & placeable(env.pallet, box, a.orientation))
                if len(pos):
                    x, y = pos[env.rng.integers(len(pos))]
                    a = replace(a, x=int(x), y=int(y))
            pallet_before = env.pallet
            out = env.step(a, FixedMask(fmap) if fmap is not None else PassThroughMask())
            if on_transition is not None and box is not None:
                on_transition(pallet_before, box, a.orientation, out)
            rewards[e] = out.reward
            dones[e] = float(out.done)
            self.ep_reward[e] += out.reward
            self.ep_len[e] += 1
            if log_records:
                self.ep_records[e].append(_step_record(a, out))
            if out.done:
                finished[e] = EpisodeResult(
                    env.episode_seed,
                    float(self.ep_reward[e]),
                    int(self.ep_len[e]),
                    float(out.info["utilization"]),
                    out.end_reason,
                    self.ep_records[e],
                )
                self.ep_reward[e] = 0.0
                self.ep_len[e] = 0
                self.ep_records[e] = []
                self._reset(env)
        return rewards, dones, finished


def _step_record(a: Action, out) -> dict:
    verdict = out.info.get("verdict")
    pos = out.info.get("position")
    return {
        "action": [a.slot, a.orientation, a.x, a.y],
        "box_id": out.info.get("box_id"),
        "snapped": [int(pos[0]), int(pos[1])] if pos is not None else None,
        "verdict": verdict.to_dict() if verdict is not None else None,
        "reward": float(out.reward),
        "end_reason": out.end_reason.value if out.end_reason is not None else None,
    }


def default_provider(kind: PlannerKind, mask_model: FeasibilityMaskClassifier | None) -> MaskProvider:
    if kind is PlannerKind.NOMASK:
        return PassThroughMask()
    if kind is PlannerKind.HEURISTIC:
        return HeuristicMask()
    return LearnedMask(mask_model)


def make_mask_model(env_cfg: EpisodeConfig, mask_cfg: MaskLearningConfig, seed: int) -> FeasibilityMaskClassifier:
    dims = [bt.dims for bt, _ in env_cfg.inventory]
    density = max(bt.density for bt, _ in env_cfg.inventory)
    rigidity = max(bt.rigidity for bt, _ in env_cfg.inventory)
    model = FeasibilityMaskClassifier(
        hidden=mask_cfg.hidden,
        max_box_dim=max(max(d) for d in dims),
        learning_rate=mask_cfg.learning_rate,
        batch_size=mask_cfg.batch_size,
        epochs=mask_cfg.epochs,
        threshold=mask_cfg.threshold,
        density_scale=density,
        rigidity_scale=rigidity,
        random_state=seed,
    )
    return model.initialize()


def make_policy(env_cfg: EpisodeConfig, ppo_cfg: PpoConfig, seed: int) -> ActorCritic:
    torch.manual_seed(seed)
    density = max(bt.density for bt, _ in env_cfg.inventory)
    rigidity = max(bt.rigidity for bt, _ in env_cfg.inventory)
    return ActorCritic(env_cfg, ppo_cfg.hidden, density, rigidity)


@dataclass
class TrainingResult:
    policy: ActorCritic
    optimizer: torch.optim.Optimizer
    mask_model: FeasibilityMaskClassifier | None
    dataset: FeasibleDataset | None
    metrics: list[dict]
    timesteps: int


def end_reason_frequencies(episodes: Sequence[EpisodeResult]) -> dict[str, float]:
    n = len(episodes)
    return {
        r.value: (sum(ep.end_reason is r for ep in episodes) / n if n else math.nan)
        for r in (EndReason.INFEASIBLE, EndReason.UNSTABLE, EndReason.SUCCESS)
    }


def training_loop(
    env_cfg: EpisodeConfig,
    ppo_cfg: PpoConfig,
    mask_cfg: MaskLearningConfig = MaskLearningConfig(),
    oracle_cfg: OracleConfig = OracleConfig(),
    kind: PlannerKind = PlannerKind.OLMASK,
    seed: int = 0,
    mask_provider: MaskProvider | None = None,
    progress: Callable[[dict], None] | None = None,
) -> TrainingResult:
    """Alternate rollouts and updates.

    During a rollout the mask model is frozen. At each update the recorded
    samples are annotated and appended to the feasible dataset, the mask model
    is trained on it, and then the policy takes its PPO step. An explicit
    ``mask_provider`` replaces the planner's own mask and disables mask learning.
    """
    kind = PlannerKind(kind)
    rng = np.random.default_rng([seed, 0])
    policy = make_policy(env_cfg, ppo_cfg, seed)
    optimizer = torch.optim.Adam(policy.parameters(), lr=ppo_cfg.learning_rate, eps=1e-5)

    learning = mask_provider is None and kind.learns_mask
    mask_model = make_mask_model(env_cfg, mask_cfg, seed) if learning else None
    dataset = FeasibleDataset(mask_cfg.dataset_capacity) if learning else None
    provider = mask_provider if mask_provider is not None else default_provider(kind, mask_model)
    pending: list[MaskSample] = []

    def on_transition(pallet, box, orientation, out):
        if not learning or not mask_cfg.enabled:
            return
        unstable = out.end_reason is EndReason.UNSTABLE
        sample = MaskSample(pallet, box, orientation, int(rng.integers(2**31)))
        record(sample, unstable, rng, pending, mask_cfg.record_probability)

    T, E = ppo_cfg.rollout_length, ppo_cfg.parallel_envs
    n_updates = ppo_cfg.total_timesteps // (T * E)
    vec = VecRollout(env_cfg, oracle_cfg, E, seed, kind)
    obs = vec.observations()
    metrics: list[dict] = []
    timesteps = 0
    for u in range(n_updates):
        buf = RolloutBuffer(T, E, env_cfg)
        finished: list[EpisodeResult] = []
        for _ in range(T):
            idx, logp, values = act_batch(policy, obs, rng)
            rewards, dones, ended = vec.step(idx, provider, on_transition)
            buf.add(obs, idx, logp, values, rewards, dones)
            finished.extend(ep for ep in ended if ep is not None)
            obs = vec.observations()
        timesteps += T * E
        _, _, last_value = act_batch(policy, obs, rng)

        val_iou = math.nan
        if learning and mask_cfg.enabled:
            annotated = annotate_batch(pending, oracle_cfg, mask_cfg.workers)
            pending.clear()
            dataset.extend(annotated)
            if len(dataset) and mask_cfg.epochs > 0:
                mask_model, val_iou = train_epochs(mask_model, dataset, mask_cfg.epochs, mask_cfg.split_seed)

        stats = update(policy, optimizer, buf, last_value, ppo_cfg, rng)
        row = {
            "timestep": timesteps,
            "update": u + 1,
            "val_iou": val_iou,
            "episodes": len(finished),
            **end_reason_frequencies(finished),
            "utilization": float(np.mean([ep.utilization for ep in finished])) if finished else math.nan,
            "episode_reward": float(np.mean([ep.reward for ep in finished])) if finished else math.nan,
            "episode_length": float(np.mean([ep.length for ep in finished])) if finished else math.nan,
            "dataset_size": len(dataset) if dataset is not None else 0,
            **stats,
        }
        metrics.append(row)
        log.info(
            "update %d t=%d iou=%.3f util=%.3f unstable=%.2f infeasible=%.2f success=%.2f",
            row["update"],
            timesteps,
            val_iou,
            row["utilization"],
            row[EndReason.UNSTABLE.value],
            row[EndReason.INFEASIBLE.value],
            row[EndReason.SUCCESS.value],
        )
        if progress is not None:
            progress(row)
    return TrainingResult(policy, optimizer, mask_model, dataset, metrics, timesteps)


def evaluation_seeds(seed: int, episodes: int) -> list[int]:
    return [int(s) for s in np.random.default_rng([seed, 11]).integers(2**31, size=episodes)]


def evaluate(
    policy: ActorCritic | None,
    provider: MaskProvider,
    kind: PlannerKind,
    env_cfg: EpisodeConfig,
    oracle_cfg: OracleConfig,
    episodes: int,
    seed: int,
    greedy: bool = True,
    n_envs: int = 8,
    log_records: bool = False,
) -> list[EpisodeResult]:
    """Run ``episodes`` fresh episodes and return them in seed order.

    ``policy=None`` acts uniformly at random over occupied slots.
    """
    seeds = evaluation_seeds(seed, episodes)
    position = {s: i for i, s in enumerate(seeds)}
    vec = VecRollout(env_cfg, oracle_cfg, max(1, min(n_envs, episodes)), seed, kind, episode_seeds=seeds)
    act_rng = np.random.default_rng([seed, 13])
    results: list[EpisodeResult | None] = [None] * episodes
    remaining = episodes
    while remaining:
        live = vec.live()
        idx = np.zeros(len(vec.envs), dtype=np.int64)
        if policy is None:
            for e in live:
                slots = vec.envs[e].buffer.occupied_slots()
                idx[e] = encode_action(random_action(env_cfg, act_rng, slots), env_cfg)
        else:
            chosen, _, _ = act_batch(policy, vec.observations(live), act_rng, greedy=greedy, env_cfg=env_cfg)
            idx[live] = chosen
        _, _, ended = vec.step(idx, provider, log_records=log_records)
        for ep in ended:
            if ep is not None:
                results[position[ep.seed]] = ep
                remaining -= 1
    return results
