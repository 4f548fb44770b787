"""Estimator-style facade over the training loop and greedy evaluation."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .baselines import PlannerKind
from .env import BufferState, EpisodeConfig, decode_action, desk_episode_config
from .geometry import PalletState
from .oracle import OracleConfig
from .policy import PolicyObservation, PpoConfig, act_batch
from .training import MaskLearningConfig, default_provider, evaluate, training_loop
from .validation import check_pallet


class PalletPlanner(BaseEstimator):
    """Trains a placement policy (and, for learned-mask planners, its mask) with ``fit``.

    ``predict`` maps ``(pallet, buffer)`` pairs to greedy actions and ``score``
    returns mean space utilisation over fresh evaluation episodes.
    """

    def __init__(
        self,
        planner: str = "olmask",
        env_cfg: EpisodeConfig | None = None,
        total_timesteps: int = 200_000,
        rollout_length: int = 128,
        parallel_envs: int = 8,
        learning_rate: float = 3e-4,
        mask_hidden: int = 48,
        dataset_capacity: int = 3000,
        eval_episodes: int = 100,
        random_state: int = 0,
    ):
        self.planner = planner
        self.env_cfg = env_cfg
        self.total_timesteps = total_timesteps
        self.rollout_length = rollout_length
        self.parallel_envs = parallel_envs
        self.learning_rate = learning_rate
        self.mask_hidden = mask_hidden
        self.dataset_capacity = dataset_capacity
        self.eval_episodes = eval_episodes
        self.random_state = random_state

    def _env(self) -> EpisodeConfig:
        return self.env_cfg if self.env_cfg is not None else desk_episode_config()

    def fit(self, X=None, y=None):
        """Train from scratch; ``X`` and ``y`` are ignored since the data is generated by rollouts."""
        kind = PlannerKind(self.planner)
        ppo = PpoConfig(
            learning_rate=self.learning_rate,
            rollout_length=self.rollout_length,
            parallel_envs=self.parallel_envs,
            minibatch_size=min(256, self.rollout_length * self.parallel_envs),
            total_timesteps=self.total_timesteps,
        )
        mask = MaskLearningConfig(hidden=self.mask_hidden, dataset_capacity=self.dataset_capacity)
        res = training_loop(self._env(), ppo, mask, OracleConfig(), kind, self.random_state)
        self.policy_ = res.policy
        self.mask_model_ = res.mask_model
        self.metrics_ = res.metrics
        self.n_timesteps_ = res.timesteps
        return self

    def _check_fitted(self):
        if not hasattr(self, "policy_"):
            raise NotFittedError("call fit first")

    def predict(self, X: Sequence[tuple[PalletState, BufferState]]) -> np.ndarray:
        """Greedy flat action index for each ``(pallet, buffer)`` pair."""
        self._check_fitted()
        obs = []
        for pallet, buffer in X:
            check_pallet(pallet)
            if not isinstance(buffer, BufferState):
                raise TypeError(f"expected BufferState, got {type(buffer).__name__}")
            obs.append(PolicyObservation.from_state(pallet, buffer))
        if not obs:
            return np.zeros(0, dtype=np.int64)
        idx, _, _ = act_batch(self.policy_, obs, np.random.default_rng(0), greedy=True, env_cfg=self._env())
        return idx

    def decode(self, index: int):
        return decode_action(int(index), self._env())

    def evaluate(self, episodes: int | None = None, seed: int | None = None):
        self._check_fitted()
        kind = PlannerKind(self.planner)
        return evaluate(
            self.policy_,
            default_provider(kind, self.mask_model_),
            kind,
            self._env(),
            OracleConfig(),
            episodes or self.eval_episodes,
            self.random_state if seed is None else seed,
        )

    def score(self, X=None, y=None) -> float:
        return float(np.mean([ep.utilization for ep in self.evaluate()]))
