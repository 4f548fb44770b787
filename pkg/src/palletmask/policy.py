"""Actor-critic network and clipped-surrogate PPO over the flat placement action space."""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .env import BOX_FEATURES, Action, BufferState, EpisodeConfig, decode_action
from .geometry import N_ORIENTATIONS, PalletState

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PpoConfig:
    clip_ratio: float = 0.2
    learning_rate: float = 3e-4
    rollout_length: int = 2048
    minibatch_size: int = 256
    epochs_per_update: int = 4
    discount: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    parallel_envs: int = 8
    total_timesteps: int = 2_000_000
    hidden: int = 256

    def __post_init__(self):
        if self.clip_ratio <= 0:
            raise ValueError("clip_ratio must be positive")
        if not 0 < self.discount <= 1:
            raise ValueError("discount must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.rollout_length < 1 or self.parallel_envs < 1 or self.minibatch_size < 1:
            raise ValueError("rollout_length, parallel_envs and minibatch_size must be positive")
        if self.total_timesteps < 0:
            raise ValueError("total_timesteps must be non-negative")

    @property
    def steps_per_update(self) -> int:
        return self.rollout_length * self.parallel_envs

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "PpoConfig":
        return cls(**d)


@dataclass
class PolicyObservation:
    pallet_channels: np.ndarray  # (2, L, W, H): density, rigidity
    buffer_vector: np.ndarray  # (5N,)

    @classmethod
    def from_state(cls, pallet: PalletState, buffer: BufferState) -> "PolicyObservation":
        return cls(
            np.stack([pallet.density, pallet.rigidity]).astype(np.float32),
            buffer.encode().astype(np.float32),
        )


class ActorCritic(nn.Module):
    """3D-conv pallet encoder and buffer MLP feeding policy and value heads."""

    def __init__(self, env_cfg: EpisodeConfig, hidden: int = 256, density_scale: float = 5000.0, rigidity_scale: float = 3.0):
        super().__init__()
        L, W, H = env_cfg.grid.shape
        n = env_cfg.buffer_size
        self.n_actions = env_cfg.n_actions
        self.register_buffer("channel_scale", torch.tensor([density_scale, rigidity_scale]).view(1, 2, 1, 1, 1))
        slot_scale = torch.tensor([L, W, H, density_scale, rigidity_scale], dtype=torch.float32).repeat(n)
        self.register_buffer("slot_scale", slot_scale)
        self.pallet_net = nn.Sequential(
            nn.Conv3d(2, 16, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv3d(16, 32, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Flatten(),
        )
        with torch.no_grad():
            flat = self.pallet_net(torch.zeros(1, 2, L, W, H)).shape[1]
        self.pallet_fc = nn.Sequential(nn.Linear(flat, hidden), nn.ReLU())
        self.buffer_net = nn.Sequential(nn.Linear(BOX_FEATURES * n, 64), nn.ReLU(), nn.Linear(64, 64), nn.ReLU())
        self.trunk = nn.Sequential(nn.Linear(hidden + 64, hidden), nn.ReLU())
        self.pi = nn.Linear(hidden, self.n_actions)
        self.v = nn.Linear(hidden, 1)
        nn.init.orthogonal_(self.pi.weight, gain=0.01)
        nn.init.zeros_(self.pi.bias)

    def forward(self, pallet: torch.Tensor, buffer: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        p = self.pallet_fc(self.pallet_net(pallet / self.channel_scale))
        b = self.buffer_net(buffer / self.slot_scale)
        h = self.trunk(torch.cat([p, b], dim=1))
        return self.pi(h), self.v(h).squeeze(-1)


def stack_observations(obs: list[PolicyObservation]) -> tuple[torch.Tensor, torch.Tensor]:
    return (
        torch.from_numpy(np.stack([o.pallet_channels for o in obs])),
        torch.from_numpy(np.stack([o.buffer_vector for o in obs])),
    )


def empty_slot_mask(buffer_vectors: torch.Tensor, env_cfg: EpisodeConfig) -> torch.Tensor:
    """Boolean ``(B, n_actions)`` marking actions that select an empty buffer slot."""
    n = env_cfg.buffer_size
    empty = buffer_vectors.view(-1, n, BOX_FEATURES).abs().sum(-1) == 0
    per_slot = env_cfg.n_actions // n
    return empty.repeat_interleave(per_slot, dim=1)


def sample_actions(logits: torch.Tensor, rng: np.random.Generator) -> np.ndarray:
    """Gumbel-max sampling from categorical logits with a numpy generator."""
    g = rng.gumbel(size=tuple(logits.shape)).astype(np.float32)
    return (logits.detach().numpy() + g).argmax(axis=1)


def act_batch(
    policy: ActorCritic,
    obs: list[PolicyObservation],
    rng: np.random.Generator,
    greedy: bool = False,
    env_cfg: EpisodeConfig | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flat action indices, their log-probabilities and state values.

    With ``greedy`` the arg-max action is taken; when ``env_cfg`` is given,
    empty-slot actions are excluded from the arg-max.
    """
    pallet, buffer = stack_observations(obs)
    with torch.no_grad():
        logits, value = policy(pallet, buffer)
    logp_all = torch.log_softmax(logits, dim=1)
    if greedy:
        scores = logits.clone()
        if env_cfg is not None:
            scores[empty_slot_mask(buffer, env_cfg)] = -torch.inf
        idx = scores.argmax(dim=1).numpy()
    else:
        idx = sample_actions(logits, rng)
    logp = logp_all[torch.arange(len(idx)), torch.from_numpy(idx)].numpy()
    return idx, logp, value.numpy()


def act(
    policy: ActorCritic, obs: PolicyObservation, rng: np.random.Generator, env_cfg: EpisodeConfig
) -> tuple[Action, float, float]:
    idx, logp, value = act_batch(policy, [obs], rng)
    return decode_action(int(idx[0]), env_cfg), float(logp[0]), float(value[0])


def clipped_surrogate(ratio: torch.Tensor, advantage: torch.Tensor, clip_ratio: float) -> torch.Tensor:
    """Per-sample PPO objective ``min(r * A, clip(r, 1 - eps, 1 + eps) * A)``."""
    return torch.min(ratio * advantage, torch.clamp(ratio, 1 - clip_ratio, 1 + clip_ratio) * advantage)


def ppo_loss(
    logits: torch.Tensor,
    values: torch.Tensor,
    actions: torch.Tensor,
    old_logp: torch.Tensor,
    advantages: torch.Tensor,
    returns: torch.Tensor,
    cfg: PpoConfig,
) -> tuple[torch.Tensor, dict]:
    logp_all = torch.log_softmax(logits, dim=1)
    logp = logp_all.gather(1, actions[:, None]).squeeze(1)
    ratio = torch.exp(logp - old_logp)
    policy_loss = -clipped_surrogate(ratio, advantages, cfg.clip_ratio).mean()
    value_loss = 0.5 * (returns - values).pow(2).mean()
    entropy = -(logp_all.exp() * logp_all).sum(1).mean()
    loss = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
    with torch.no_grad():
        stats = {
            "policy_loss": float(policy_loss),
            "value_loss": float(value_loss),
            "entropy": float(entropy),
            "approx_kl": float((old_logp - logp).mean()),
            "clip_frac": float(((ratio - 1).abs() > cfg.clip_ratio).float().mean()),
        }
    return loss, stats


def compute_gae(
    rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, last_value: np.ndarray, discount: float, lam: float
) -> tuple[np.ndarray, np.ndarray]:
    """Generalised advantage estimates over a ``(T, E)`` rollout; ``dones[t]`` ends the episode after step ``t``."""
    T = len(rewards)
    adv = np.zeros_like(rewards, dtype=np.float64)
    gae = np.zeros(rewards.shape[1])
    for t in reversed(range(T)):
        next_value = last_value if t == T - 1 else values[t + 1]
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + discount * next_value * nonterminal - values[t]
        gae = delta + discount * lam * nonterminal * gae
        adv[t] = gae
    return adv, adv + values


class RolloutBuffer:
    def __init__(self, T: int, E: int, env_cfg: EpisodeConfig):
        L, W, H = env_cfg.grid.shape
        self.T, self.E = T, E
        self.pallet = np.zeros((T, E, 2, L, W, H), dtype=np.float32)
        self.buffer = np.zeros((T, E, BOX_FEATURES * env_cfg.buffer_size), dtype=np.float32)
        self.actions = np.zeros((T, E), dtype=np.int64)
        self.logp = np.zeros((T, E), dtype=np.float32)
        self.values = np.zeros((T, E), dtype=np.float32)
        self.rewards = np.zeros((T, E), dtype=np.float64)
        self.dones = np.zeros((T, E), dtype=np.float64)
        self.t = 0

    @property
    def full(self) -> bool:
        return self.t == self.T

    def add(self, obs: list[PolicyObservation], actions, logp, values, rewards, dones) -> None:
        for e, o in enumerate(obs):
            self.pallet[self.t, e] = o.pallet_channels
            self.buffer[self.t, e] = o.buffer_vector
        self.actions[self.t] = actions
        self.logp[self.t] = logp
        self.values[self.t] = values
        self.rewards[self.t] = rewards
        self.dones[self.t] = dones
        self.t += 1


def update(
    policy: ActorCritic,
    optimizer: torch.optim.Optimizer,
    rollout: RolloutBuffer,
    last_value: np.ndarray,
    cfg: PpoConfig,
    rng: np.random.Generator,
) -> dict:
    """One PPO update from a full rollout; returns averaged loss statistics."""
    if not rollout.full:
        raise ValueError("rollout buffer is not full")
    adv, ret = compute_gae(rollout.rewards, rollout.values, rollout.dones, last_value, cfg.discount, cfg.gae_lambda)
    n = rollout.T * rollout.E
    pallet = torch.from_numpy(rollout.pallet.reshape(n, *rollout.pallet.shape[2:]))
    buffer = torch.from_numpy(rollout.buffer.reshape(n, -1))
    actions = torch.from_numpy(rollout.actions.reshape(n))
    old_logp = torch.from_numpy(rollout.logp.reshape(n))
    adv_t = torch.from_numpy(adv.reshape(n).astype(np.float32))
    ret_t = torch.from_numpy(ret.reshape(n).astype(np.float32))
    if n > 1:
        adv_t = (adv_t - adv_t.mean()) / (adv_t.std() + 1e-8)

    totals: dict[str, float] = {}
    count = 0
    for _ in range(cfg.epochs_per_update):
        order = torch.from_numpy(rng.permutation(n))
        for start in range(0, n, cfg.minibatch_size):
            idx = order[start : start + cfg.minibatch_size]
            logits, values = policy(pallet[idx], buffer[idx])
            loss, stats = ppo_loss(logits, values, actions[idx], old_logp[idx], adv_t[idx], ret_t[idx], cfg)
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(policy.parameters(), cfg.max_grad_norm)
            optimizer.step()
            for k, v in stats.items():
                totals[k] = totals.get(k, 0.0) + v
            count += 1
    return {k: v / count for k, v in totals.items()}


def save_policy(policy: ActorCritic, optimizer, path, env_cfg: EpisodeConfig, hidden: int, config_hash: str = "") -> None:
    torch.save(
        {
            "format": "palletmask-policy",
            "version": CHECKPOINT_VERSION,
            "config_hash": config_hash,
            "env": env_cfg.to_dict(),
            "hidden": hidden,
            "state_dict": policy.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
        },
        path,
    )


def load_policy(path, config_hash: str | None = None) -> tuple[ActorCritic, dict]:
    blob = torch.load(path, weights_only=False)
    if blob.get("format") != "palletmask-policy" or blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError("not a compatible policy checkpoint")
    if config_hash is not None and blob["config_hash"] != config_hash:
        raise ValueError("policy checkpoint was produced under a different configuration")
    policy = ActorCritic(EpisodeConfig.from_dict(blob["env"]), hidden=blob["hidden"])
    policy.load_state_dict(blob["state_dict"])
    return policy, blob


__all__ = [
    "N_ORIENTATIONS",
    "PpoConfig",
    "PolicyObservation",
    "ActorCritic",
    "act",
    "act_batch",
    "update",
    "ppo_loss",
    "clipped_surrogate",
    "compute_gae",
    "RolloutBuffer",
]
