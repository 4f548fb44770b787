"""Experiment configs, training/evaluation orchestration, reports and replay logs."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, fields, replace as dc_replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .baselines import PlannerKind
from .env import (
    Action,
    EndReason,
    EpisodeConfig,
    FixedMask,
    OracleMask,
    desk_episode_config,
    paper_episode_config,
    reset,
    step,
)
from .oracle import FeasibilityMap, OracleConfig
from .policy import PpoConfig, load_policy, save_policy
from .training import (
    EpisodeResult,
    MaskLearningConfig,
    default_provider,
    end_reason_frequencies,
    evaluate,
    training_loop,
)

log = logging.getLogger(__name__)

REPLAY_FORMAT = "palletmask-replay"
REPLAY_VERSION = 1
REPORT_FIELDS = (
    "space_utilization",
    "infeasible_rate",
    "unstable_rate",
    "success_rate",
    "mean_episode_length",
    "mean_episode_reward",
)


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class ReplayError(RuntimeError):
    pass


class VersionMismatch(ReplayError):
    """Log written by another format version or under another configuration."""


class CorruptLog(ReplayError):
    """Log is truncated or not parseable."""


class ReplayDiverged(ReplayError):
    """Re-execution produced a different reward, verdict or ending than logged."""


@dataclass(frozen=True)
class ExperimentConfig:
    env: EpisodeConfig
    oracle: OracleConfig = OracleConfig()
    ppo: PpoConfig = PpoConfig()
    mask: MaskLearningConfig = MaskLearningConfig()
    planner: PlannerKind = PlannerKind.OLMASK
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    output_dir: str | None = None
    eval_episodes: int = 100
    eval_envs: int = 8
    train: bool = True
    oracle_mask: bool = False

    def __post_init__(self):
        object.__setattr__(self, "planner", PlannerKind(self.planner))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        if self.eval_episodes < 1 or self.eval_envs < 1:
            raise ConfigError("eval_episodes and eval_envs must be positive")

    def replace(self, **changes) -> "ExperimentConfig":
        return dc_replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "env": self.env.to_dict(),
            "oracle": self.oracle.to_dict(),
            "ppo": self.ppo.to_dict(),
            "mask": self.mask.to_dict(),
            "planner": self.planner.value,
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "eval_episodes": self.eval_episodes,
            "eval_envs": self.eval_envs,
            "train": self.train,
            "oracle_mask": self.oracle_mask,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        """Build from a mapping; ``preset`` names a base config that the other keys override."""
        d = dict(d)
        known = {f.name for f in fields(cls)} | {"preset"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            base = PRESETS[d.pop("preset")]() if "preset" in d else None
            parts = {
                "env": (EpisodeConfig, "env"),
                "oracle": (OracleConfig, "oracle"),
                "ppo": (PpoConfig, "ppo"),
                "mask": (MaskLearningConfig, "mask"),
            }
            kw = {}
            for key, (typ, attr) in parts.items():
                if key in d:
                    sub = d.pop(key)
                    if base is not None and typ is not EpisodeConfig:
                        sub = {**getattr(base, attr).to_dict(), **sub}
                    kw[key] = typ.from_dict(sub)
            kw.update(d)
            if base is not None:
                return base.replace(**kw)
            if "env" not in kw:
                raise ConfigError("config needs either 'preset' or 'env'")
            return cls(**kw)
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def config_hash(self) -> str:
        """Hash of everything that affects results (the output directory does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def desk_preset() -> ExperimentConfig:
    """10x10x10 pallet, 12 boxes, buffer of two, 200k timesteps per seed."""
    return ExperimentConfig(
        env=desk_episode_config(),
        ppo=PpoConfig(rollout_length=128, parallel_envs=8, minibatch_size=256, total_timesteps=200_000),
        # nearest-cell snapping gravitates to the mask's boundary, where its rare
        # false positives sit; a stricter cut costs almost no IoU
        mask=MaskLearningConfig(dataset_capacity=3000, threshold=0.9),
        seeds=(0, 1, 2),
    )


def paper_preset() -> ExperimentConfig:
    return ExperimentConfig(env=paper_episode_config())


PRESETS: dict[str, Callable[[], ExperimentConfig]] = {"desk": desk_preset, "paper": paper_preset}


@dataclass
class MetricsReport:
    """Evaluation metrics per seed with mean and standard deviation across seeds."""

    planner: str
    config_hash: str
    per_seed: dict[int, dict[str, float]]
    mean: dict[str, float] = field(init=False)
    std: dict[str, float] = field(init=False)

    def __post_init__(self):
        for s, row in self.per_seed.items():
            total = row["infeasible_rate"] + row["unstable_rate"] + row["success_rate"]
            if abs(total - 1.0) > 1e-9:
                raise AssertionError(f"end-reason rates for seed {s} sum to {total}")
        self.mean = {k: float(np.mean([r[k] for r in self.per_seed.values()])) for k in REPORT_FIELDS}
        self.std = {k: float(np.std([r[k] for r in self.per_seed.values()])) for k in REPORT_FIELDS}

    @classmethod
    def from_episodes(cls, planner, config_hash: str, episodes: Mapping[int, Sequence[EpisodeResult]]) -> "MetricsReport":
        return cls(str(PlannerKind(planner).value), config_hash, {s: episode_metrics(eps) for s, eps in episodes.items()})

    def to_dict(self) -> dict:
        return {
            "planner": self.planner,
            "config_hash": self.config_hash,
            "per_seed": {str(k): v for k, v in self.per_seed.items()},
            "mean": self.mean,
            "std": self.std,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(d["planner"], d["config_hash"], {int(k): dict(v) for k, v in d["per_seed"].items()})

    def table(self) -> str:
        width = max(len(k) for k in REPORT_FIELDS)
        lines = [f"planner: {self.planner}  (config {self.config_hash}, {len(self.per_seed)} seeds)"]
        for k in REPORT_FIELDS:
            lines.append(f"  {k:<{width}}  {self.mean[k]:.4f} ± {self.std[k]:.4f}")
        return "\n".join(lines)


def episode_metrics(episodes: Sequence[EpisodeResult]) -> dict[str, float]:
    if not episodes:
        raise ValueError("no evaluation episodes")
    freq = end_reason_frequencies(episodes)
    return {
        "space_utilization": float(np.mean([e.utilization for e in episodes])),
        "infeasible_rate": freq[EndReason.INFEASIBLE.value],
        "unstable_rate": freq[EndReason.UNSTABLE.value],
        "success_rate": freq[EndReason.SUCCESS.value],
        "mean_episode_length": float(np.mean([e.length for e in episodes])),
        "mean_episode_reward": float(np.mean([e.reward for e in episodes])),
    }


CURVE_FIELDS = (
    "timestep",
    "val_iou",
    "Infeasible",
    "Unstable",
    "Success",
    "utilization",
    "episode_reward",
    "episode_length",
    "episodes",
    "dataset_size",
)


def write_curve(path, rows: Sequence[Mapping], config_hash: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(r[k])) if k not in ("timestep", "episodes", "dataset_size") else int(r[k]) for k in CURVE_FIELDS})


def read_curve(path) -> list[dict[str, float]]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(lines)]


def aggregate_curves(curves: Sequence[Sequence[Mapping]]) -> list[dict[str, float]]:
    """Pointwise mean over seeds (NaN entries are skipped)."""
    n = min(len(c) for c in curves)
    out = []
    for i in range(n):
        row = {}
        for k in CURVE_FIELDS:
            vals = np.array([float(c[i][k]) for c in curves])
            row[k] = float(np.nanmean(vals)) if not np.all(np.isnan(vals)) else math.nan
        out.append(row)
    return out


def write_replay_log(path, cfg: ExperimentConfig, seed: int, episodes: Sequence[EpisodeResult]) -> None:
    with open(path, "w") as fh:
        header = {
            "type": "header",
            "format": REPLAY_FORMAT,
            "version": REPLAY_VERSION,
            "config_hash": cfg.config_hash(),
            "config": cfg.replace(output_dir=None).to_dict(),
            "seed": seed,
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for ep in episodes:
            line = {
                "type": "episode",
                "seed": ep.seed,
                "steps": ep.records,
                "reward": ep.reward,
                "length": ep.length,
                "utilization": ep.utilization,
                "end_reason": ep.end_reason.value,
            }
            fh.write(json.dumps(line, sort_keys=True) + "\n")
        fh.write(json.dumps({"type": "end", "episodes": len(episodes)}) + "\n")


def _read_replay(path) -> tuple[dict, list[dict]]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CorruptLog(f"cannot read {path}: {exc}") from exc
    if not text.endswith("\n"):
        raise CorruptLog("log does not end with a complete line")
    try:
        entries = [json.loads(ln) for ln in text.splitlines() if ln.strip()]
    except json.JSONDecodeError as exc:
        raise CorruptLog(f"unparseable line: {exc}") from exc
    if not entries or entries[0].get("type") != "header" or entries[0].get("format") != REPLAY_FORMAT:
        raise CorruptLog("missing header")
    if entries[-1].get("type") != "end":
        raise CorruptLog("missing end marker; log is truncated")
    episodes = [e for e in entries[1:-1] if e.get("type") == "episode"]
    if len(episodes) != entries[-1].get("episodes") or len(episodes) != len(entries) - 2:
        raise CorruptLog("episode count does not match end marker")
    return entries[0], episodes


def replay(path, cfg: ExperimentConfig | None = None) -> dict[str, float]:
    """Re-execute a logged evaluation and return its metrics.

    Each step is replayed against a mask holding only the logged snapped
    position, so no model is needed. Any difference in reward, verdict or
    ending raises :class:`ReplayDiverged`.
    """
    header, logged = _read_replay(path)
    if header.get("version") != REPLAY_VERSION:
        raise VersionMismatch(f"log version {header.get('version')} != {REPLAY_VERSION}")
    if cfg is not None and header.get("config_hash") != cfg.config_hash():
        raise VersionMismatch("log was written under a different configuration")
    try:
        log_cfg = ExperimentConfig.from_dict(header["config"])
    except (ConfigError, KeyError) as exc:
        raise CorruptLog(f"bad embedded config: {exc}") from exc
    if log_cfg.config_hash() != header.get("config_hash"):
        raise CorruptLog("embedded config does not match its hash")
    env_cfg = log_cfg.env
    grid = env_cfg.grid
    results = []
    for ep in logged:
        results.append(_replay_episode(ep, env_cfg, log_cfg.oracle, grid))
    return episode_metrics(results)


def _replay_episode(ep: Mapping, env_cfg: EpisodeConfig, oracle_cfg: OracleConfig, grid) -> EpisodeResult:
    try:
        pallet, buffer = reset(env_cfg.with_seed(int(ep["seed"])))
        total, end, out = 0.0, None, None
        for i, rec in enumerate(ep["steps"]):
            slot, o, x, y = rec["action"]
            bits = np.zeros((grid.length_cells, grid.width_cells), dtype=bool)
            if rec["snapped"] is not None:
                bits[rec["snapped"][0], rec["snapped"][1]] = True
            pallet, buffer, out = step(pallet, buffer, Action(slot, o, x, y), FixedMask(FeasibilityMap(bits)), oracle_cfg)
            verdict = out.info.get("verdict")
            got = verdict.to_dict() if verdict is not None else None
            end = out.end_reason.value if out.end_reason is not None else None
            if out.reward != rec["reward"] or got != rec["verdict"] or end != rec["end_reason"]:
                raise ReplayDiverged(f"episode {ep['seed']} diverged at step {i}")
            total += out.reward
        if end != ep["end_reason"] or total != ep["reward"]:
            raise ReplayDiverged(f"episode {ep['seed']} totals differ from the log")
        return EpisodeResult(int(ep["seed"]), total, len(ep["steps"]), float(out.info["utilization"]), EndReason(end))
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise CorruptLog(f"malformed episode entry: {exc}") from exc


def evaluation_provider(cfg: ExperimentConfig, mask_model):
    if cfg.oracle_mask:
        return OracleMask(cfg.oracle.without_noise())
    return default_provider(cfg.planner, mask_model)


def load_checkpoints(directory, seed: int):
    """Policy and mask model saved by :func:`run_experiment` for one seed (mask may be absent)."""
    from .masklearn import load_model

    directory = Path(directory)
    policy_path = directory / f"policy_seed{seed}.pt"
    if not policy_path.exists():
        raise ConfigError(f"no policy checkpoint for seed {seed} in {directory}")
    policy, _ = load_policy(policy_path)
    mask_path = directory / f"mask_seed{seed}.pt"
    mask_model = load_model(mask_path) if mask_path.exists() else None
    return policy, mask_model


def run_experiment(
    cfg: ExperimentConfig,
    progress: Callable[[int, dict], None] | None = None,
    checkpoint_dir=None,
) -> MetricsReport:
    """Train (unless ``cfg.train`` is off) and evaluate every seed, writing artifacts to ``cfg.output_dir``.

    Outputs: ``curve_seed<k>.csv`` per seed plus ``curve_mean.csv``,
    ``replay_seed<k>.jsonl``, ``policy_seed<k>.pt`` / ``mask_seed<k>.pt``
    checkpoints and ``report.json``; all carry the config hash. Without
    training, ``checkpoint_dir`` supplies saved models; with neither, a
    uniformly random policy is evaluated.
    """
    from .masklearn import save_model

    torch.set_num_threads(1)
    out = Path(cfg.output_dir) if cfg.output_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.dump(out / "config.json")
    h = cfg.config_hash()
    episodes: dict[int, list[EpisodeResult]] = {}
    curves = []
    for seed in cfg.seeds:
        policy = mask_model = None
        if cfg.train:
            mask_provider = OracleMask(cfg.oracle.without_noise()) if cfg.oracle_mask else None
            res = training_loop(
                cfg.env,
                cfg.ppo,
                cfg.mask,
                cfg.oracle,
                cfg.planner,
                seed,
                mask_provider=mask_provider,
                progress=(lambda row, s=seed: progress(s, row)) if progress else None,
            )
            policy, mask_model = res.policy, res.mask_model
            curves.append(res.metrics)
            if out is not None:
                write_curve(out / f"curve_seed{seed}.csv", res.metrics, h)
                save_policy(policy, res.optimizer, out / f"policy_seed{seed}.pt", cfg.env, cfg.ppo.hidden, h)
                if mask_model is not None:
                    save_model(mask_model, out / f"mask_seed{seed}.pt", h)
        elif checkpoint_dir is not None:
            policy, mask_model = load_checkpoints(checkpoint_dir, seed)
        if not cfg.train and mask_model is None and cfg.planner.learns_mask and not cfg.oracle_mask:
            raise ConfigError("a learned-mask planner cannot be evaluated without training; enable oracle_mask")
        eps = evaluate(
            policy,
            evaluation_provider(cfg, mask_model),
            cfg.planner,
            cfg.env,
            cfg.oracle,
            cfg.eval_episodes,
            seed,
            greedy=True,
            n_envs=cfg.eval_envs,
            log_records=True,
        )
        episodes[seed] = eps
        if out is not None:
            write_replay_log(out / f"replay_seed{seed}.jsonl", cfg, seed, eps)
    if out is not None and curves:
        write_curve(out / "curve_mean.csv", aggregate_curves(curves), h)
    report = MetricsReport.from_episodes(cfg.planner, h, episodes)
    if out is not None:
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return report
