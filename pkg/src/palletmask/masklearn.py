"""Online-learned action-space mask.

Rollout steps are sampled into a pending list, labelled by the stability
oracle at every anchor position, pushed into a bounded FIFO dataset and used
to fit a dense per-cell classifier. The classifier follows the scikit-learn
estimator conventions so it can be inspected and cloned like any other model.
"""
from __future__ import annotations

import hashlib
import json
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from torch import nn

from .env import placeable
from .geometry import BoxSpec, PalletState, oriented_dims
from .oracle import FeasibilityMap, OracleConfig, annotate_feasibility
from .validation import check_samples

RECORD_PROBABILITY = 0.1
DATASET_CAPACITY = 16_000
CHECKPOINT_VERSION = 1


class EmptyDataset(ValueError):
    pass


@dataclass
class MaskSample:
    """A pallet configuration and the box about to be placed on it."""

    pallet: PalletState
    box: BoxSpec
    orientation: int
    seed: int = 0
    label: FeasibilityMap | None = None
    _features: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def pallet_channels(self) -> np.ndarray:
        return np.stack([self.pallet.density, self.pallet.rigidity])

    @property
    def box_descriptor(self) -> np.ndarray:
        return np.array([*oriented_dims(self.box, self.orientation), self.box.density, self.box.rigidity], dtype=float)

    def with_label(self, label: FeasibilityMap) -> "MaskSample":
        if label.shape != self.pallet.config.shape[:2]:
            raise ValueError("label shape must match the pallet footprint grid")
        return MaskSample(self.pallet, self.box, self.orientation, self.seed, label, self._features)


class FeasibleDataset:
    """Bounded first-in-first-out store of annotated samples."""

    def __init__(self, capacity: int = DATASET_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque[MaskSample] = deque(maxlen=capacity)

    def append(self, sample: MaskSample) -> None:
        if sample.label is None:
            raise ValueError("only annotated samples can be stored")
        self._items.append(sample)

    def extend(self, samples: Iterable[MaskSample]) -> None:
        for s in samples:
            self.append(s)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i: int) -> MaskSample:
        return self._items[i]

    def split(self, seed: int, train_fraction: float = 0.8) -> tuple[list[MaskSample], list[MaskSample]]:
        n = len(self._items)
        if n == 0:
            raise EmptyDataset("feasible dataset is empty")
        if n == 1:
            return [self._items[0]], [self._items[0]]
        order = np.random.default_rng(seed).permutation(n)
        n_val = min(n - 1, max(1, int(round((1 - train_fraction) * n))))
        items = list(self._items)
        return [items[i] for i in order[n_val:]], [items[i] for i in order[:n_val]]

    def export(self, path) -> None:
        """Write a snapshot (pallet documents, boxes, labels) for offline inspection."""
        with open(path, "w") as fh:
            for s in self._items:
                fh.write(
                    json.dumps(
                        {
                            "pallet": json.loads(s.pallet.to_json()),
                            "box": s.box.to_dict(),
                            "orientation": s.orientation,
                            "seed": s.seed,
                            "label": s.label.bits.astype(int).tolist(),
                        }
                    )
                    + "\n"
                )


def record(
    sample: MaskSample,
    step_was_unstable: bool,
    rng: np.random.Generator,
    pending: list | None = None,
    probability: float = RECORD_PROBABILITY,
) -> bool:
    """Keep every step that collapsed the stack and a random share of the rest."""
    keep = bool(step_was_unstable) or (probability > 0 and rng.random() < probability)
    if keep and pending is not None:
        pending.append(sample)
    return keep


def _annotate_one(args):
    sample, cfg = args
    return annotate_feasibility(sample.pallet, sample.box, sample.orientation, cfg, sample.seed)


def annotate_batch(pending: Sequence[MaskSample], oracle_cfg: OracleConfig, workers: int = 1) -> list[MaskSample]:
    """Label every pending sample with the oracle.

    Each sample carries its own seed, so labels do not depend on ``workers``.
    """
    jobs = [(s, oracle_cfg) for s in pending]
    if not jobs:
        return []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            labels = list(pool.map(_annotate_one, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        labels = [_annotate_one(j) for j in jobs]
    return [s.with_label(lab) for s, lab in zip(pending, labels)]


def iou(pred: np.ndarray, label: np.ndarray) -> float:
    """Intersection over union of feasible cells; two empty maps agree perfectly."""
    pred = np.asarray(pred, dtype=bool)
    label = np.asarray(label, dtype=bool)
    union = np.count_nonzero(pred | label)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & label) / union


N_FEATURES = 26


def _window_stats(maps: np.ndarray, ox: int, oy: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Max, min and mean of each ``(C, L, W)`` map over the footprint anchored at every cell.

    Anchors whose footprint leaves the grid see edge-padded values; they are
    masked out downstream anyway.
    """
    C, L, W = maps.shape
    padded = np.pad(maps, ((0, 0), (0, ox - 1), (0, oy - 1)), mode="edge")
    out = []
    # separable running reductions: rows first, then columns
    for op in (np.maximum, np.minimum, np.add):
        rows = padded[:, 0:L, :]
        for k in range(1, ox):
            rows = op(rows, padded[:, k : k + L, :])
        acc = rows[:, :, 0:W]
        for k in range(1, oy):
            acc = op(acc, rows[:, :, k : k + W])
        out.append(acc)
    hi, lo, total = out
    return hi, lo, total / np.float32(ox * oy)


def _rest_support(height: np.ndarray, hi: np.ndarray, ox: int, oy: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fraction of the footprint at rest height and the centroid of that area, in footprint units."""
    padded = np.pad(height, ((0, ox - 1), (0, oy - 1)), mode="edge")
    top = sliding_window_view(padded, (ox, oy)) == hi[..., None, None]
    n = top.sum(axis=(2, 3))
    cx = (top * ((np.arange(ox) + 0.5) / ox)[:, None]).sum(axis=(2, 3)) / n
    cy = (top * ((np.arange(oy) + 0.5) / oy)[None, :]).sum(axis=(2, 3)) / n
    return n / (ox * oy), cx, cy


def featurize(
    density: np.ndarray,
    rigidity: np.ndarray,
    descriptor: np.ndarray,
    density_scale: float,
    rigidity_scale: float,
) -> np.ndarray:
    """Per-column maps of the 3D channels, pooled over the box footprint, plus the box descriptor."""
    L, W, H = density.shape
    occ = density > 0
    filled = occ.sum(axis=2)
    height = np.where(occ.any(axis=2), H - np.argmax(occ[:, :, ::-1], axis=2), 0)
    top = np.clip(height - 1, 0, H - 1)
    ii, jj = np.indices((L, W))
    top_d = np.where(height > 0, density[ii, jj, top], 0.0)
    top_r = np.where(height > 0, rigidity[ii, jj, top], 0.0)
    min_r = np.where(occ, rigidity, np.inf).min(axis=2)
    min_r = np.where(np.isfinite(min_r), min_r, 0.0)
    col_mass = density.sum(axis=2)
    # mass resting on (and including) the lowest voxel of the weakest material in each column
    above = np.cumsum(density[:, :, ::-1], axis=2)[:, :, ::-1]
    weakest = np.argmax(occ & (rigidity == min_r[..., None]), axis=2)
    weak_load = np.where(filled > 0, above[ii, jj, weakest], 0.0)
    out = np.empty((N_FEATURES, L, W), dtype=np.float32)
    out[0] = height / H
    out[1] = top_d / density_scale
    out[2] = top_r / rigidity_scale
    out[3] = col_mass / (density_scale * H)
    out[4] = filled / H
    out[5] = min_r / rigidity_scale
    ox, oy = max(int(descriptor[0]), 1), max(int(descriptor[1]), 1)
    hi, lo, mean = _window_stats(out[[0, 1, 2]], min(ox, L), min(oy, W))
    out[6], out[7], out[8] = hi[0], lo[0], mean[0]
    out[9], out[10] = hi[1], lo[1]
    out[11], out[12] = hi[2], lo[2]
    out[20] = weak_load / (density_scale * H)
    hi, lo, _ = _window_stats(out[[20, 5]], min(ox, L), min(oy, W))
    out[21], out[22] = hi[0], lo[1]
    out[23], out[24], out[25] = _rest_support(out[0], out[6], min(ox, L), min(oy, W))
    scales = (L, W, H, density_scale, rigidity_scale)
    for k in range(5):
        out[13 + k] = descriptor[k] / scales[k]
    out[18] = ii / max(L - 1, 1)
    out[19] = jj / max(W - 1, 1)
    return out


class MaskNet(nn.Module):
    """Fully convolutional per-cell classifier producing logits of shape ``(L, W)``."""

    def __init__(self, in_channels: int = N_FEATURES, hidden: int = 48, dilations: Sequence[int] = (1, 1, 2, 2, 1)):
        super().__init__()
        layers: list[nn.Module] = []
        c = in_channels
        for d in dilations:
            layers += [nn.Conv2d(c, hidden, 3, padding=d, dilation=d), nn.ReLU()]
            c = hidden
        layers.append(nn.Conv2d(c, 1, 1))
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x).squeeze(1)


def _receptive_dilations(max_dim: int) -> tuple[int, ...]:
    dil = [1, 1, 2, 2]
    while 1 + 2 * sum(dil) < 2 * max_dim + 1:
        dil.append(min(dil[-1] * 2, 4))
    return tuple(dil + [1])


class FeasibilityMaskClassifier(ClassifierMixin, BaseEstimator):
    """Dense per-cell feasibility classifier.

    ``X`` is a sequence of :class:`MaskSample`; labels are read from the samples.

    Parameters
    ----------
    hidden : int
        Channels per convolutional layer.
    max_box_dim : int
        Largest oriented box side, used to size the receptive field.
    learning_rate, batch_size, epochs :
        Adam settings; ``fit`` runs ``epochs`` passes from scratch.
    threshold : float
        Probability above which a cell is reported feasible.
    density_scale, rigidity_scale : float
        Normalisers for the density and rigidity inputs.
    """

    def __init__(
        self,
        hidden: int = 32,
        max_box_dim: int = 8,
        learning_rate: float = 1e-3,
        batch_size: int = 64,
        epochs: int = 2,
        threshold: float = 0.5,
        density_scale: float = 5000.0,
        rigidity_scale: float = 3.0,
        random_state: int = 0,
    ):
        self.hidden = hidden
        self.max_box_dim = max_box_dim
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.threshold = threshold
        self.density_scale = density_scale
        self.rigidity_scale = rigidity_scale
        self.random_state = random_state

    # -- internals ---------------------------------------------------------
    def _init_model(self) -> None:
        torch.manual_seed(self.random_state)
        self.net_ = MaskNet(N_FEATURES, self.hidden, _receptive_dilations(self.max_box_dim))
        self.optimizer_ = torch.optim.Adam(self.net_.parameters(), lr=self.learning_rate)
        self.n_updates_ = 0
        self.loss_curve_: list[float] = []

    def initialize(self) -> "FeasibilityMaskClassifier":
        """Fresh untrained network, usable for prediction before any fit."""
        self._init_model()
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "net_"):
            raise NotFittedError("call fit or partial_fit first")

    def _features(self, samples: Sequence[MaskSample]) -> torch.Tensor:
        feats = []
        for s in samples:
            if s._features is None:
                s._features = featurize(
                    s.pallet.density, s.pallet.rigidity, s.box_descriptor, self.density_scale, self.rigidity_scale
                )
            feats.append(s._features)
        return torch.from_numpy(np.stack(feats))

    @staticmethod
    def _valid(samples: Sequence[MaskSample]) -> np.ndarray:
        return np.stack([placeable(s.pallet, s.box, s.orientation) for s in samples])

    # -- estimator API -----------------------------------------------------
    def fit(self, X: Sequence[MaskSample], y=None):
        self._init_model()
        return self.partial_fit(X, epochs=self.epochs)

    def partial_fit(self, X: Sequence[MaskSample], y=None, epochs: int = 1):
        """Continue training for ``epochs`` passes over ``X``; returns ``self``."""
        if not hasattr(self, "net_"):
            self._init_model()
        samples = check_samples(X, require_labels=True)
        if not samples:
            raise EmptyDataset("no samples to fit")
        feats = self._features(samples)
        labels = torch.from_numpy(np.stack([s.label.bits for s in samples]).astype(np.float32))
        valid = torch.from_numpy(self._valid(samples))
        pos = float(labels[valid].sum())
        neg = float(valid.sum()) - pos
        pos_weight = torch.tensor(float(np.clip(neg / max(pos, 1.0), 0.1, 10.0)))
        loss_fn = nn.BCEWithLogitsLoss(pos_weight=pos_weight, reduction="none")
        rng = np.random.default_rng([self.random_state, self.n_updates_])
        self.net_.train()
        for _ in range(epochs):
            order = rng.permutation(len(samples))
            total, count = 0.0, 0
            for start in range(0, len(order), self.batch_size):
                idx = torch.from_numpy(order[start : start + self.batch_size])
                m = valid[idx]
                if not m.any():
                    continue
                logits = self.net_(feats[idx])
                loss = loss_fn(logits[m], labels[idx][m]).mean()
                self.optimizer_.zero_grad()
                loss.backward()
                self.optimizer_.step()
                total += float(loss.detach()) * len(idx)
                count += len(idx)
            self.loss_curve_.append(total / max(count, 1))
        self.n_updates_ += 1
        return self

    def predict_proba(self, X: Sequence[MaskSample]) -> np.ndarray:
        """Per-cell feasibility probabilities, shape ``(n, L, W)``."""
        self._check_fitted()
        samples = check_samples(X)
        if not samples:
            return np.zeros((0, 0, 0))
        self.net_.eval()
        with torch.no_grad():
            return torch.sigmoid(self.net_(self._features(samples))).numpy()

    def predict(self, X: Sequence[MaskSample]) -> np.ndarray:
        """Thresholded maps; geometrically impossible positions are always infeasible."""
        samples = list(X)
        if not samples:
            return np.zeros((0, 0, 0), dtype=bool)
        return (self.predict_proba(samples) > self.threshold) & self._valid(samples)

    def score(self, X: Sequence[MaskSample], y=None) -> float:
        """Mean per-sample IoU against the samples' labels."""
        samples = check_samples(X, require_labels=True)
        pred = self.predict(samples)
        return float(np.mean([iou(p, s.label.bits) for p, s in zip(pred, samples)]))

    def loss(self, X: Sequence[MaskSample]) -> float:
        """Unweighted masked cross-entropy, for monitoring."""
        samples = check_samples(X, require_labels=True)
        self._check_fitted()
        self.net_.eval()
        with torch.no_grad():
            logits = self.net_(self._features(samples))
        labels = torch.from_numpy(np.stack([s.label.bits for s in samples]).astype(np.float32))
        valid = torch.from_numpy(self._valid(samples))
        return float(nn.functional.binary_cross_entropy_with_logits(logits[valid], labels[valid]))


def train_epochs(
    model: FeasibilityMaskClassifier, data: FeasibleDataset, epochs: int = 2, split_seed: int = 0
) -> tuple[FeasibilityMaskClassifier, float]:
    """Train on an 80% split for ``epochs`` passes, return validation IoU on the rest."""
    if len(data) == 0:
        raise EmptyDataset("feasible dataset is empty")
    train, val = data.split(split_seed)
    model.partial_fit(train, epochs=epochs)
    return model, model.score(val)


def predict_mask(model: FeasibilityMaskClassifier, pallet: PalletState, box: BoxSpec, orientation: int) -> FeasibilityMap:
    sample = MaskSample(pallet, box, orientation)
    probs = model.predict_proba([sample])[0]
    bits = (probs > model.threshold) & placeable(pallet, box, orientation)
    return FeasibilityMap(bits, probs)


class LearnedMask:
    """Mask provider backed by a (frozen during rollout) classifier."""

    def __init__(self, model: FeasibilityMaskClassifier):
        self.model = model

    def __call__(self, pallet, box, o):
        return predict_mask(self.model, pallet, box, o)

    def batch(self, queries: Sequence[tuple[PalletState, BoxSpec, int]]) -> list[FeasibilityMap]:
        if not queries:
            return []
        samples = [MaskSample(p, b, o) for p, b, o in queries]
        bits = self.model.predict(samples)
        return [FeasibilityMap(m) for m in bits]


def mask_config_hash(model: FeasibilityMaskClassifier) -> str:
    return hashlib.sha256(json.dumps(model.get_params(), sort_keys=True).encode()).hexdigest()[:16]


def save_model(model: FeasibilityMaskClassifier, path, config_hash: str = "") -> None:
    model._check_fitted()
    torch.save(
        {
            "format": "palletmask-mask",
            "version": CHECKPOINT_VERSION,
            "config_hash": config_hash,
            "params": model.get_params(),
            "state_dict": model.net_.state_dict(),
            "optimizer": model.optimizer_.state_dict(),
            "n_updates": model.n_updates_,
        },
        path,
    )


def load_model(path, config_hash: str | None = None) -> FeasibilityMaskClassifier:
    blob = torch.load(path, weights_only=False)
    if blob.get("format") != "palletmask-mask" or blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError("not a compatible mask checkpoint")
    if config_hash is not None and blob["config_hash"] != config_hash:
        raise ValueError("mask checkpoint was produced under a different configuration")
    model = FeasibilityMaskClassifier(**blob["params"])
    model._init_model()
    model.net_.load_state_dict(blob["state_dict"])
    model.optimizer_.load_state_dict(blob["optimizer"])
    model.n_updates_ = blob["n_updates"]
    return model

