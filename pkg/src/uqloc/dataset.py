"""Input normalization, target scaling and deterministic train/val/test splits."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kvfile
from .scene import CsiDataset

NORMALIZATION_MAGIC = "uqloc-norm v1"


@dataclass(frozen=True)
class NormalizationState:
    delta_norm: float
    target_min: tuple[float, float]
    target_max: tuple[float, float]

    def __post_init__(self):
        if not self.delta_norm > 0:
            raise ValueError("delta_norm must be positive")
        if not np.all(np.asarray(self.target_max) > np.asarray(self.target_min)):
            raise ValueError("target_max must exceed target_min in every coordinate")

    @property
    def scale(self) -> np.ndarray:
        """Meters per scaled unit, per coordinate."""
        return np.asarray(self.target_max) - np.asarray(self.target_min)

    def to_entries(self) -> dict:
        return {
            "normalization.delta_norm": float(self.delta_norm),
            "normalization.target_min": [float(v) for v in self.target_min],
            "normalization.target_max": [float(v) for v in self.target_max],
        }

    @classmethod
    def from_section(cls, sec: kvfile.Section) -> "NormalizationState":
        return cls(
            sec.number("normalization.delta_norm"),
            sec.numbers("normalization.target_min", length=2),
            sec.numbers("normalization.target_max", length=2),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(kvfile.dump(self.to_entries(), header=NORMALIZATION_MAGIC))

    @classmethod
    def load(cls, path: str | Path) -> "NormalizationState":
        return cls.from_section(kvfile.load_section(path))


def fit_normalizer(train: CsiDataset) -> NormalizationState:
    if len(train) == 0:
        raise ValueError("cannot fit a normalizer on an empty training set")
    delta = float(np.max(np.abs(train.features)))
    if delta == 0.0:
        raise ValueError("all training features are zero")
    lo = train.positions.min(axis=0)
    hi = train.positions.max(axis=0)
    return NormalizationState(delta, tuple(map(float, lo)), tuple(map(float, hi)))


def normalize_features(features: np.ndarray, state: NormalizationState) -> np.ndarray:
    return np.asarray(features, dtype=np.float64) / state.delta_norm


def normalize_positions(positions: np.ndarray, state: NormalizationState) -> np.ndarray:
    return (np.asarray(positions, dtype=np.float64) - np.asarray(state.target_min)) / state.scale


def denormalize_position(scaled: np.ndarray, state: NormalizationState) -> np.ndarray:
    return np.asarray(scaled, dtype=np.float64) * state.scale + np.asarray(state.target_min)


def denormalize_variance(scaled_var: np.ndarray, state: NormalizationState) -> np.ndarray:
    return np.asarray(scaled_var, dtype=np.float64) * state.scale**2


def normalize(data: CsiDataset, state: NormalizationState) -> tuple[np.ndarray, np.ndarray]:
    """Scaled ``(features, targets)`` arrays; test targets may leave [0, 1]."""
    return normalize_features(data.features, state), normalize_positions(data.positions, state)


@dataclass(frozen=True)
class Rectangle:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def contains(self, positions: np.ndarray) -> np.ndarray:
        p = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        return (
            (p[:, 0] >= self.x_min) & (p[:, 0] <= self.x_max)
            & (p[:, 1] >= self.y_min) & (p[:, 1] <= self.y_max)
        )


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.70
    val_fraction: float = 0.15
    test_fraction: float = 0.15
    shuffle_seed: int = 0
    out_of_set_region: Rectangle | None = None

    def __post_init__(self):
        fractions = (self.train_fraction, self.val_fraction, self.test_fraction)
        if not all(0 < f < 1 for f in fractions):
            raise ValueError("split fractions must lie in (0, 1)")
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


@dataclass
class Split:
    train: CsiDataset
    val: CsiDataset
    test: CsiDataset
    test_out_of_set: np.ndarray


def split(data: CsiDataset, spec: SplitSpec) -> Split:
    """Seeded shuffle and partition; the out-of-set region goes to test only.

    The partition is computed before the holdout is applied, so the
    assignment of samples outside the region does not depend on it.
    """
    n = len(data)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    order = np.random.default_rng(spec.shuffle_seed).permutation(n)
    n_train = int(np.floor(spec.train_fraction * n + 1e-9))
    n_val = int(np.floor(spec.val_fraction * n + 1e-9))
    train_idx, val_idx, test_idx = np.split(order, [n_train, n_train + n_val])
    oos = np.zeros(n, dtype=bool)
    if spec.out_of_set_region is not None:
        oos = spec.out_of_set_region.contains(data.positions)
        moved = np.concatenate([train_idx[oos[train_idx]], val_idx[oos[val_idx]]])
        train_idx = train_idx[~oos[train_idx]]
        val_idx = val_idx[~oos[val_idx]]
        test_idx = np.concatenate([test_idx, moved])
    if len(train_idx) == 0:
        raise ValueError("training split is empty after the out-of-set holdout")
    return Split(
        data.subset(train_idx), data.subset(val_idx), data.subset(test_idx), oos[test_idx]
    )
