"""Model uncertainty from MC-dropout passes or deep-ensemble members.

Both estimators reduce a stack of per-pass (or per-member) highest-weight
mixture predictions the same way: the position is the mean of the chosen
means, data variance is the mean of the chosen variances and model
variance is the biased (1/S) spread of the chosen means. Everything
returned is in meters / meters^2.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kvfile, mdn, net
from .dataset import NormalizationState, denormalize_position, denormalize_variance, normalize_features

logger = logging.getLogger(__name__)

ENSEMBLE_MAGIC = "uqloc-ensemble v1"
MCD_TRAIN_CONFIG = net.TrainConfig(max_epochs=600, patience=80, clip_value=None)
DEN_TRAIN_CONFIG = net.TrainConfig(max_epochs=300, patience=30, clip_value=1.0)


@dataclass(frozen=True)
class PositionEstimate:
    """Per-location estimates; array fields have shape ``(N, 2)``."""

    mean: np.ndarray
    data_variance: np.ndarray
    model_variance: np.ndarray
    total_variance: np.ndarray
    s_used: int
    method: str
    switch_rate: float = 0.0

    @property
    def uncertainty_scalar(self) -> np.ndarray:
        """Trace of the diagonal total covariance, used to rank locations."""
        return self.total_variance[..., 0] + self.total_variance[..., 1]

    def __len__(self) -> int:
        return len(self.mean)


def aggregate(
    means: np.ndarray,
    variances: np.ndarray,
    norm: NormalizationState,
    method: str,
    chosen: np.ndarray | None = None,
) -> PositionEstimate:
    """Reduce ``(S, N, 2)`` scaled per-pass predictions to a :class:`PositionEstimate`."""
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    s = means.shape[0]
    if s < 1:
        raise ValueError("need at least one pass or member")
    # spread measured from the first pass so identical passes give exactly zero
    offsets = means - means[0]
    mean_offset = offsets.mean(axis=0)
    centre = means[0] + mean_offset
    data_var = denormalize_variance(variances.mean(axis=0), norm)
    model_var = denormalize_variance(((offsets - mean_offset) ** 2).mean(axis=0), norm)
    switch_rate = 0.0
    if chosen is not None and s > 1:
        switch_rate = float(np.mean(np.any(chosen != chosen[:1], axis=0)))
        if switch_rate > 0:
            logger.info("%s: chosen mixture switches across passes for %.1f%% of inputs",
                        method, 100 * switch_rate)
    return PositionEstimate(
        mean=denormalize_position(centre, norm),
        data_variance=data_var,
        model_variance=model_var,
        total_variance=data_var + model_var,
        s_used=s,
        method=method,
        switch_rate=switch_rate,
    )


def pass_masks(
    cfg: net.MlpConfig, location_ids: np.ndarray, pass_index: int, mask_seed: int
) -> dict[int, np.ndarray]:
    """Dropout masks for one pass, drawn per location so batching cannot change them."""
    rows = [
        net.dropout_masks(cfg, 1, np.random.default_rng([mask_seed, int(i), pass_index]))
        for i in location_ids
    ]
    if not rows or not rows[0]:
        return {}
    return {v: np.concatenate([r[v] for r in rows]) for v in rows[0]}


def mc_dropout_estimate(
    params: net.ModelParams,
    cfg: net.MlpConfig,
    features: np.ndarray,
    s: int,
    mask_seed: int,
    norm: NormalizationState,
    location_ids: np.ndarray | None = None,
) -> PositionEstimate:
    """``s`` stochastic passes with test-time dropout over raw (unnormalized) CSI rows."""
    if s < 1:
        raise ValueError("s must be >= 1")
    x = normalize_features(np.atleast_2d(features), norm)
    ids = np.arange(len(x)) if location_ids is None else np.asarray(location_ids)
    if cfg.dropout_rate == 0.0:
        logger.warning("MC-dropout on a model without dropout: all passes coincide")
    means, variances, chosen = [], [], []
    for p in range(s):
        raw = net.forward(params, cfg, x, "mc_dropout", masks=pass_masks(cfg, ids, p, mask_seed))
        pred = mdn.predict(mdn.constrain(raw))
        means.append(pred.mean)
        variances.append(pred.data_variance)
        chosen.append(pred.chosen_mixture)
    return aggregate(np.stack(means), np.stack(variances), norm, "MCD", np.stack(chosen))


@dataclass
class EnsembleHandle:
    members: list[net.ModelParams]
    cfg: net.MlpConfig
    norm: NormalizationState
    histories: list[list[dict]] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        for i, m in enumerate(self.members[1:], start=1):
            if not m.same_shape(self.members[0]):
                raise ValueError(f"ensemble member {i} has a different architecture")

    def __len__(self) -> int:
        return len(self.members)

    def prefix(self, s: int) -> "EnsembleHandle":
        if not 1 <= s <= len(self.members):
            raise ValueError(f"ensemble has {len(self.members)} members, asked for {s}")
        return EnsembleHandle(self.members[:s], self.cfg, self.norm, self.histories[:s])


def ensemble_estimate(handle: EnsembleHandle, features: np.ndarray) -> PositionEstimate:
    """One eval-mode pass per member over raw (unnormalized) CSI rows."""
    x = normalize_features(np.atleast_2d(features), handle.norm)
    means, variances, chosen = [], [], []
    for member in handle.members:
        pred = mdn.predict(mdn.constrain(net.forward(member, handle.cfg, x, "eval")))
        means.append(pred.mean)
        variances.append(pred.data_variance)
        chosen.append(pred.chosen_mixture)
    return aggregate(np.stack(means), np.stack(variances), handle.norm, "DEN", np.stack(chosen))


def _train_member(args):
    model_cfg, train_cfg, train_set, val_set, index = args
    try:
        return net.train(
            replace(model_cfg, seed=model_cfg.seed + index),
            replace(train_cfg, seed=train_cfg.seed + index),
            train_set,
            val_set,
        )
    except net.TrainingError as exc:
        raise net.TrainingError(f"ensemble member {index}: {exc}") from None


def train_ensemble(
    model_cfg: net.MlpConfig,
    train_cfg: net.TrainConfig,
    train_set: tuple[np.ndarray, np.ndarray],
    val_set: tuple[np.ndarray, np.ndarray],
    s: int,
    base_seed: int,
    norm: NormalizationState,
    parallel: int = 1,
) -> EnsembleHandle:
    """Train ``s`` dropout-free members.

    Member ``i`` initializes with seed ``base_seed + i`` and shuffles with
    ``train_cfg.seed + i``. ``train_set``/``val_set`` are normalized
    ``(features, targets)`` pairs. Results do not depend on ``parallel``.
    """
    if s < 1:
        raise ValueError("s must be >= 1")
    model_cfg = replace(model_cfg, dropout_rate=0.0, seed=base_seed)
    jobs = [(model_cfg, train_cfg, train_set, val_set, i) for i in range(s)]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_train_member, jobs))
    else:
        results = [_train_member(job) for job in jobs]
    return EnsembleHandle(
        [r.params for r in results], model_cfg, norm,
        [r.history for r in results],
    )


def save_ensemble(handle: EnsembleHandle, directory: str | Path, stem: str = "member") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    norm_file = directory / "normalization.txt"
    handle.norm.save(norm_file)
    entries: dict = {"format": ENSEMBLE_MAGIC, "normalization": norm_file.name,
                     "n_members": len(handle)}
    for i, member in enumerate(handle.members):
        cfg = replace(handle.cfg, seed=handle.cfg.seed + i)
        manifest = net.save_checkpoint(directory / f"{stem}_{i:02d}", member, cfg, handle.norm)
        entries[f"member.{i}"] = manifest.name
    path = directory / f"{stem}s.manifest"
    path.write_text(kvfile.dump(entries, header=ENSEMBLE_MAGIC))
    return path


def load_ensemble(path: str | Path) -> EnsembleHandle:
    path = Path(path)
    sec = kvfile.load_section(path)
    if sec.text("format") != ENSEMBLE_MAGIC:
        raise ValueError(f"{path}: not an ensemble manifest")
    norm = NormalizationState.load(path.parent / sec.text("normalization"))
    members, cfg = [], None
    for i in range(sec.integer("n_members")):
        params, member_cfg, _ = net.load_checkpoint(path.parent / sec.text(f"member.{i}"))
        members.append(params)
        cfg = cfg or member_cfg
    return EnsembleHandle(members, cfg, norm)
