"""Feedforward network with hand-written reverse-mode gradients.

Hidden layers are affine + ReLU, optionally followed by inverted dropout.
The output layer is affine and unconstrained; the loss function turns raw
outputs into a scalar and returns its gradient with respect to them, so
backpropagation here only has to chain through the dense layers.
All arithmetic is float64.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import kvfile, mdn
from .dataset import NormalizationState

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "uqloc-ckpt v1"
MODES = ("train", "eval", "mc_dropout")

LossFn = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


class TrainingError(RuntimeError):
    """Non-finite loss or another unrecoverable training failure."""


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_widths: tuple[int, ...] = (512, 256, 128, 64)
    n_mixtures: int = 3
    dropout_rate: float = 0.0
    dropout_layers: tuple[int, ...] = (1, 2, 3)
    init_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.input_dim < 1 or any(w < 1 for w in self.hidden_widths):
            raise ValueError("layer widths must be positive")
        if self.n_mixtures < 1:
            raise ValueError("n_mixtures must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.dropout_rate > 0 and any(
            not 1 <= v <= len(self.hidden_widths) for v in self.dropout_layers
        ):
            raise ValueError("dropout_layers must index hidden layers 1..V")
        if not self.init_std > 0:
            raise ValueError("init_std must be positive")

    @property
    def output_units(self) -> int:
        return mdn.output_units(self.n_mixtures)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_widths, self.output_units]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 512
    max_epochs: int = 600
    patience: int = 80
    clip_value: float | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            raise ValueError("patience must lie in 0..max_epochs")
        if self.clip_value is not None and not self.clip_value > 0:
            raise ValueError("clip_value must be positive or None")


@dataclass
class ModelParams:
    weights: list[np.ndarray]  # layer l maps (B, n_l) -> (B, n_{l+1}) as x @ W
    biases: list[np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> list[np.ndarray]:
        """Parameters in declared order: W1, b1, W2, b2, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, flat: np.ndarray, sizes: list[int]) -> "ModelParams":
        weights, biases, pos = [], [], 0
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            weights.append(flat[pos : pos + n_in * n_out].reshape(n_in, n_out).copy())
            pos += n_in * n_out
            biases.append(flat[pos : pos + n_out].copy())
            pos += n_out
        if pos != len(flat):
            raise ValueError(f"flat vector has {len(flat)} values, layer sizes need {pos}")
        return cls(weights, biases)

    def same_shape(self, other: "ModelParams") -> bool:
        return [a.shape for a in self.arrays()] == [a.shape for a in other.arrays()]


def init_params(cfg: MlpConfig) -> ModelParams:
    rng = np.random.default_rng(cfg.seed)
    sizes = cfg.layer_sizes
    weights = [rng.normal(0.0, cfg.init_std, size=(a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
    biases = [np.zeros(b) for b in sizes[1:]]
    return ModelParams(weights, biases)


def dropout_masks(cfg: MlpConfig, batch: int, rng: np.random.Generator) -> dict[int, np.ndarray]:
    """Inverted-dropout multipliers (0 or 1/(1-rate)) per dropout layer."""
    if cfg.dropout_rate == 0.0:
        return {}
    keep = 1.0 - cfg.dropout_rate
    return {
        v: (rng.random((batch, cfg.hidden_widths[v - 1])) < keep) / keep
        for v in sorted(cfg.dropout_layers)
    }


def _forward(params, cfg, x, mode, rng, masks):
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise ValueError(f"expected batch of shape (B, {cfg.input_dim}), got {x.shape}")
    if mode != "eval" and masks is None:
        if rng is None:
            raise ValueError(f"mode {mode!r} needs an rng or explicit masks")
        masks = dropout_masks(cfg, len(x), rng)
    if mode == "eval":
        masks = {}
    pre, acts = [], [x]
    a = x
    for v, (w, b) in enumerate(zip(params.weights[:-1], params.biases[:-1]), start=1):
        z = a @ w + b
        a = np.maximum(z, 0.0)
        if v in masks:
            a = a * masks[v]
        pre.append(z)
        acts.append(a)
    raw = a @ params.weights[-1] + params.biases[-1]
    return raw, (pre, acts, masks)


def forward(
    params: ModelParams,
    cfg: MlpConfig,
    batch: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    masks: dict[int, np.ndarray] | None = None,
) -> np.ndarray:
    """Raw ``(B, 5K)`` outputs. Dropout is active in train and mc_dropout modes."""
    return _forward(params, cfg, batch, mode, rng, masks)[0]


def backward(
    params: ModelParams,
    cfg: MlpConfig,
    batch: np.ndarray,
    targets: np.ndarray,
    loss_fn: LossFn,
    mode: str = "train",
    rng: np.random.Generator | None = None,
    masks: dict[int, np.ndarray] | None = None,
) -> tuple[float, ModelParams]:
    """Mean batch loss and its exact gradient for every parameter."""
    raw, (pre, acts, masks) = _forward(params, cfg, batch, mode, rng, masks)
    loss, g = loss_fn(raw, targets)
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}")
    n_layers = len(params.weights)
    g_w: list[np.ndarray] = [None] * n_layers
    g_b: list[np.ndarray] = [None] * n_layers
    for layer in range(n_layers - 1, -1, -1):
        g_w[layer] = acts[layer].T @ g
        g_b[layer] = g.sum(axis=0)
        if layer == 0:
            break
        g = g @ params.weights[layer].T
        if layer in masks:
            g = g * masks[layer]
        g = g * (pre[layer - 1] > 0)
    return loss, ModelParams(g_w, g_b)


def clip_gradients(grads: ModelParams, clip_value: float) -> ModelParams:
    if not clip_value > 0:
        raise ValueError("clip_value must be positive")
    return ModelParams(
        [np.clip(w, -clip_value, clip_value) for w in grads.weights],
        [np.clip(b, -clip_value, clip_value) for b in grads.biases],
    )


@dataclass
class AdamState:
    first: list[np.ndarray]
    second: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adam_step(
    params: ModelParams, grads: ModelParams, state: AdamState, cfg: TrainConfig
) -> ModelParams:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    lr_t = cfg.learning_rate * math.sqrt(1.0 - b2**t) / (1.0 - b1**t)
    eps_t = cfg.adam_eps * math.sqrt(1.0 - b2**t)
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.first, state.second):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr_t * m / (np.sqrt(v) + eps_t)
    return params


def evaluate_loss(
    params: ModelParams, cfg: MlpConfig, x: np.ndarray, y: np.ndarray, loss_fn: LossFn,
    chunk: int = 4096,
) -> float:
    """Eval-mode mean loss over a whole set."""
    total = 0.0
    for start in range(0, len(x), chunk):
        raw = forward(params, cfg, x[start : start + chunk], "eval")
        loss, _ = loss_fn(raw, y[start : start + chunk])
        total += loss * len(raw)
    return total / len(x)


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def train(
    model_cfg: MlpConfig,
    train_cfg: TrainConfig,
    train_set: tuple[np.ndarray, np.ndarray],
    val_set: tuple[np.ndarray, np.ndarray],
    loss_fn: LossFn = mdn.nll_and_grad,
) -> TrainResult:
    """Minibatch Adam with early stopping on validation loss.

    Returns the parameters of the epoch with the lowest validation loss.
    Each epoch draws its shuffle order and dropout masks from a generator
    seeded with ``(train_cfg.seed, epoch)``.
    """
    x_tr, y_tr = (np.asarray(a, dtype=np.float64) for a in train_set)
    x_va, y_va = (np.asarray(a, dtype=np.float64) for a in val_set)
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValueError("training and validation sets must be nonempty")
    params = init_params(model_cfg)
    state = AdamState.zeros_like(params)
    best = (math.inf, params.copy(), 0)
    history: list[dict] = []
    wait = 0
    for epoch in range(1, train_cfg.max_epochs + 1):
        rng = np.random.default_rng([train_cfg.seed, epoch])
        order = rng.permutation(len(x_tr))
        running = 0.0
        for b, start in enumerate(range(0, len(order), train_cfg.batch_size)):
            idx = order[start : start + train_cfg.batch_size]
            try:
                loss, grads = backward(
                    params, model_cfg, x_tr[idx], y_tr[idx], loss_fn, "train", rng
                )
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from None
            if train_cfg.clip_value is not None:
                grads = clip_gradients(grads, train_cfg.clip_value)
            adam_step(params, grads, state, train_cfg)
            running += loss * len(idx)
        val_loss = evaluate_loss(params, model_cfg, x_va, y_va, loss_fn)
        if not math.isfinite(val_loss):
            raise TrainingError(f"epoch {epoch}: non-finite validation loss {val_loss}")
        history.append({"epoch": epoch, "train_loss": running / len(x_tr), "val_loss": val_loss})
        if val_loss < best[0]:
            best = (val_loss, params.copy(), epoch)
            wait = 0
        else:
            wait += 1
            if wait >= train_cfg.patience:
                break
    logger.debug("stopped after %d epochs, best epoch %d", len(history), best[2])
    return TrainResult(best[1], history, best[2])


# --- checkpoints -----------------------------------------------------------

def _config_entries(cfg: MlpConfig) -> dict:
    return {
        "model.input_dim": cfg.input_dim,
        "model.hidden_widths": list(cfg.hidden_widths),
        "model.n_mixtures": cfg.n_mixtures,
        "model.dropout_rate": float(cfg.dropout_rate),
        "model.dropout_layers": list(cfg.dropout_layers),
        "model.init_std": float(cfg.init_std),
        "model.seed": cfg.seed,
    }


def config_from_section(sec: kvfile.Section, **overrides) -> MlpConfig:
    values = dict(
        input_dim=sec.integer("model.input_dim"),
        hidden_widths=sec.integers("model.hidden_widths", MlpConfig.hidden_widths),
        n_mixtures=sec.integer("model.n_mixtures", MlpConfig.n_mixtures),
        dropout_rate=sec.number("model.dropout_rate", MlpConfig.dropout_rate),
        dropout_layers=sec.integers("model.dropout_layers", MlpConfig.dropout_layers),
        init_std=sec.number("model.init_std", MlpConfig.init_std),
        seed=sec.integer("model.seed", 0),
    )
    values.update(overrides)
    return MlpConfig(**values)


def save_checkpoint(
    path: str | Path, params: ModelParams, cfg: MlpConfig, norm: NormalizationState
) -> Path:
    """Write ``<path>.manifest`` (text) and ``<path>.bin`` (little-endian float64)."""
    path = Path(path)
    data_file = path.with_suffix(".bin")
    flat = params.flat().astype("<f8")
    data_file.write_bytes(flat.tobytes())
    entries = {"format": CHECKPOINT_MAGIC, "data_file": data_file.name, "dtype": "float64",
               "byteorder": "little", "n_values": flat.size}
    entries.update(_config_entries(cfg))
    for i, (w, b) in enumerate(zip(params.weights, params.biases), start=1):
        entries[f"layer.{i}.weight_shape"] = list(w.shape)
        entries[f"layer.{i}.bias_shape"] = [b.size]
    entries.update(norm.to_entries())
    manifest = path.with_suffix(".manifest")
    manifest.write_text(kvfile.dump(entries, header=CHECKPOINT_MAGIC))
    return manifest


def load_checkpoint(path: str | Path) -> tuple[ModelParams, MlpConfig, NormalizationState]:
    manifest = Path(path).with_suffix(".manifest")
    sec = kvfile.load_section(manifest)
    if sec.text("format") != CHECKPOINT_MAGIC:
        raise ValueError(f"{manifest}: unsupported checkpoint format {sec.text('format')!r}")
    cfg = config_from_section(sec)
    flat = np.frombuffer((manifest.parent / sec.text("data_file")).read_bytes(), dtype="<f8")
    if flat.size != sec.integer("n_values"):
        raise ValueError(f"{manifest}: data file holds {flat.size} values, expected "
                         f"{sec.integer('n_values')}")
    params = ModelParams.from_flat(flat.astype(np.float64), cfg.layer_sizes)
    return params, cfg, NormalizationState.from_section(sec)

