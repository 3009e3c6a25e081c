"""Experiment configuration and the end-to-end pipeline behind the CLI.

Every random consumer gets its own seed derived from one master seed:

    split shuffle  -> derive_seed(master, SPLIT)
    weight init    -> derive_seed(master, INIT)      (+ member index for DEN)
    batch shuffle  -> derive_seed(master, SHUFFLE)   (+ member index for DEN)
    dropout masks  -> derive_seed(master, MASKS)     (per location and pass)

Scene generation is geometric and uses no master-seed randomness.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kvfile, metrics, net, uncertainty
from .dataset import NormalizationState, Rectangle, Split, SplitSpec, fit_normalizer, normalize
from .scene import CsiDataset, generate_dataset, load_scene, read_dataset

logger = logging.getLogger(__name__)

SPLIT, INIT, SHUFFLE, MASKS = 1, 2, 3, 4
METHODS = ("MCD", "DEN")
DEFAULT_S_VALUES = (1, 2, 4, 8, 16, 32)


def derive_seed(master: int, consumer: int) -> int:
    return int(np.random.SeedSequence([master, consumer]).generate_state(1)[0])


@dataclass(frozen=True)
class EvalSettings:
    b_max: float = 0.99
    n_steps: int = 100
    cell_size: float = 2.0


@dataclass(frozen=True)
class ExperimentConfig:
    scene_path: Path | None
    dataset_path: Path | None = None
    seed: int = 0
    method: str = "DEN"
    s_values: tuple[int, ...] = DEFAULT_S_VALUES
    split: SplitSpec = field(default_factory=SplitSpec)
    hidden_widths: tuple[int, ...] = (512, 256, 128, 64)
    n_mixtures: int = 3
    dropout_rate: float = 0.1
    dropout_layers: tuple[int, ...] = (1, 2, 3)
    init_std: float = 0.1
    mcd_train: net.TrainConfig = uncertainty.MCD_TRAIN_CONFIG
    den_train: net.TrainConfig = uncertainty.DEN_TRAIN_CONFIG
    evaluation: EvalSettings = field(default_factory=EvalSettings)
    output_dir: Path | None = None
    parallel: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise kvfile.ConfigError(f"key 'method' must be one of {METHODS}, got {self.method!r}")
        if not self.s_values or any(s < 1 for s in self.s_values):
            raise kvfile.ConfigError("key 's_values' must be a nonempty list of counts >= 1")
        if self.scene_path is None and self.dataset_path is None:
            raise kvfile.ConfigError("config needs a 'scene' or a 'dataset' key")

    @property
    def s_max(self) -> int:
        return max(self.s_values)

    def model_config(self, input_dim: int, method: str) -> net.MlpConfig:
        return net.MlpConfig(
            input_dim=input_dim,
            hidden_widths=self.hidden_widths,
            n_mixtures=self.n_mixtures,
            dropout_rate=self.dropout_rate if method == "MCD" else 0.0,
            dropout_layers=self.dropout_layers,
            init_std=self.init_std,
            seed=derive_seed(self.seed, INIT),
        )

    def train_config(self, method: str) -> net.TrainConfig:
        base = self.mcd_train if method == "MCD" else self.den_train
        return replace(base, seed=derive_seed(self.seed, SHUFFLE))

    def split_spec(self, holdout: bool = True) -> SplitSpec:
        return replace(
            self.split,
            shuffle_seed=derive_seed(self.seed, SPLIT),
            out_of_set_region=self.split.out_of_set_region if holdout else None,
        )


def _train_section(sec: kvfile.Section, prefix: str, base: net.TrainConfig) -> net.TrainConfig:
    return net.TrainConfig(
        learning_rate=sec.number(f"{prefix}.learning_rate", base.learning_rate),
        batch_size=sec.integer(f"{prefix}.batch_size", base.batch_size),
        max_epochs=sec.integer(f"{prefix}.max_epochs", base.max_epochs),
        patience=sec.integer(f"{prefix}.patience", base.patience),
        clip_value=sec.optional_number(f"{prefix}.clip_value", base.clip_value),
        adam_beta1=sec.number(f"{prefix}.adam_beta1", base.adam_beta1),
        adam_beta2=sec.number(f"{prefix}.adam_beta2", base.adam_beta2),
        adam_eps=sec.number(f"{prefix}.adam_eps", base.adam_eps),
    )


def load_config(path: str | Path, seed: int | None = None, output: str | Path | None = None,
                parallel: int | None = None) -> ExperimentConfig:
    """Parse an experiment file; command-line flags override file values."""
    path = Path(path)
    sec = kvfile.load_section(path)

    def rel(key):
        return (path.parent / sec.text(key)) if key in sec else None

    region = None
    if "split.out_of_set" in sec:
        x0, y0, x1, y1 = sec.numbers("split.out_of_set", length=4)
        region = Rectangle(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1))
    try:
        split_spec = SplitSpec(
            train_fraction=sec.number("split.train", 0.70),
            val_fraction=sec.number("split.val", 0.15),
            test_fraction=sec.number("split.test", 0.15),
            out_of_set_region=region,
        )
        return ExperimentConfig(
            scene_path=rel("scene"),
            dataset_path=rel("dataset"),
            seed=seed if seed is not None else sec.integer("seed", 0),
            method=sec.text("method", "DEN").upper(),
            s_values=sec.integers("s_values", DEFAULT_S_VALUES),
            split=split_spec,
            hidden_widths=sec.integers("model.hidden_widths", (512, 256, 128, 64)),
            n_mixtures=sec.integer("model.n_mixtures", 3),
            dropout_rate=sec.number("model.dropout_rate", 0.1),
            dropout_layers=sec.integers("model.dropout_layers", (1, 2, 3)),
            init_std=sec.number("model.init_std", 0.1),
            mcd_train=_train_section(sec, "mcd", uncertainty.MCD_TRAIN_CONFIG),
            den_train=_train_section(sec, "den", uncertainty.DEN_TRAIN_CONFIG),
            evaluation=EvalSettings(
                b_max=sec.number("eval.b_max", 0.99),
                n_steps=sec.integer("eval.n_steps", 100),
                cell_size=sec.number("eval.cell_size", 2.0),
            ),
            output_dir=Path(output) if output is not None else rel("output"),
            parallel=parallel if parallel is not None else sec.integer("parallel", 1),
        )
    except ValueError as exc:
        if str(exc).startswith(str(path)):  # already located by the Section getters
            raise
        raise kvfile.ConfigError(f"{path}: {exc}") from exc


def load_data(cfg: ExperimentConfig) -> CsiDataset:
    if cfg.dataset_path is not None:
        return read_dataset(cfg.dataset_path)
    return generate_dataset(load_scene(cfg.scene_path))


# --- training --------------------------------------------------------------

@dataclass
class TrainedModel:
    """Either a single dropout network (MCD) or an ensemble (DEN)."""

    method: str
    norm: NormalizationState
    cfg: net.MlpConfig
    params: net.ModelParams | None = None
    ensemble: uncertainty.EnsembleHandle | None = None
    histories: list[list[dict]] = field(default_factory=list)


def train_method(cfg: ExperimentConfig, method: str, data_split: Split) -> TrainedModel:
    norm = fit_normalizer(data_split.train)
    train_set = normalize(data_split.train, norm)
    val_set = normalize(data_split.val, norm)
    if len(data_split.val) == 0:
        raise ValueError("validation split is empty")
    model_cfg = cfg.model_config(data_split.train.features.shape[1], method)
    train_cfg = cfg.train_config(method)
    if method == "MCD":
        result = net.train(model_cfg, train_cfg, train_set, val_set)
        return TrainedModel("MCD", norm, model_cfg, params=result.params,
                            histories=[result.history])
    handle = uncertainty.train_ensemble(
        model_cfg, train_cfg, train_set, val_set, cfg.s_max, model_cfg.seed, norm,
        parallel=cfg.parallel,
    )
    return TrainedModel("DEN", norm, handle.cfg, ensemble=handle, histories=handle.histories)


def save_trained(model: TrainedModel, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    if model.method == "MCD":
        model.norm.save(directory / "normalization.txt")
        net.save_checkpoint(directory / "model", model.params, model.cfg, model.norm)
    else:
        uncertainty.save_ensemble(model.ensemble, directory)
    rows = ["member,epoch,train_loss,val_loss"]
    for member, history in enumerate(model.histories):
        rows += [f"{member},{h['epoch']},{h['train_loss']:.17g},{h['val_loss']:.17g}"
                 for h in history]
    (directory / "history.csv").write_text("\n".join(rows) + "\n")


def load_trained(directory: Path, method: str) -> TrainedModel:
    directory = Path(directory)
    if method == "MCD":
        manifest = directory / "model.manifest"
        if not manifest.exists():
            raise FileNotFoundError(f"missing checkpoint {manifest}")
        params, model_cfg, norm = net.load_checkpoint(manifest)
        return TrainedModel("MCD", norm, model_cfg, params=params)
    manifest = directory / "members.manifest"
    if not manifest.exists():
        raise FileNotFoundError(f"missing ensemble manifest {manifest}")
    handle = uncertainty.load_ensemble(manifest)
    return TrainedModel("DEN", handle.norm, handle.cfg, ensemble=handle)


# --- evaluation ------------------------------------------------------------

def estimate(cfg: ExperimentConfig, model: TrainedModel, test: CsiDataset, s: int):
    if model.method == "MCD":
        return uncertainty.mc_dropout_estimate(
            model.params, model.cfg, test.features, s, derive_seed(cfg.seed, MASKS),
            model.norm, test.location_ids,
        )
    return uncertainty.ensemble_estimate(model.ensemble.prefix(s), test.features)


def evaluate_method(
    cfg: ExperimentConfig, model: TrainedModel, data_split: Split,
    s_values: tuple[int, ...] | None = None,
) -> dict[int, metrics.EvalRecords]:
    test = data_split.test
    if len(test) == 0:
        raise ValueError("test split is empty")
    out = {}
    for s in s_values or cfg.s_values:
        est = estimate(cfg, model, test, s)
        out[s] = metrics.EvalRecords(test.location_ids, test.positions, est, test.los,
                                     data_split.test_out_of_set)
    return out


SUBSETS = ("all", "LOS", "NLOS", "out_of_set")


def subset_mask(records: metrics.EvalRecords, name: str) -> np.ndarray:
    return {
        "all": np.ones(len(records), dtype=bool),
        "LOS": records.los,
        "NLOS": ~records.los,
        "out_of_set": records.out_of_set,
    }[name]
