"""Localization accuracy and uncertainty-ranking quality."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .uncertainty import PositionEstimate

HEATMAP_FIELDS = ("rmse", "data_var", "model_var", "total_var")


@dataclass(frozen=True)
class EvalRecords:
    """Test-set records, one row per location."""

    location_ids: np.ndarray
    true_positions: np.ndarray
    estimate: PositionEstimate
    los: np.ndarray
    out_of_set: np.ndarray

    def __post_init__(self):
        n = len(self.location_ids)
        if not (len(self.true_positions) == len(self.estimate) == len(self.los)
                == len(self.out_of_set) == n):
            raise ValueError("record columns have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.location_ids)

    @property
    def squared_errors(self) -> np.ndarray:
        return np.sum((self.true_positions - self.estimate.mean) ** 2, axis=1)

    def subset(self, mask: np.ndarray) -> "EvalRecords":
        e = self.estimate
        est = PositionEstimate(e.mean[mask], e.data_variance[mask], e.model_variance[mask],
                               e.total_variance[mask], e.s_used, e.method, e.switch_rate)
        return EvalRecords(self.location_ids[mask], self.true_positions[mask], est,
                           self.los[mask], self.out_of_set[mask])


def rmse(records: EvalRecords | np.ndarray) -> float:
    """Root mean squared position error; accepts records or squared errors."""
    sq = records.squared_errors if isinstance(records, EvalRecords) else np.asarray(records)
    if sq.size == 0:
        raise ValueError("rmse of an empty record set")
    # exactly rounded sum: the result does not depend on the order of the records
    return math.sqrt(math.fsum(sq.ravel()) / sq.size)


def gaussian_nll(records: EvalRecords) -> float:
    """Mean NLL of the true positions under N(mean, diag(total variance)), in meters.

    Reported only; nothing is calibrated against it.
    """
    if len(records) == 0:
        raise ValueError("nll of an empty record set")
    var = records.estimate.total_variance
    diff = records.true_positions - records.estimate.mean
    per = 0.5 * np.sum(np.log(2 * np.pi * var) + diff**2 / var, axis=1)
    return math.fsum(per) / len(per)


@dataclass(frozen=True)
class SparsificationCurve:
    fractions: np.ndarray
    rmse_conf: np.ndarray
    rmse_orac: np.ndarray
    alpha: np.ndarray
    auco: float


def removal_order(scores: np.ndarray, location_ids: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties broken by ascending location id."""
    return np.lexsort((np.asarray(location_ids), -np.asarray(scores, dtype=np.float64)))


def remaining_rmse(squared_errors: np.ndarray, order: np.ndarray, n_removed: int) -> float:
    return rmse(np.asarray(squared_errors)[order[n_removed:]])


def sparsification_curve(
    squared_errors: np.ndarray,
    uncertainty: np.ndarray,
    location_ids: np.ndarray | None = None,
    b_max: float = 0.99,
    n_steps: int = 100,
    fractions: np.ndarray | None = None,
) -> SparsificationCurve:
    """Confidence and oracle curves over removed fractions, and their AUCO.

    At each fraction ``b`` the first ``floor(b * N)`` locations of each
    ordering are removed and the RMSE of the rest is reported.
    """
    sq = np.asarray(squared_errors, dtype=np.float64)
    n = len(sq)
    if n == 0:
        raise ValueError("sparsification of an empty record set")
    ids = np.arange(n) if location_ids is None else np.asarray(location_ids)
    if fractions is None:
        if not 0 <= b_max < 1:
            raise ValueError("b_max must lie in [0, 1)")
        fractions = np.linspace(0.0, b_max, n_steps + 1)
    fractions = np.asarray(fractions, dtype=np.float64)
    removed = np.minimum(np.floor(fractions * n + 1e-9).astype(int), n - 1)
    conf_order = removal_order(uncertainty, ids)
    orac_order = removal_order(sq, ids)
    conf = np.array([remaining_rmse(sq, conf_order, k) for k in removed])
    orac = np.array([remaining_rmse(sq, orac_order, k) for k in removed])
    alpha = orac - conf
    auco = float(np.trapezoid(np.abs(alpha), fractions)) if len(fractions) > 1 else 0.0
    return SparsificationCurve(fractions, conf, orac, alpha, auco)


def sparsification(
    records: EvalRecords, b_max: float = 0.99, n_steps: int = 100
) -> SparsificationCurve:
    return sparsification_curve(
        records.squared_errors, records.estimate.uncertainty_scalar, records.location_ids,
        b_max, n_steps,
    )


def rmse_reduction(curve: SparsificationCurve, fraction: float, which: str = "conf") -> float:
    """Relative RMSE drop after removing ``fraction`` of locations."""
    values = curve.rmse_conf if which == "conf" else curve.rmse_orac
    i = int(np.argmin(np.abs(curve.fractions - fraction)))
    return 1.0 - values[i] / values[0]


@dataclass(frozen=True)
class Heatmap:
    """Cell aggregates on an axis-aligned grid; absent cells are NaN with count 0."""

    origin: np.ndarray
    cell_size: float
    values: np.ndarray  # (n_x, n_y)
    counts: np.ndarray  # (n_x, n_y)
    field: str

    def cell_centres(self) -> tuple[np.ndarray, np.ndarray]:
        nx, ny = self.values.shape
        return (self.origin[0] + (np.arange(nx) + 0.5) * self.cell_size,
                self.origin[1] + (np.arange(ny) + 0.5) * self.cell_size)


def _field_values(records: EvalRecords, field: str) -> np.ndarray:
    e = records.estimate
    if field == "rmse":
        return records.squared_errors
    if field == "data_var":
        return e.data_variance.sum(axis=1)
    if field == "model_var":
        return e.model_variance.sum(axis=1)
    if field == "total_var":
        return e.total_variance.sum(axis=1)
    raise ValueError(f"unknown heatmap field {field!r}; expected one of {HEATMAP_FIELDS}")


def heatmap(records: EvalRecords, cell_size: float, field: str = "rmse") -> Heatmap:
    """Bin records by true position; per-cell RMSE or mean variance trace."""
    if len(records) == 0:
        raise ValueError("heatmap of an empty record set")
    if not cell_size > 0:
        raise ValueError("cell_size must be positive")
    values = _field_values(records, field)
    pos = records.true_positions
    lo = pos.min(axis=0)
    shape = np.floor((pos.max(axis=0) - lo) / cell_size).astype(int) + 1
    cell = np.minimum(np.floor((pos - lo) / cell_size).astype(int), shape - 1)
    counts = np.zeros(shape, dtype=np.int64)
    sums = np.zeros(shape)
    np.add.at(counts, (cell[:, 0], cell[:, 1]), 1)
    np.add.at(sums, (cell[:, 0], cell[:, 1]), values)
    with np.errstate(invalid="ignore", divide="ignore"):
        agg = np.where(counts > 0, sums / counts, np.nan)
    if field == "rmse":
        agg = np.sqrt(agg)
    return Heatmap(lo, float(cell_size), agg, counts, field)


# --- exports ---------------------------------------------------------------

PREDICTION_COLUMNS = ("location_id", "x_true", "y_true", "x_est", "y_est", "var_data_x",
                      "var_data_y", "var_model_x", "var_model_y", "los_flag", "out_of_set_flag")


def _g(v: float) -> str:
    return f"{v:.17g}"


def write_predictions(records: EvalRecords, path: str | Path) -> None:
    e = records.estimate
    lines = [",".join(PREDICTION_COLUMNS)]
    for i in range(len(records)):
        row = [str(int(records.location_ids[i]))]
        row += [_g(v) for v in (*records.true_positions[i], *e.mean[i], *e.data_variance[i],
                                *e.model_variance[i])]
        row += ["1" if records.los[i] else "0", "1" if records.out_of_set[i] else "0"]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_predictions(path: str | Path) -> dict[str, np.ndarray]:
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {name: table[:, i] for i, name in enumerate(PREDICTION_COLUMNS)}


def write_curve(curve: SparsificationCurve, path: str | Path) -> None:
    """Fractions, absolute and full-set-normalized RMSE columns, and alpha."""
    base = curve.rmse_conf[0] if curve.rmse_conf[0] > 0 else 1.0
    lines = ["fraction,rmse_conf,rmse_orac,alpha,rmse_conf_norm,rmse_orac_norm"]
    for b, c, o, a in zip(curve.fractions, curve.rmse_conf, curve.rmse_orac, curve.alpha):
        lines.append(",".join(_g(v) for v in (b, c, o, a, c / base, o / base)))
    Path(path).write_text("\n".join(lines) + "\n")


def write_heatmap(hm: Heatmap, path: str | Path) -> None:
    xs, ys = hm.cell_centres()
    lines = ["cell_x,cell_y,value,count"]
    for i, j in zip(*np.nonzero(hm.counts)):
        lines.append(f"{_g(xs[i])},{_g(ys[j])},{_g(hm.values[i, j])},{hm.counts[i, j]}")
    Path(path).write_text("\n".join(lines) + "\n")
