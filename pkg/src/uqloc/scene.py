"""Synthetic massive-MIMO CSI from a parametric 2-D scene.

The propagation model is geometric: a direct path when the BS-user segment
clears every blocker, plus one single-bounce path per reflector found with
the mirror-image construction. Each path is rendered into the uniform
planar array response and summed into the narrowband channel of one
subcarrier.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import kvfile

logger = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0
DATASET_MAGIC = "uqloc-csi v1"


@dataclass(frozen=True)
class UserGrid:
    origin: tuple[float, float]
    rows: int
    cols: int
    spacing: float
    height: float

    def positions(self) -> np.ndarray:
        """Row-major ``(rows * cols, 2)`` user positions; row index runs along y."""
        rr, cc = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        x = self.origin[0] + cc.ravel() * self.spacing
        y = self.origin[1] + rr.ravel() * self.spacing
        return np.column_stack([x, y]).astype(np.float64)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.asarray(self.origin, dtype=np.float64)
        hi = lo + self.spacing * np.array([self.cols - 1, self.rows - 1], dtype=np.float64)
        return lo, hi


@dataclass(frozen=True)
class Blocker:
    """Vertical screen standing on the ground along a 2-D segment."""

    start: tuple[float, float]
    end: tuple[float, float]
    height: float


@dataclass(frozen=True)
class Reflector:
    """Vertical reflecting wall; ``loss`` multiplies the bounced path power."""

    start: tuple[float, float]
    end: tuple[float, float]
    loss: float


@dataclass(frozen=True)
class SceneSpec:
    carrier_frequency: float
    bandwidth: float
    m_y: int
    m_z: int
    n_subcarriers: int
    n_paths_max: int
    bs_position: tuple[float, float, float]
    bs_orientation: float
    user_grid: UserGrid
    blockers: tuple[Blocker, ...] = ()
    reflectors: tuple[Reflector, ...] = ()
    reference_gain: float = 1.0
    path_loss_exponent: float = 2.5
    rng_seed: int = 0

    def __post_init__(self):
        if self.m_y < 1 or self.m_z < 1:
            raise ValueError("antenna counts m_y, m_z must be >= 1")
        if self.n_paths_max < 1:
            raise ValueError("n_paths_max must be >= 1")
        if self.n_subcarriers < 1:
            raise ValueError("n_subcarriers must be >= 1")
        if not self.carrier_frequency > 0 or not self.bandwidth > 0:
            raise ValueError("carrier_frequency and bandwidth must be positive")
        if self.user_grid.rows < 1 or self.user_grid.cols < 1 or not self.user_grid.spacing > 0:
            raise ValueError("user grid needs rows, cols >= 1 and positive spacing")
        for r in self.reflectors:
            if not 0 < r.loss <= 1:
                raise ValueError(f"reflector loss must lie in (0, 1], got {r.loss}")

    @property
    def n_antennas(self) -> int:
        return self.m_y * self.m_z

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency


@dataclass(frozen=True)
class PathSet:
    gains: np.ndarray
    delays: np.ndarray
    azimuths: np.ndarray
    elevations: np.ndarray
    los_flag: bool

    def __len__(self) -> int:
        return len(self.gains)


@dataclass(frozen=True)
class CsiSample:
    features: np.ndarray
    position: np.ndarray
    los_flag: bool
    location_id: int


@dataclass
class CsiDataset:
    """Column-oriented collection of :class:`CsiSample` records."""

    features: np.ndarray
    positions: np.ndarray
    los: np.ndarray
    location_ids: np.ndarray
    n_antennas: int = field(default=0)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        self.los = np.asarray(self.los, dtype=bool)
        self.location_ids = np.asarray(self.location_ids, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if not self.n_antennas:
            self.n_antennas = self.features.shape[1] // 2
        n = len(self.features)
        if not (len(self.positions) == len(self.los) == len(self.location_ids) == n):
            raise ValueError("dataset columns have inconsistent lengths")
        if self.features.shape[1] != 2 * self.n_antennas:
            raise ValueError(
                f"feature length {self.features.shape[1]} != 2M = {2 * self.n_antennas}"
            )

    def __len__(self) -> int:
        return len(self.features)

    def __getitem__(self, i: int) -> CsiSample:
        return CsiSample(
            self.features[i], self.positions[i], bool(self.los[i]), int(self.location_ids[i])
        )

    def __iter__(self) -> Iterator[CsiSample]:
        return (self[i] for i in range(len(self)))

    def subset(self, index) -> "CsiDataset":
        index = np.asarray(index)
        return CsiDataset(
            self.features[index],
            self.positions[index],
            self.los[index],
            self.location_ids[index],
            self.n_antennas,
        )

    @classmethod
    def from_samples(cls, samples: Sequence[CsiSample]) -> "CsiDataset":
        if not samples:
            raise ValueError("no samples")
        return cls(
            np.stack([s.features for s in samples]),
            np.stack([s.position for s in samples]),
            np.array([s.los_flag for s in samples]),
            np.array([s.location_id for s in samples]),
        )


# --- array response -------------------------------------------------------

def steering_vector_y(phi_az: float, phi_el: float, m_y: int) -> np.ndarray:
    p = np.arange(m_y)
    return np.exp(1j * np.pi * p * np.sin(phi_el) * np.sin(phi_az))


def steering_vector_z(phi_el: float, m_z: int) -> np.ndarray:
    q = np.arange(m_z)
    return np.exp(1j * np.pi * q * np.cos(phi_el))


def array_response(phi_az: float, phi_el: float, m_y: int, m_z: int) -> np.ndarray:
    """UPA response ``a_z(el) (x) a_y(az, el)`` for half-wavelength spacing."""
    return np.kron(steering_vector_z(phi_el, m_z), steering_vector_y(phi_az, phi_el, m_y))


def _array_responses(az: np.ndarray, el: np.ndarray, m_y: int, m_z: int) -> np.ndarray:
    # (L, m_z * m_y), vertical index outer, horizontal inner, as in np.kron
    a_y = np.exp(1j * np.pi * np.outer(np.sin(el) * np.sin(az), np.arange(m_y)))
    a_z = np.exp(1j * np.pi * np.outer(np.cos(el), np.arange(m_z)))
    return (a_z[:, :, None] * a_y[:, None, :]).reshape(len(az), m_z * m_y)


def channel_vector(paths: PathSet, spec: SceneSpec, subcarrier_index: int = 1) -> np.ndarray:
    """Narrowband channel of one subcarrier, summed over all paths."""
    if not 1 <= subcarrier_index <= spec.n_subcarriers:
        raise ValueError(
            f"subcarrier_index must lie in 1..{spec.n_subcarriers}, got {subcarrier_index}"
        )
    gains = np.asarray(paths.gains, dtype=np.float64)
    delays = np.asarray(paths.delays, dtype=np.float64)
    if len(gains) == 0:
        raise ValueError("path set is empty")
    if not (np.all(np.isfinite(gains)) and np.all(np.isfinite(delays))):
        raise ValueError("path gains and delays must be finite")
    n_sc = spec.n_subcarriers
    coeff = np.sqrt(gains / n_sc) * np.exp(
        1j * 2 * np.pi * subcarrier_index / n_sc * delays * spec.bandwidth
    )
    responses = _array_responses(
        np.asarray(paths.azimuths, dtype=np.float64),
        np.asarray(paths.elevations, dtype=np.float64),
        spec.m_y,
        spec.m_z,
    )
    return coeff @ responses


# --- geometry --------------------------------------------------------------

def _cross(a: np.ndarray, b: np.ndarray) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


def _segment_hit(p: np.ndarray, q: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Parameters ``(t, s)`` where p->q crosses a->b in the plane, else None.

    Parallel segments never count as a crossing: screens are infinitely thin.
    """
    r = q - p
    e = b - a
    denom = _cross(r, e)
    if denom == 0.0:
        return None
    diff = a - p
    t = _cross(diff, e) / denom
    s = _cross(diff, r) / denom
    if 0.0 <= t <= 1.0 and 0.0 <= s <= 1.0:
        return t, s
    return None


def segment_blocked(p: np.ndarray, q: np.ndarray, blocker: Blocker) -> bool:
    """True if the 3-D segment p->q passes through ``blocker`` below its top edge."""
    hit = _segment_hit(p[:2], q[:2], np.asarray(blocker.start), np.asarray(blocker.end))
    if hit is None:
        return False
    t = hit[0]
    return p[2] + t * (q[2] - p[2]) <= blocker.height


def _clear(p: np.ndarray, q: np.ndarray, blockers: Sequence[Blocker]) -> bool:
    return not any(segment_blocked(p, q, b) for b in blockers)


def _arrival_angles(direction: np.ndarray, orientation: float) -> tuple[float, float]:
    c, s = math.cos(orientation), math.sin(orientation)
    dx, dy, dz = direction
    x_local = c * dx + s * dy
    y_local = -s * dx + c * dy
    azimuth = math.atan2(y_local, x_local)
    elevation = math.acos(dz / math.sqrt(dx * dx + dy * dy + dz * dz))
    return azimuth, elevation


def _mirror(point: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    e = b - a
    n = np.array([-e[1], e[0]]) / math.hypot(e[0], e[1])
    return point - 2.0 * np.dot(point - a, n) * n


def trace_paths(user_pos: Sequence[float], spec: SceneSpec) -> PathSet | None:
    """Direct and single-bounce paths from a user to the BS.

    Returns ``None`` when the user is fully shadowed (no path at all).
    """
    bs = np.asarray(spec.bs_position, dtype=np.float64)
    user = np.array([user_pos[0], user_pos[1], spec.user_grid.height], dtype=np.float64)
    found: list[tuple[float, float, float, float]] = []

    def add(length: float, direction: np.ndarray, loss: float):
        gain = spec.reference_gain * length ** (-spec.path_loss_exponent) * loss
        az, el = _arrival_angles(direction, spec.bs_orientation)
        found.append((gain, length / SPEED_OF_LIGHT, az, el))

    los = _clear(bs, user, spec.blockers)
    if los:
        add(float(np.linalg.norm(user - bs)), user - bs, 1.0)

    for refl in spec.reflectors:
        a = np.asarray(refl.start, dtype=np.float64)
        b = np.asarray(refl.end, dtype=np.float64)
        e = b - a
        side_bs = _cross(e, bs[:2] - a)
        side_user = _cross(e, user[:2] - a)
        if side_bs * side_user <= 0:
            continue
        image = np.append(_mirror(user[:2], a, b), user[2])
        hit = _segment_hit(bs[:2], image[:2], a, b)
        if hit is None:
            continue
        t = hit[0]
        bounce = bs + t * (image - bs)
        if not (_clear(bs, bounce, spec.blockers) and _clear(bounce, user, spec.blockers)):
            continue
        add(float(np.linalg.norm(image - bs)), image - bs, refl.loss)

    if not found:
        return None
    found.sort(key=lambda path: -path[0])
    found = found[: spec.n_paths_max]
    gains, delays, az, el = (np.array(col, dtype=np.float64) for col in zip(*found))
    return PathSet(gains, delays, az, el, los)


def csi_features(h: np.ndarray) -> np.ndarray:
    return np.concatenate([h.real, h.imag])


def generate_dataset(spec: SceneSpec, subcarrier_index: int = 1) -> CsiDataset:
    """One labeled CSI sample per reachable grid user, in grid order."""
    positions = spec.user_grid.positions()
    rows = []
    dropped = 0
    for location_id, pos in enumerate(positions):
        paths = trace_paths(pos, spec)
        if paths is None:
            dropped += 1
            continue
        h = channel_vector(paths, spec, subcarrier_index)
        rows.append((csi_features(h), pos, paths.los_flag, location_id))
    if dropped:
        logger.info("dropped %d fully shadowed users of %d", dropped, len(positions))
    if not rows:
        raise ValueError("no grid user is reachable by any path (zero coverage)")
    features, pos, los, ids = zip(*rows)
    return CsiDataset(
        np.stack(features), np.stack(pos), np.array(los), np.array(ids), spec.n_antennas
    )


# --- files -----------------------------------------------------------------

def load_scene(path: str | Path) -> SceneSpec:
    sec = kvfile.load_section(path)
    grid = UserGrid(
        origin=sec.numbers("user_grid.origin", length=2),
        rows=sec.integer("user_grid.rows"),
        cols=sec.integer("user_grid.cols"),
        spacing=sec.number("user_grid.spacing"),
        height=sec.number("user_grid.height"),
    )
    blockers = tuple(
        Blocker((x0, y0), (x1, y1), h)
        for x0, y0, x1, y1, h in sec.tuples("blockers", 5, default=[])
    )
    reflectors = tuple(
        Reflector((x0, y0), (x1, y1), loss)
        for x0, y0, x1, y1, loss in sec.tuples("reflectors", 5, default=[])
    )
    try:
        return SceneSpec(
            carrier_frequency=sec.number("carrier_frequency"),
            bandwidth=sec.number("bandwidth"),
            m_y=sec.integer("m_y"),
            m_z=sec.integer("m_z"),
            n_subcarriers=sec.integer("n_subcarriers"),
            n_paths_max=sec.integer("n_paths_max"),
            bs_position=sec.numbers("bs_position", length=3),
            bs_orientation=sec.number("bs_orientation", 0.0),
            user_grid=grid,
            blockers=blockers,
            reflectors=reflectors,
            reference_gain=sec.number("path_gain_model.reference_gain", 1.0),
            path_loss_exponent=sec.number("path_gain_model.exponent", 2.5),
            rng_seed=sec.integer("rng_seed", 0),
        )
    except ValueError as exc:
        if isinstance(exc, kvfile.ConfigError):
            raise
        raise kvfile.ConfigError(f"{path}: {exc}") from exc


def write_dataset(data: CsiDataset, path: str | Path) -> None:
    """Write the text dataset format; floats carry 17 significant digits."""
    lines = [f"{DATASET_MAGIC}, M={data.n_antennas}, N={len(data)}"]
    for i in range(len(data)):
        fields = [str(int(data.location_ids[i]))]
        fields += [f"{v:.17g}" for v in data.positions[i]]
        fields.append("1" if data.los[i] else "0")
        fields += [f"{v:.17g}" for v in data.features[i]]
        lines.append(",".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path: str | Path) -> CsiDataset:
    with open(path) as fh:
        header = fh.readline().strip()
        parts = [p.strip() for p in header.split(",")]
        if len(parts) != 3 or parts[0] != DATASET_MAGIC:
            raise ValueError(f"{path}: not a {DATASET_MAGIC} file (header {header!r})")
        try:
            m = int(parts[1].removeprefix("M="))
            n = int(parts[2].removeprefix("N="))
        except ValueError:
            raise ValueError(f"{path}: bad header {header!r}") from None
        table = np.loadtxt(fh, delimiter=",", ndmin=2, dtype=np.float64)
    if table.shape != (n, 4 + 2 * m):
        raise ValueError(f"{path}: expected {n} records of {4 + 2 * m} fields, got {table.shape}")
    return CsiDataset(
        table[:, 4:], table[:, 1:3], table[:, 3] != 0, table[:, 0].astype(np.int64), m
    )
