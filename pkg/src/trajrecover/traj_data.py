"""Trajectories, sparsification, normalization and dataset I/O.

A trajectory is stored as a float64 array of shape ``(L, 3)`` whose columns
are ``(lng, lat, time)``. Only the two location channels are ever diffused;
timestamps are known inputs.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np


class TrajectoryError(ValueError):
    """Raised for malformed trajectories, queries or dataset files."""


@dataclass(frozen=True)
class TrajPoint:
    lng: float
    lat: float
    time: float


class Trajectory:
    """Chronologically ordered ``(lng, lat, time)`` points."""

    __slots__ = ("points",)

    def __init__(self, points: Any):
        pts = np.array(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise TrajectoryError(f"expected (L, 3) points, got shape {pts.shape}")
        if len(pts) < 2:
            raise TrajectoryError("a trajectory needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise TrajectoryError("trajectory contains non-finite values")
        if np.any(np.diff(pts[:, 2]) <= 0):
            raise TrajectoryError("timestamps must be strictly increasing")
        pts.setflags(write=False)
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)

    def __getitem__(self, i: int) -> TrajPoint:
        lng, lat, t = self.points[i]
        return TrajPoint(float(lng), float(lat), float(t))

    def __repr__(self) -> str:
        return f"Trajectory(L={len(self)}, t=[{self.times[0]:g}, {self.times[-1]:g}])"

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, :2]

    @property
    def times(self) -> np.ndarray:
        return self.points[:, 2]

    def check_raw_bounds(self) -> None:
        lng, lat = self.points[:, 0], self.points[:, 1]
        if np.any(np.abs(lng) > 180) or np.any(np.abs(lat) > 90):
            raise TrajectoryError("raw coordinates outside lng [-180, 180] / lat [-90, 90]")


@dataclass(frozen=True)
class Query:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise TrajectoryError("query timestamps must be strictly increasing")
        object.__setattr__(self, "times", t)

    def __len__(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class NormStats:
    lng_min: float
    lng_max: float
    lat_min: float
    lat_max: float
    t_min: float
    t_max: float

    def __post_init__(self):
        for lo, hi, name in self._axes():
            if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
                raise TrajectoryError(f"degenerate normalization range on {name}: [{lo}, {hi}]")

    def _axes(self):
        return [
            (self.lng_min, self.lng_max, "lng"),
            (self.lat_min, self.lat_max, "lat"),
            (self.t_min, self.t_max, "time"),
        ]

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.lng_min, self.lat_min, self.t_min])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.lng_max, self.lat_max, self.t_max])

    @classmethod
    def from_trajectories(cls, trajs: Iterable[Trajectory]) -> "NormStats":
        allpts = np.concatenate([tr.points for tr in trajs], axis=0)
        lo, hi = allpts.min(axis=0), allpts.max(axis=0)
        return cls(*(float(v) for v in (lo[0], hi[0], lo[1], hi[1], lo[2], hi[2])))

    def to_dict(self) -> dict[str, float]:
        return {k: float(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NormStats":
        return cls(**{k: float(d[k]) for k in ("lng_min", "lng_max", "lat_min", "lat_max", "t_min", "t_max")})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "NormStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def normalize(points: np.ndarray, stats: NormStats) -> np.ndarray:
    """Map ``(..., 3)`` or ``(..., 2)`` raw channels affinely onto [-1, 1]."""
    points = np.asarray(points, dtype=np.float64)
    c = points.shape[-1]
    lo, hi = stats.lo[:c], stats.hi[:c]
    return 2.0 * (points - lo) / (hi - lo) - 1.0


def denormalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    c = values.shape[-1]
    lo, hi = stats.lo[:c], stats.hi[:c]
    return (values + 1.0) * 0.5 * (hi - lo) + lo


def sparsify(dense: Trajectory, sparsity: float, seed: int) -> tuple[Trajectory, Query, np.ndarray]:
    """Remove ``floor(sparsity * L)`` interior points chosen uniformly at random.

    Returns the sparse trajectory, the query made of the removed timestamps and
    the removed ``(lng, lat)`` values (the ground truth at the query).
    """
    if not (0.0 < sparsity < 1.0):
        raise TrajectoryError(f"sparsity must lie in (0, 1), got {sparsity}")
    L = len(dense)
    n_remove = int(math.floor(sparsity * L))
    if L < 4:
        raise TrajectoryError(f"dense trajectory too short for sparsification (L={L} < 4)")
    if n_remove < 1:
        raise TrajectoryError(f"sparsity {sparsity} removes no points at L={L}")
    if n_remove > L - 2:
        raise TrajectoryError(f"cannot remove {n_remove} interior points from L={L}")
    rng = np.random.default_rng(seed)
    removed = np.sort(rng.choice(np.arange(1, L - 1), size=n_remove, replace=False))
    keep = np.ones(L, dtype=bool)
    keep[removed] = False
    sparse = Trajectory(dense.points[keep])
    query = Query(dense.times[removed])
    truth = dense.xy[removed].copy()
    return sparse, query, truth


def merge_timeline(sparse: Trajectory, query: Query) -> tuple[np.ndarray, np.ndarray]:
    """Merged sorted timestamps and the boolean query-row indicator."""
    times = np.concatenate([sparse.times, query.times])
    is_query = np.concatenate([np.zeros(len(sparse), bool), np.ones(len(query), bool)])
    order = np.argsort(times, kind="stable")
    times, is_query = times[order], is_query[order]
    if np.any(np.diff(times) <= 0):
        raise TrajectoryError("query timestamps duplicate timeline entries")
    return times, is_query


def linear_prior(sparse: Trajectory, query: Query) -> Trajectory:
    """Merged trajectory with query locations linearly interpolated in time."""
    qt = query.times
    if len(qt) and (qt.min() < sparse.times[0] or qt.max() > sparse.times[-1]):
        raise TrajectoryError(
            f"query time outside sparse span [{sparse.times[0]}, {sparse.times[-1]}]"
        )
    times, is_query = merge_timeline(sparse, query)
    out = np.empty((len(times), 3))
    out[:, 2] = times
    out[~is_query, :2] = sparse.xy
    for c in range(2):
        out[is_query, c] = np.interp(qt, sparse.times, sparse.xy[:, c])
    return Trajectory(out)


def reassemble(sparse: Trajectory, query: Query, truth: np.ndarray) -> Trajectory:
    times, is_query = merge_timeline(sparse, query)
    out = np.empty((len(times), 3))
    out[:, 2] = times
    out[~is_query, :2] = sparse.xy
    out[is_query, :2] = truth
    return Trajectory(out)


@dataclass
class RecoveryTask:
    """A sparse trajectory, the timestamps to fill in, and side contexts."""

    sparse: Trajectory
    query: Query
    norm: NormStats
    contexts: dict[str, Any] = field(default_factory=dict)
    truth: np.ndarray | None = None

    def __post_init__(self):
        self.times, self.is_query = merge_timeline(self.sparse, self.query)

    @property
    def length(self) -> int:
        return len(self.times)

    @property
    def query_positions(self) -> np.ndarray:
        return np.flatnonzero(self.is_query)

    def prior(self) -> Trajectory:
        return linear_prior(self.sparse, self.query)

    def dense_truth(self) -> Trajectory:
        if self.truth is None:
            raise TrajectoryError("task carries no ground truth")
        return reassemble(self.sparse, self.query, self.truth)

    @classmethod
    def from_dense(cls, dense: Trajectory, sparsity: float, seed: int, norm: NormStats,
                   contexts: dict[str, Any] | None = None) -> "RecoveryTask":
        sparse, query, truth = sparsify(dense, sparsity, seed)
        return cls(sparse, query, norm, dict(contexts or {}), truth)


# -- synthetic data ----------------------------------------------------------

SYNTH_BOX = (116.20, 116.50, 39.80, 40.10)  # lng_min, lng_max, lat_min, lat_max
_SYNTH_DT = 60.0  # nominal sampling interval in seconds


def synth_generate(n: int, length: int, seed: int) -> list[Trajectory]:
    """Smooth random paths inside ``SYNTH_BOX``.

    Each path is a drifting centre plus a few low-frequency sinusoids and a
    bounded, smoothed random walk, sampled at jittered time intervals. The
    location is a function of time, so irregular sampling shows up as uneven
    spacing along the curve.
    """
    if n < 0:
        raise TrajectoryError("n must be non-negative")
    if length < 8:
        raise TrajectoryError(f"length must be >= 8, got {length}")
    rng = np.random.default_rng(seed)
    lng0, lng1, lat0, lat1 = SYNTH_BOX
    half = np.array([(lng1 - lng0) / 2, (lat1 - lat0) / 2])
    centre = np.array([(lng1 + lng0) / 2, (lat1 + lat0) / 2])
    out = []
    for _ in range(n):
        dt = _SYNTH_DT * rng.uniform(0.5, 1.5, size=length - 1)
        t = np.concatenate([[0.0], np.cumsum(dt)])
        u = t / t[-1]  # path parameter in [0, 1]

        xy = np.zeros((length, 2))
        xy += rng.uniform(-0.6, 0.6, size=2) * (u[:, None] - 0.5)  # drift
        for _k in range(3):
            freq = rng.uniform(0.5, 3.0)
            amp = rng.uniform(0.05, 0.25, size=2)
            phase = rng.uniform(0, 2 * np.pi, size=2)
            xy += amp * np.sin(2 * np.pi * freq * u[:, None] + phase)
        steps = rng.normal(scale=0.01, size=(length, 2))
        walk = np.cumsum(steps, axis=0)
        # exponential smoothing keeps the walk low-frequency
        for i in range(1, length):
            walk[i] = 0.7 * walk[i - 1] + 0.3 * walk[i]
        xy += np.clip(walk, -0.1, 0.1)

        span = np.abs(xy).max(axis=0)
        xy *= np.minimum(1.0, 0.95 / np.maximum(span, 1e-12))  # stay inside the box
        xy = centre + xy * half
        t0 = rng.uniform(0, 86400.0)
        out.append(Trajectory(np.column_stack([xy, t + t0])))
    return out


# -- JSONL I/O ---------------------------------------------------------------

def trajectory_to_json(tr: Trajectory, **extra) -> str:
    obj = {"points": [[float(a), float(b), float(c)] for a, b, c in tr.points]}
    obj.update(extra)
    return json.dumps(obj)


def save_jsonl(trajs: Sequence[Trajectory], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for tr in trajs:
            fh.write(trajectory_to_json(tr) + "\n")


def read_jsonl_records(path: str | Path) -> list[dict[str, Any]]:
    """Parsed JSON objects, one per non-blank line."""
    records = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TrajectoryError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or "points" not in obj:
                raise TrajectoryError(f"{path}:{lineno}: expected an object with a 'points' key")
            records.append(obj)
    return records


def load_jsonl(path: str | Path) -> list[Trajectory]:
    out = []
    for idx, rec in enumerate(read_jsonl_records(path)):
        try:
            out.append(Trajectory(rec["points"]))
        except (TrajectoryError, ValueError) as exc:
            raise TrajectoryError(f"{path}: trajectory {idx}: {exc}") from None
    return out
