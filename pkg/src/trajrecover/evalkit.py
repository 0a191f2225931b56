"""Recovery metrics (MSE, NDTW, JSD), speed/distance estimates and the linear baseline."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.special import rel_entr

from .traj_data import NormStats, RecoveryTask, Trajectory, linear_prior, normalize

EARTH_RADIUS_KM = 6371.0


def mse_metric(recovered: np.ndarray, truth: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean over (query rows x 2 coordinates) of squared errors.

    ``recovered`` and ``truth`` are aligned ``(L, 2)`` arrays (normalized
    coordinates); ``mask`` selects the query rows (all rows if omitted).
    """
    recovered, truth = np.asarray(recovered, float), np.asarray(truth, float)
    if recovered.shape != truth.shape:
        raise ValueError(f"alignment mismatch: {recovered.shape} vs {truth.shape}")
    if mask is not None:
        mask = np.asarray(mask, bool)
        if mask.shape != recovered.shape[:1]:
            raise ValueError("mask length does not match the timeline")
        recovered, truth = recovered[mask], truth[mask]
    if recovered.size == 0:
        raise ValueError("no rows to score")
    return float(np.mean((recovered - truth) ** 2))


def dtw_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Dynamic time warping with Euclidean point cost."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("DTW of an empty sequence")
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    cost = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row, prev = acc[i], acc[i - 1]
        c = cost[i - 1]
        for j in range(1, m + 1):
            row[j] = c[j - 1] + min(prev[j], row[j - 1], prev[j - 1])
    return float(acc[n, m])


def ndtw_metric(recovered: np.ndarray, truth: np.ndarray) -> float:
    """DTW distance divided by the truth length."""
    truth = np.asarray(truth, float)
    return dtw_distance(recovered, truth) / len(truth)


def dtw_bruteforce(a: np.ndarray, b: np.ndarray) -> float:
    """Minimum cost over every monotone alignment path; exponential, for tiny inputs."""
    a = np.asarray(a, float).reshape(len(a), -1)
    b = np.asarray(b, float).reshape(len(b), -1)
    n, m = len(a), len(b)
    best = math.inf

    def walk(i, j, acc):
        nonlocal best
        acc += float(np.sqrt(((a[i] - b[j]) ** 2).sum()))
        if i == n - 1 and j == m - 1:
            best = min(best, acc)
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < n and j + dj < m:
                walk(i + di, j + dj, acc)

    walk(0, 0, 0.0)
    return best


def occupancy_histogram(points: np.ndarray, bounds: tuple[float, float, float, float], grid: int = 64) -> np.ndarray:
    x0, x1, y0, y1 = bounds
    pts = np.asarray(points, float).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("empty point set")
    hist, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=grid, range=[[x0, x1], [y0, y1]])
    return hist


def jsd_from_hist(p: np.ndarray, q: np.ndarray, smoothing: float = 0.0) -> float:
    """Jensen-Shannon divergence in nats between two count histograms."""
    p = np.asarray(p, float).ravel() + smoothing
    q = np.asarray(q, float).ravel() + smoothing
    if p.sum() <= 0 or q.sum() <= 0:
        raise ValueError("empty histogram")
    p, q = p / p.sum(), q / q.sum()
    m = 0.5 * (p + q)
    js = 0.5 * rel_entr(p, m).sum() + 0.5 * rel_entr(q, m).sum()
    return float(min(max(js, 0.0), math.log(2.0)))


def jsd_metric(recovered: Sequence[np.ndarray], truth: Sequence[np.ndarray],
               bounds: tuple[float, float, float, float] = (-1.0, 1.0, -1.0, 1.0), grid: int = 64,
               smoothing: float = 0.0) -> float:
    """JSD between the 2-D occupancy of two trajectory sets over a shared box."""
    if len(recovered) == 0 or len(truth) == 0:
        raise ValueError("empty trajectory set")
    hp = occupancy_histogram(np.concatenate([np.asarray(r)[:, :2] for r in recovered]), bounds, grid)
    hq = occupancy_histogram(np.concatenate([np.asarray(t)[:, :2] for t in truth]), bounds, grid)
    return jsd_from_hist(hp, hq, smoothing)


def haversine_km(lng1, lat1, lng2, lat2):
    lng1, lat1, lng2, lat2 = map(np.radians, (lng1, lat1, lng2, lat2))
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lng2 - lng1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def speed_and_distance(traj: Trajectory) -> tuple[float, float]:
    """(average speed in m/s, total distance in km) of a raw trajectory."""
    p = traj.points
    duration = p[-1, 2] - p[0, 2]
    if duration <= 0:
        raise ValueError("zero-duration trajectory")
    dist = float(haversine_km(p[:-1, 0], p[:-1, 1], p[1:, 0], p[1:, 1]).sum())
    return dist * 1000.0 / duration, dist


def baseline_linear(task: RecoveryTask) -> Trajectory:
    return linear_prior(task.sparse, task.query)


# -- reports ---------------------------------------------------------------------

REPORT_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["mse", "ndtw", "jsd", "n_trajectories", "config"],
    "properties": {
        "mse": {"type": "number", "minimum": 0},
        "ndtw": {"type": "number", "minimum": 0},
        "jsd": {"type": "number", "minimum": 0},
        "n_trajectories": {"type": "integer", "minimum": 0},
        "config": {"type": "object"},
        "speed_distance": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["speed_mps", "distance_km"],
                "properties": {"speed_mps": {"type": "number"}, "distance_km": {"type": "number"}},
            },
        },
    },
}


@dataclass
class EvalReport:
    mse: float
    ndtw: float
    jsd: float
    n_trajectories: int
    config: dict = field(default_factory=dict)
    speed_distance: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def to_table(self) -> str:
        lines = [f"{'metric':<10}{'value':>14}",
                 f"{'MSE':<10}{self.mse:>14.6g}",
                 f"{'NDTW':<10}{self.ndtw:>14.6g}",
                 f"{'JSD':<10}{self.jsd:>14.6g}",
                 f"{'n':<10}{self.n_trajectories:>14d}"]
        if self.speed_distance:
            lines += ["", f"{'trajectory':<12}{'speed (m/s)':>14}{'dist (km)':>12}"]
            for name, sd in self.speed_distance.items():
                lines.append(f"{name:<12}{sd['speed_mps']:>14.4f}{sd['distance_km']:>12.4f}")
        return "\n".join(lines) + "\n"


def aggregate_speed_distance(trajs: Sequence[Trajectory]) -> dict[str, float]:
    sd = np.array([speed_and_distance(t) for t in trajs])
    return {"speed_mps": float(sd[:, 0].mean()), "distance_km": float(sd[:, 1].mean())}


def evaluate(recovered: Sequence[Trajectory], truth: Sequence[Trajectory], norm: NormStats,
             sparse: Sequence[Trajectory] | None = None, config: dict | None = None) -> EvalReport:
    """Corpus metrics in normalized coordinates.

    MSE is restricted to query rows, i.e. timestamps absent from ``sparse``
    (all rows when ``sparse`` is not given).
    """
    if len(recovered) != len(truth):
        raise ValueError(f"{len(recovered)} recovered vs {len(truth)} truth trajectories")
    if not truth:
        raise ValueError("nothing to evaluate")
    mses, ndtws, rec_n, tru_n = [], [], [], []
    for i, (r, t) in enumerate(zip(recovered, truth)):
        if len(r) != len(t) or not np.allclose(r.times, t.times, rtol=0, atol=1e-6):
            raise ValueError(f"trajectory {i}: recovered and truth timelines differ")
        rn, tn = normalize(r.points, norm)[:, :2], normalize(t.points, norm)[:, :2]
        mask = None
        if sparse is not None:
            mask = ~np.isin(t.times, sparse[i].times)
            if not mask.any():
                mask = None
        mses.append(mse_metric(rn, tn, mask))
        ndtws.append(ndtw_metric(rn, tn))
        rec_n.append(rn)
        tru_n.append(tn)
    sd = {"truth": aggregate_speed_distance(truth), "recovered": aggregate_speed_distance(recovered)}
    if sparse is not None:
        sd["sparse"] = aggregate_speed_distance(sparse)
    return EvalReport(float(np.mean(mses)), float(np.mean(ndtws)), jsd_metric(rec_n, tru_n),
                      len(truth), dict(config or {}), sd)
