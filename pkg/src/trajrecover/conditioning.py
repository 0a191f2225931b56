"""Aggregated condition: noisy locations, prior, mask, time and context embeddings.

Every block is a ``(L, width)`` sequence aligned on the merged timeline and
the blocks are concatenated along channels in a fixed order::

    noisy_xy(2) | prior_xy(2) | mask(1) | time(1) | <embedder blocks...>
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .traj_data import RecoveryTask, normalize

FIXED_BLOCKS = (("noisy_xy", 2), ("prior_xy", 2), ("mask", 1), ("time", 1))


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class ConditionLayout:
    blocks: tuple[tuple[str, int], ...]

    def __post_init__(self):
        names = [n for n, _ in self.blocks]
        if len(set(names)) != len(names):
            raise LayoutError(f"duplicate block names in layout: {names}")
        if any(w <= 0 for _, w in self.blocks):
            raise LayoutError("block widths must be positive")

    @classmethod
    def with_embedders(cls, embedders: Sequence["ContextEmbedder"]) -> "ConditionLayout":
        return cls(FIXED_BLOCKS + tuple((e.name, e.width) for e in embedders))

    @property
    def channels(self) -> int:
        return sum(w for _, w in self.blocks)

    def span(self, name: str) -> slice:
        start = 0
        for n, w in self.blocks:
            if n == name:
                return slice(start, start + w)
            start += w
        raise KeyError(name)

    @property
    def fixed_columns(self) -> np.ndarray:
        """Boolean column mask of everything except the noisy-location block."""
        cols = np.ones(self.channels, dtype=bool)
        cols[self.span("noisy_xy")] = False
        return cols

    def to_list(self) -> list[list]:
        return [[n, int(w)] for n, w in self.blocks]

    @classmethod
    def from_list(cls, items) -> "ConditionLayout":
        return cls(tuple((str(n), int(w)) for n, w in items))


@dataclass(frozen=True)
class AggregatedCondition:
    data: np.ndarray  # (L, C)
    layout: ConditionLayout
    t: int | None = None

    @property
    def mask(self) -> np.ndarray:
        return self.data[:, self.layout.span("mask")][:, 0]

    @property
    def noisy_xy(self) -> np.ndarray:
        return self.data[:, self.layout.span("noisy_xy")]

    def block(self, name: str) -> np.ndarray:
        return self.data[:, self.layout.span(name)]


def build_mask(sparse_len: int, query_positions: Sequence[int], L: int) -> np.ndarray:
    """1 at inserted (query) rows, 0 at observed rows."""
    pos = np.asarray(query_positions, dtype=int).reshape(-1)
    if len(pos) and (pos.min() < 0 or pos.max() >= L):
        raise IndexError(f"query position out of range for L={L}")
    if len(np.unique(pos)) != len(pos):
        raise IndexError("repeated query position")
    if sparse_len + len(pos) != L:
        raise ValueError(f"sparse length {sparse_len} + {len(pos)} query rows != L={L}")
    mask = np.zeros(L)
    mask[pos] = 1.0
    return mask


def assemble(tau_t: np.ndarray, prior: np.ndarray, mask: np.ndarray, time: np.ndarray,
             embeddings: Sequence[tuple[str, np.ndarray]] = (), t: int | None = None) -> AggregatedCondition:
    """Concatenate aligned ``(L, w)`` blocks in layout order."""
    blocks = [("noisy_xy", tau_t), ("prior_xy", prior), ("mask", mask), ("time", time), *embeddings]
    L = len(tau_t)
    cols = []
    for name, arr in blocks:
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.shape[0] != L:
            raise LayoutError(f"block '{name}' has length {arr.shape[0]}, expected {L}")
        cols.append(arr)
    mask_arr = cols[2][:, 0]
    if not np.all((mask_arr == 0) | (mask_arr == 1)):
        raise LayoutError("mask entries must be 0 or 1")
    layout = ConditionLayout(tuple((n, c.shape[1]) for (n, _), c in zip(blocks, cols)))
    return AggregatedCondition(np.concatenate(cols, axis=1), layout, t)


def refresh(cond: AggregatedCondition, x_t: np.ndarray, t: int | None = None) -> AggregatedCondition:
    """New condition whose noisy locations at mask=1 rows are replaced by ``x_t``."""
    rows = np.flatnonzero(cond.mask == 1)
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != (len(rows), 2):
        raise ValueError(f"refresh expects values for {len(rows)} query rows, got shape {x_t.shape}")
    data = cond.data.copy()
    data[rows, cond.layout.span("noisy_xy")] = x_t
    return AggregatedCondition(data, cond.layout, cond.t if t is None else t)


# -- context embedders -------------------------------------------------------

@dataclass
class ContextEmbedder:
    """Turns one raw context into an ``(L, width)`` sequence aligned on the timeline."""

    name: str
    width: int
    fn: Callable[[RecoveryTask, np.ndarray], np.ndarray]

    def embed(self, task: RecoveryTask, times_norm: np.ndarray) -> np.ndarray:
        out = np.asarray(self.fn(task, times_norm), dtype=np.float64)
        if out.shape != (len(times_norm), self.width):
            raise LayoutError(
                f"embedder '{self.name}' produced {out.shape}, expected ({len(times_norm)}, {self.width})"
            )
        return out


def sinusoidal_features(x: np.ndarray, width: int) -> np.ndarray:
    """``width`` sin/cos features of values in [-1, 1] at octave frequencies."""
    x = np.asarray(x, dtype=np.float64)
    n = width // 2
    freqs = np.pi * 2.0 ** np.arange(n)
    ang = x[:, None] * freqs[None, :]
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if width % 2:
        feats = np.concatenate([feats, x[:, None]], axis=1)
    return feats


def time_embedder(width: int = 8) -> ContextEmbedder:
    """Sinusoidal features of the normalized timestamps, relative to trajectory start."""

    def fn(task, times_norm):
        rel = times_norm - times_norm[0]
        span = max(rel[-1], 1e-12)
        return sinusoidal_features(2.0 * rel / span - 1.0, width)

    return ContextEmbedder("time_features", width, fn)


def id_embedder(table: np.ndarray, ids: Mapping[Any, int], context_key: str = "agent_id") -> ContextEmbedder:
    """Lookup-table embedding of a per-trajectory identifier, broadcast along L.

    Row 0 of ``table`` is reserved for unknown identifiers.
    """
    table = np.asarray(table, dtype=np.float64)

    def fn(task, times_norm):
        row = ids.get(task.contexts.get(context_key), 0)
        return np.broadcast_to(table[row], (len(times_norm), table.shape[1])).copy()

    return ContextEmbedder(context_key, table.shape[1], fn)


def default_embedders() -> list[ContextEmbedder]:
    return [time_embedder(8)]


@dataclass
class TaskCondition:
    """Normalized arrays of one task plus its assembled condition at init."""

    task: RecoveryTask
    cond: AggregatedCondition
    rows: np.ndarray  # query row indices
    x_prior: np.ndarray = field(repr=False)  # (L, 2) normalized prior


def condition_for_task(task: RecoveryTask, embedders: Sequence[ContextEmbedder],
                       x_query: np.ndarray | None = None) -> TaskCondition:
    """Build the aggregated condition for a task.

    Observed rows carry their exact normalized coordinates; query rows carry
    ``x_query`` (defaults to zeros, to be filled by the caller).
    """
    prior = task.prior()
    pn = normalize(prior.points, task.norm)
    times_norm = pn[:, 2]
    rows = task.query_positions
    noisy = pn[:, :2].copy()
    noisy[rows] = 0.0 if x_query is None else x_query
    mask = build_mask(len(task.sparse), rows, task.length)
    emb = [(e.name, e.embed(task, times_norm)) for e in embedders]
    cond = assemble(noisy, pn[:, :2], mask, times_norm, emb)
    return TaskCondition(task, cond, rows, pn[:, :2])
