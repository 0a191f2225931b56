"""Joint multi-step training with correlated noise and per-sample step bookkeeping.

Each batch slot owns one sample, its noise chain, a private step ``t`` and the
carried propagation state. An iteration runs ``k`` consecutive denoising steps
``t, t-1, ..., t-k+1`` for every slot, sums the masked noise-prediction losses
and takes one optimizer step. The state carried to the next iteration is the
one emitted by step ``t`` (it feeds step ``t-1``), detached from the graph.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .conditioning import ConditionLayout, ContextEmbedder, condition_for_task, default_embedders
from .denoiser import DenoiserConfig, SPDMNet, save_checkpoint
from .diffusion import NoiseChain, NoiseSchedule, build_noise_chain, forward_jump
from .traj_data import NormStats, RecoveryTask, Trajectory, normalize

log = logging.getLogger(__name__)

BATCH_MODES = ("shared", "consecutive", "uniform")


class NumericFailure(RuntimeError):
    pass


@dataclass
class TrainConfig:
    T: int = 500
    beta_start: float = 1e-4
    beta_end: float = 0.02
    k: int = 2
    batch_size: int = 32
    lr: float = 2e-4
    grad_clip: float = 1.0
    batch_mode: str = "uniform"
    iters: int = 1000
    seed: int = 0
    sparsity: float = 0.5
    seq_len: int | None = None
    sever_state: bool = False

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2: the recurrent state is untrainable with single-step iterations")
        if self.k > self.T:
            raise ValueError("k cannot exceed T")
        if self.batch_mode not in BATCH_MODES:
            raise ValueError(f"unknown batch mode {self.batch_mode!r}; expected one of {BATCH_MODES}")
        if self.batch_size < 1 or self.iters < 0:
            raise ValueError("batch_size >= 1 and iters >= 0 required")

    @property
    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.T, self.beta_start, self.beta_end)


def masked_loss(eps_pred, eps_true, mask):
    """Mean squared error over mask=1 rows and both coordinate channels.

    Arrays are ``(..., L, 2)`` with ``mask`` of shape ``(..., L)``; works for
    numpy arrays and torch tensors.
    """
    if tuple(eps_pred.shape) != tuple(eps_true.shape):
        raise ValueError(f"shape mismatch {tuple(eps_pred.shape)} vs {tuple(eps_true.shape)}")
    n = mask.sum()
    if float(n) == 0:
        raise ValueError("empty mask: no query rows to score")
    sq = (eps_pred - eps_true) ** 2
    return (sq * mask[..., None]).sum() / (2 * n)


# -- samples and slots ---------------------------------------------------------

@dataclass
class SampleSlot:
    task: RecoveryTask
    chain: NoiseChain  # (T, m, 2), noise at query rows only
    t: int
    state: list[torch.Tensor] | None  # per level, (state_width, L_i), no batch dim
    base: np.ndarray = field(repr=False)  # (L, C) condition with zeros at noisy query rows
    rows: np.ndarray = field(repr=False)
    x0: np.ndarray = field(repr=False)  # (m, 2) normalized truth at query rows
    sample_id: int = -1

    def noisy(self, step: int, sched: NoiseSchedule) -> np.ndarray:
        return forward_jump(self.x0, step, self.chain.multi[step], sched)


class SampleSource:
    """Deterministic stream of training samples drawn from a list of dense trajectories."""

    def __init__(self, trajs: Sequence[Trajectory], norm: NormStats, cfg: TrainConfig,
                 embedders: Sequence[ContextEmbedder]):
        if not trajs:
            raise ValueError("training set is empty")
        self.trajs = list(trajs)
        self.norm = norm
        self.cfg = cfg
        self.embedders = list(embedders)
        self.sched = cfg.schedule
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
        self.count = 0
        self.seq_len = cfg.seq_len or min(len(tr) for tr in self.trajs)
        short = [i for i, tr in enumerate(self.trajs) if len(tr) < self.seq_len]
        if short:
            raise ValueError(f"trajectory {short[0]} shorter than training length {self.seq_len}")

    def draw(self) -> tuple[RecoveryTask, NoiseChain, int]:
        idx = int(self.rng.integers(len(self.trajs)))
        tr = self.trajs[idx]
        if len(tr) > self.seq_len:
            start = int(self.rng.integers(len(tr) - self.seq_len + 1))
            tr = Trajectory(tr.points[start:start + self.seq_len])
        task = RecoveryTask.from_dense(tr, self.cfg.sparsity, int(self.rng.integers(2**32)), self.norm)
        chain = build_noise_chain((len(task.query), 2), self.sched, int(self.rng.integers(2**32)))
        self.count += 1
        return task, chain, idx

    def make_slot(self, t: int) -> SampleSlot:
        task, chain, idx = self.draw()
        tc = condition_for_task(task, self.embedders)
        x0 = normalize(task.truth, task.norm)
        return SampleSlot(task, chain, t, None, tc.cond.data.copy(), tc.rows, x0, idx)


# -- batch management ----------------------------------------------------------

def initial_steps(mode: str, batch: int, T: int, k: int = 2) -> list[int]:
    """Starting window-top step for each slot."""
    if mode == "shared":
        return [T - 1] * batch
    if mode == "consecutive":
        span = T - k + 1
        return [T - 1 - (i % span) for i in range(batch)]
    if mode == "uniform":
        return [max(k - 1, int(math.floor((batch - 1 - i + 0.5) * T / batch))) for i in range(batch)]
    raise ValueError(f"unknown batch mode {mode!r}")


class BatchManager:
    """Owns slot steps and reload timing for one of the three batching modes."""

    def __init__(self, mode: str, batch: int, T: int, k: int, make_slot: Callable[[int], object]):
        if mode not in BATCH_MODES:
            raise ValueError(f"unknown batch mode {mode!r}")
        self.mode, self.T, self.k = mode, T, k
        self.make_slot = make_slot
        self.slots = [make_slot(t) for t in initial_steps(mode, batch, T, k)]
        self.reloads = 0

    def steps(self) -> list[int]:
        return [s.t for s in self.slots]

    def advance(self) -> None:
        """Decrement every slot's step and reload exhausted slots at ``T - 1``."""
        for s in self.slots:
            s.t -= 1
        if self.mode == "shared":
            if self.slots[0].t < self.k - 1:
                self.slots = [self.make_slot(self.T - 1) for _ in self.slots]
                self.reloads += len(self.slots)
            return
        for i, s in enumerate(self.slots):
            if s.t < self.k - 1:
                self.slots[i] = self.make_slot(self.T - 1)
                self.reloads += 1


def batch_manager_step(manager: BatchManager) -> list:
    manager.advance()
    return manager.slots


# -- one iteration ---------------------------------------------------------------

def _stack_state(model: SPDMNet, slots: Sequence[SampleSlot], L: int) -> list[torch.Tensor]:
    zero = model.init_state(1, L)
    levels = []
    for lvl in range(len(zero)):
        levels.append(torch.stack([
            s.state[lvl] if s.state is not None else zero[lvl][0] for s in slots
        ]))
    return levels


def train_iteration(slots: Sequence[SampleSlot], model: SPDMNet, optimizer, k: int,
                    sched: NoiseSchedule, sever_state: bool = False, grad_clip: float | None = 1.0,
                    step_hook: Callable | None = None) -> float:
    """Train ``k`` adjacent steps for every slot and apply one gradient update.

    ``sever_state`` feeds a zero state into every step so no gradient reaches
    the recurrent cells. Returns the summed per-step losses.
    """
    for s in slots:
        if s.t < k - 1:
            raise ValueError(f"slot at t={s.t} cannot train {k} steps")
    L = slots[0].base.shape[0]
    if any(s.base.shape[0] != L for s in slots):
        raise ValueError("all slots in a batch must share the merged length")
    mask = np.zeros((len(slots), L))
    for b, s in enumerate(slots):
        mask[b, s.rows] = 1.0
    mask_t = torch.as_tensor(mask, dtype=torch.float32)
    base = np.stack([s.base for s in slots])
    noisy_cols = slice(0, 2)

    model.train()
    state = None if sever_state else _stack_state(model, slots, L)
    total = 0.0
    loss = 0.0
    carried = None
    for j in range(k):
        steps = [s.t - j for s in slots]
        cond = base.copy()
        eps_true = np.zeros((len(slots), L, 2))
        for b, s in enumerate(slots):
            cond[b, s.rows, noisy_cols] = s.noisy(steps[b], sched)
            eps_true[b, s.rows] = s.chain.multi[steps[b]]
        cond_t = torch.as_tensor(cond, dtype=torch.float32).transpose(1, 2)
        st = model.init_state(len(slots), L) if sever_state else state
        eps_pred, state = model(cond_t, torch.as_tensor(steps), st)
        lj = masked_loss(eps_pred.transpose(1, 2), torch.as_tensor(eps_true, dtype=torch.float32), mask_t)
        if step_hook is not None:
            step_hook(j, steps, lj, state)
        loss = loss + lj
        total += lj.item()
        if j == 0:
            carried = [x.detach() for x in state]

    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()

    for b, s in enumerate(slots):
        s.state = None if sever_state or not carried else [lvl[b] for lvl in carried]
    return total


# -- driver ---------------------------------------------------------------------

@dataclass
class TrainResult:
    model: SPDMNet
    losses: list[float]
    mean_t: list[float]
    trained_steps: np.ndarray  # histogram over [0, T)
    layout: ConditionLayout
    norm: NormStats
    schedule: NoiseSchedule
    seconds: float


def train(trajs: Sequence[Trajectory], cfg: TrainConfig, model_cfg: dict | None = None,
          norm: NormStats | None = None, embedders: Sequence[ContextEmbedder] | None = None,
          out_dir: str | Path | None = None, log_every: int = 50) -> TrainResult:
    embedders = default_embedders() if embedders is None else list(embedders)
    norm = norm or NormStats.from_trajectories(trajs)
    layout = ConditionLayout.with_embedders(embedders)
    sched = cfg.schedule

    torch.manual_seed(cfg.seed)
    model_cfg = dict(model_cfg or {})
    model_cfg.setdefault("T", cfg.T)
    model_cfg.setdefault("beta_start", cfg.beta_start)
    model_cfg.setdefault("beta_end", cfg.beta_end)
    if model_cfg.get("prior_anchor", True) and "prior_sigma" not in model_cfg:
        model_cfg["prior_sigma"] = prior_residual_scale(trajs, norm, cfg, embedders)
    model = SPDMNet(DenoiserConfig(in_channels=layout.channels, **model_cfg))
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr)

    source = SampleSource(trajs, norm, cfg, embedders)
    manager = BatchManager(cfg.batch_mode, cfg.batch_size, cfg.T, cfg.k, source.make_slot)
    hist = np.zeros(cfg.T, dtype=np.int64)
    losses, mean_t = [], []
    writer = fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = (out_dir / "train_log.csv").open("w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss", "mean_t", "wall_seconds"])

    t0 = time.perf_counter()
    try:
        for it in range(cfg.iters):
            steps = manager.steps()
            for j in range(cfg.k):
                np.add.at(hist, np.asarray(steps) - j, 1)
            loss = train_iteration(manager.slots, model, opt, cfg.k, sched,
                                   sever_state=cfg.sever_state, grad_clip=cfg.grad_clip)
            if not math.isfinite(loss):
                raise NumericFailure(f"loss became {loss} at iteration {it} (mean t {np.mean(steps):.1f})")
            losses.append(loss / cfg.k)
            mean_t.append(float(np.mean(steps)))
            if writer is not None:
                writer.writerow([it, f"{loss / cfg.k:.6g}", f"{mean_t[-1]:.2f}",
                                 f"{time.perf_counter() - t0:.3f}"])
            if log_every and (it + 1) % log_every == 0:
                log.info("iter %d loss %.4f (avg last %d: %.4f)", it + 1, losses[-1], log_every,
                         float(np.mean(losses[-log_every:])))
            manager.advance()
    finally:
        if fh is not None:
            fh.close()
    seconds = time.perf_counter() - t0
    model.eval()
    result = TrainResult(model, losses, mean_t, hist, layout, norm, sched, seconds)
    if out_dir is not None:
        save_checkpoint(out_dir / "model.pt", model, sched.to_dict(), layout.to_list(), norm.to_dict(),
                        extra={"train": asdict(cfg), "seconds": seconds})
        norm.save(out_dir / "norm.json")
    return result


def prior_residual_scale(trajs: Sequence[Trajectory], norm: NormStats, cfg: TrainConfig,
                         embedders: Sequence[ContextEmbedder], n: int = 256) -> float:
    """RMS gap between the interpolation prior and the truth at query rows (normalized units)."""
    probe = TrainConfig(**{**asdict(cfg), "seed": cfg.seed + 7919})
    src = SampleSource(trajs, norm, probe, embedders)
    gaps = []
    for _ in range(min(n, 4 * len(trajs))):
        task, _, _ = src.draw()
        prior = normalize(task.prior().points, norm)[task.is_query, :2]
        gaps.append(normalize(task.truth, norm)[:, :2] - prior)
    return max(float(np.sqrt(np.mean(np.concatenate(gaps) ** 2))), 1e-4)


def t_histogram_flatness(hist: np.ndarray, bins: int = 50) -> float:
    """Largest relative deviation of binned step counts from their mean."""
    edges = np.linspace(0, len(hist), bins + 1).astype(int)
    counts = np.array([hist[a:b].sum() for a, b in zip(edges[:-1], edges[1:])], dtype=float)
    return float(np.max(np.abs(counts / counts.mean() - 1.0)))
