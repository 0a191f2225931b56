"""Recovery rollouts with DDPM, DDIM and state-propagating DDIM samplers."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .conditioning import ConditionLayout, ContextEmbedder, condition_for_task, default_embedders
from .denoiser import SPDMNet
from .diffusion import NoiseSchedule, ddim_step, ddpm_step, make_step_schedule
from .traj_data import RecoveryTask, Trajectory, denormalize, merge_timeline, normalize
from .training import NumericFailure

SAMPLERS = ("ddpm", "ddim", "sp-ddim")


class CompatibilityError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "sp-ddim"
    steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.kind!r}; expected one of {SAMPLERS}")

    def visited(self, T: int) -> list[int]:
        steps = T if self.steps is None else int(self.steps)
        if self.kind == "ddpm" and steps != T:
            raise ValueError(f"ddpm visits every step; got steps={steps} for T={T}")
        return make_step_schedule(T, steps)


class ModelPredictor:
    """Adapts an :class:`SPDMNet` to the rollout interface (numpy in, numpy out)."""

    def __init__(self, model: SPDMNet):
        self.model = model.eval()

    def init_state(self, batch: int, L: int):
        return self.model.init_state(batch, L)

    @torch.no_grad()
    def __call__(self, data: np.ndarray, t: int, state):
        cond = torch.as_tensor(data, dtype=torch.float32).transpose(1, 2)
        eps, new_state = self.model(cond, t, state)
        return eps.transpose(1, 2).double().numpy(), new_state


class OraclePredictor:
    """Returns the exact noise implied by the current sample and the known clean data."""

    def __init__(self, x0: np.ndarray, sched: NoiseSchedule):
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.sched = sched

    def init_state(self, batch: int, L: int):
        return []

    def __call__(self, data: np.ndarray, t: int, state):
        ab = self.sched.alpha_bar[t]
        x_t = data[..., :2]
        return (x_t - math.sqrt(ab) * self.x0) / math.sqrt(1.0 - ab), state


StepHook = Callable[[int, np.ndarray, list], None]


def rollout(base: np.ndarray, query_mask: np.ndarray, predictor, spec: SamplerSpec, sched: NoiseSchedule,
            on_step: StepHook | None = None) -> np.ndarray:
    """Denoise the query rows of a batch of aggregated conditions.

    ``base`` is ``(B, L, C)`` with the noisy-location block in columns 0:2.
    Returns the final normalized locations ``(B, L, 2)``; only query rows are
    meaningful.
    """
    B, L, _ = base.shape
    rows = query_mask.astype(bool)
    visited = spec.visited(sched.T)
    init_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 2]))
    noise_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 3]))

    data = base.astype(np.float64, copy=True)
    x = init_rng.standard_normal((B, L, 2))
    data[rows, 0:2] = x[rows]
    state = predictor.init_state(B, L)
    zero_state = state
    if on_step is not None:
        on_step(sched.T, data, state)
    for i, t in enumerate(visited):
        eps, new_state = predictor(data, t, state)
        if not np.all(np.isfinite(eps[rows])):
            raise NumericFailure(f"non-finite noise prediction at step {t}")
        state = zero_state if spec.kind == "ddim" else new_state
        if spec.kind == "ddpm":
            z = noise_rng.standard_normal((B, L, 2)) if t > 0 else None
            x = ddpm_step(x, eps, t, z, sched)
        else:
            t_prev = visited[i + 1] if i + 1 < len(visited) else -1
            x = ddim_step(x, eps, t, t_prev, sched)
        if not np.all(np.isfinite(x[rows])):
            raise NumericFailure(f"non-finite sample at step {t}")
        data[rows, 0:2] = x[rows]
        if on_step is not None:
            on_step(t, data, state)
    return data[..., 0:2].copy()


@dataclass
class RecoveryOutput:
    trajectories: list[Trajectory]
    predictions: list[np.ndarray]  # normalized (m, 2) per task, at query rows
    wall_seconds: float
    batch_seconds: list[float]  # wall time of the batch each task was recovered in


def _merged(task: RecoveryTask, pred_norm: np.ndarray) -> Trajectory:
    times, is_query = merge_timeline(task.sparse, task.query)
    out = np.empty((len(times), 3))
    out[:, 2] = times
    out[~is_query] = task.sparse.points  # observed rows copied verbatim
    out[is_query, :2] = denormalize(pred_norm, task.norm)
    out[is_query, 2] = task.query.times
    return Trajectory(out)


def check_layout(layout: list | ConditionLayout, embedders: Sequence[ContextEmbedder]) -> None:
    expected = ConditionLayout.with_embedders(embedders)
    got = layout if isinstance(layout, ConditionLayout) else ConditionLayout.from_list(layout)
    if got != expected:
        raise CompatibilityError(
            f"checkpoint layout {got.to_list()} does not match registered embedders {expected.to_list()}"
        )


def recover(tasks: Sequence[RecoveryTask], model: SPDMNet | None, spec: SamplerSpec, sched: NoiseSchedule,
            embedders: Sequence[ContextEmbedder] | None = None, layout=None, batch_size: int = 256,
            predictor_factory: Callable | None = None, on_step: StepHook | None = None) -> RecoveryOutput:
    """Recover every task; observed points are returned bit-identical.

    Tasks are batched by merged length. ``predictor_factory(tasks_in_batch)``
    overrides the network (used for oracle rollouts).
    """
    embedders = default_embedders() if embedders is None else list(embedders)
    if layout is not None:
        check_layout(layout, embedders)
    if model is not None:
        trained = NoiseSchedule(model.cfg.T, model.cfg.beta_start, model.cfg.beta_end)
        if trained != sched:
            raise CompatibilityError(f"model trained with {trained.to_dict()}, sampling with {sched.to_dict()}")
    spec.visited(sched.T)

    by_len: dict[int, list[int]] = {}
    for i, task in enumerate(tasks):
        by_len.setdefault(task.length, []).append(i)

    preds: list[np.ndarray | None] = [None] * len(tasks)
    batch_seconds = [0.0] * len(tasks)
    t0 = time.perf_counter()
    for chunk_no, (L, idxs) in enumerate(sorted(by_len.items())):
        for start in range(0, len(idxs), batch_size):
            batch = idxs[start:start + batch_size]
            tb = time.perf_counter()
            tcs = [condition_for_task(tasks[i], embedders) for i in batch]
            base = np.stack([tc.cond.data for tc in tcs])
            if model is not None and base.shape[2] != model.cfg.in_channels:
                raise CompatibilityError(
                    f"condition has {base.shape[2]} channels, model expects {model.cfg.in_channels}"
                )
            qmask = np.stack([tc.cond.mask == 1 for tc in tcs])
            if predictor_factory is not None:
                predictor = predictor_factory([tasks[i] for i in batch])
            else:
                predictor = ModelPredictor(model)
            sub = SamplerSpec(spec.kind, spec.steps, int(np.random.SeedSequence(
                [spec.seed, chunk_no, start]).generate_state(1)[0]))
            x = rollout(base, qmask, predictor, sub, sched, on_step)
            elapsed = time.perf_counter() - tb
            for b, i in enumerate(batch):
                preds[i] = x[b, tcs[b].rows]
                batch_seconds[i] = elapsed
    wall = time.perf_counter() - t0
    trajs = [_merged(task, p) for task, p in zip(tasks, preds)]
    return RecoveryOutput(trajs, preds, wall, batch_seconds)


def oracle_factory(sched: NoiseSchedule):
    """Predictor factory producing exact-noise oracles from the tasks' ground truth."""

    def make(batch_tasks: Sequence[RecoveryTask]):
        x0 = np.stack([normalize(t.dense_truth().points, t.norm)[:, :2] for t in batch_tasks])
        return OraclePredictor(x0, sched)

    return make


def sp_ddim_rollout(tasks, model, steps: int, sched: NoiseSchedule, seed: int = 0, **kw) -> RecoveryOutput:
    return recover(tasks, model, SamplerSpec("sp-ddim", steps, seed), sched, **kw)
