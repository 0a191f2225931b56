"""Noise schedules, forward diffusion, noise composition and reverse steps.

Indexing convention: step ``t`` runs over ``[0, T)`` and the noisy sample at
step ``t`` is ``sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`` with
``alpha_bar[t] = prod(alpha[0..t])``. Index ``-1`` denotes the clean sample
(``alpha_bar[-1] := 1``). ``forward_step(x, t, eps)`` moves a sample from
step ``t - 1`` to step ``t``.

All step functions only use scalar schedule entries, so they accept numpy
arrays and torch tensors alike.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 2:
            raise ValueError(f"T must be an integer >= 2, got {self.T}")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ValueError(
                f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}"
            )
        beta = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        for name, arr in (("beta", beta), ("alpha", alpha), ("alpha_bar", alpha_bar)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def ab(self, t: int) -> float:
        """``alpha_bar[t]`` with the clean-sample convention at ``t = -1``."""
        return 1.0 if t == -1 else float(self.alpha_bar[t])

    def check_step(self, t: int) -> int:
        if not (0 <= int(t) < self.T):
            raise IndexError(f"step {t} outside [0, {self.T})")
        return int(t)

    def to_dict(self) -> dict:
        return {"T": int(self.T), "beta_start": float(self.beta_start), "beta_end": float(self.beta_end)}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))


def make_schedule(T: int = 500, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    return NoiseSchedule(T, beta_start, beta_end)


def forward_step(x_t, t: int, eps, sched: NoiseSchedule):
    t = sched.check_step(t)
    if eps.shape != x_t.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != sample shape {tuple(x_t.shape)}")
    return math.sqrt(sched.alpha[t]) * x_t + math.sqrt(sched.beta[t]) * eps


def forward_jump(x0, t: int, eps_multi, sched: NoiseSchedule):
    """Noisy sample at step ``t`` directly from the clean sample."""
    t = sched.check_step(t)
    ab = sched.alpha_bar[t]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps_multi


def compose_noise(eps_multi_prev, eps_single, t: int, sched: NoiseSchedule):
    """Multi-step noise at step ``t`` from the one at ``t - 1`` and the fresh single-step noise."""
    t = sched.check_step(t)
    if t == 0:
        raise IndexError("compose_noise needs t >= 1; step 0 has no previous multi-step noise")
    if eps_multi_prev.shape != eps_single.shape:
        raise ValueError("noise shapes differ")
    a, b = sched.alpha[t], sched.beta[t]
    ab_prev, ab = sched.alpha_bar[t - 1], sched.alpha_bar[t]
    return (math.sqrt(a) * math.sqrt(1.0 - ab_prev) * eps_multi_prev + math.sqrt(b) * eps_single) / math.sqrt(1.0 - ab)


def decompose_noise(eps_multi, eps_single, t: int, sched: NoiseSchedule):
    """Inverse of :func:`compose_noise`: recover the multi-step noise at ``t - 1``."""
    t = sched.check_step(t)
    if t == 0:
        raise IndexError("decompose_noise needs t >= 1")
    a, b = sched.alpha[t], sched.beta[t]
    ab_prev, ab = sched.alpha_bar[t - 1], sched.alpha_bar[t]
    return (math.sqrt(1.0 - ab) * eps_multi - math.sqrt(b) * eps_single) / (math.sqrt(a) * math.sqrt(1.0 - ab_prev))


@dataclass(frozen=True)
class NoiseChain:
    """Independent single-step noises and the multi-step noises folded from them.

    ``single[t]`` takes a sample from step ``t - 1`` to ``t``; ``multi[t]``
    takes the clean sample to step ``t`` in one jump.
    """

    single: np.ndarray
    multi: np.ndarray

    def __len__(self) -> int:
        return len(self.single)


def fold_multi(single: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    multi = np.empty_like(single)
    multi[0] = single[0]
    for t in range(1, len(single)):
        multi[t] = compose_noise(multi[t - 1], single[t], t, sched)
    return multi


def build_noise_chain(shape: tuple[int, ...], sched: NoiseSchedule, seed) -> NoiseChain:
    rng = np.random.default_rng(seed)
    single = rng.standard_normal((sched.T, *shape))
    return NoiseChain(single, fold_multi(single, sched))


class LazyNoiseChain:
    """Noise chain that stores one multi-step noise at a time.

    Single-step noises are regenerated on demand from ``(seed, t)``, so memory
    is independent of ``T``. Walking down from ``T - 1`` uses the inverted
    compose relation. Agrees with :func:`build_noise_chain` semantics for the
    same single-step noises.
    """

    def __init__(self, shape: tuple[int, ...], sched: NoiseSchedule, seed: int):
        self.shape = tuple(shape)
        self.sched = sched
        self.seed = int(seed)
        eps = self.single(0)
        for t in range(1, sched.T):
            eps = compose_noise(eps, self.single(t), t, sched)
        self._t = sched.T - 1
        self._multi = eps

    def single(self, t: int) -> np.ndarray:
        return np.random.default_rng([self.seed, t]).standard_normal(self.shape)

    def multi(self, t: int) -> np.ndarray:
        """Multi-step noise at ``t``; ``t`` must not exceed the last one requested."""
        if t > self._t:
            raise IndexError(f"lazy chain already at step {self._t}; cannot move up to {t}")
        while self._t > t:
            self._multi = decompose_noise(self._multi, self.single(self._t), self._t, self.sched)
            self._t -= 1
        return self._multi

    def materialize(self) -> NoiseChain:
        single = np.stack([self.single(t) for t in range(self.sched.T)])
        return NoiseChain(single, fold_multi(single, self.sched))


def posterior_std(t: int, sched: NoiseSchedule) -> float:
    t = sched.check_step(t)
    return math.sqrt(sched.beta[t] * (1.0 - sched.ab(t - 1)) / (1.0 - sched.alpha_bar[t]))


def ddpm_step(x_next, eps_pred, t: int, z, sched: NoiseSchedule):
    """Ancestral sample of step ``t - 1`` given the sample at step ``t``.

    ``z`` is unit Gaussian noise (or zero for the posterior mean); it is
    ignored at ``t = 0`` where the posterior is a point mass.
    """
    t = sched.check_step(t)
    a, b, ab = sched.alpha[t], sched.beta[t], sched.alpha_bar[t]
    mean = (x_next - (b / math.sqrt(1.0 - ab)) * eps_pred) / math.sqrt(a)
    if t == 0 or z is None:
        return mean
    return mean + posterior_std(t, sched) * z


def predict_x0(x_t, eps_pred, t: int, sched: NoiseSchedule):
    ab = sched.alpha_bar[sched.check_step(t)]
    return (x_t - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)


def ddim_step(x_next, eps_pred, t_next: int, t_prev: int, sched: NoiseSchedule):
    """Deterministic (eta = 0) jump from step ``t_next`` to ``t_prev``.

    ``t_prev = -1`` returns the clean-sample estimate.
    """
    t_next = sched.check_step(t_next)
    if not (-1 <= t_prev < t_next):
        raise ValueError(f"DDIM needs -1 <= t_prev < t_next, got t_prev={t_prev}, t_next={t_next}")
    x0_hat = predict_x0(x_next, eps_pred, t_next, sched)
    ab_prev = sched.ab(t_prev)
    return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_pred


def make_step_schedule(T: int, steps: int) -> list[int]:
    """Evenly spaced, strictly decreasing visited steps from ``T - 1`` to 0."""
    if not (2 <= steps <= T):
        raise ValueError(f"need 2 <= steps <= T, got steps={steps}, T={T}")
    idx = np.rint(np.linspace(T - 1, 0, steps)).astype(int)
    out = [int(v) for v in idx]
    assert all(a > b for a, b in zip(out, out[1:])), out
    return out
