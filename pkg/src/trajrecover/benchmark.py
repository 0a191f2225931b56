"""Toy benchmark: stateful vs stateless denoisers vs linear interpolation on synthetic paths."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .evalkit import aggregate_speed_distance, baseline_linear, mse_metric
from .plotting import plot_loss_curve, plot_overlay
from .sampling import SamplerSpec, recover
from .traj_data import NormStats, RecoveryTask, normalize, synth_generate
from .training import TrainConfig, train

log = logging.getLogger(__name__)


@dataclass
class BenchConfig:
    n: int = 2000
    length: int = 64
    sparsity: float = 0.5
    T: int = 500
    iters: int = 3000
    batch_size: int = 32
    base_width: int = 32
    levels: int = 3
    lr: float = 1e-3
    n_test: int = 100
    few_steps: int = 21


def _query_mse(preds, tasks, norm) -> float:
    return float(np.mean([mse_metric(p, normalize(t.truth, norm)) for p, t in zip(preds, tasks)]))


def run_benchmark(cfg: BenchConfig, seed: int, out_dir: str | Path | None = None) -> dict:
    """Train both variants with one seed and score every recoverer on held-out paths."""
    data = synth_generate(cfg.n, cfg.length, seed=1000 + seed)
    norm = NormStats.from_trajectories(data)
    train_set, test_set = data[:-cfg.n_test], data[-cfg.n_test:]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    tasks = [RecoveryTask.from_dense(tr, cfg.sparsity, int(rng.integers(2**32)), norm) for tr in test_set]

    tcfg = TrainConfig(T=cfg.T, iters=cfg.iters, batch_size=cfg.batch_size, lr=cfg.lr, seed=seed,
                       sparsity=cfg.sparsity)
    sched = tcfg.schedule
    arch = dict(base_width=cfg.base_width, levels=cfg.levels)
    log.info("seed %d: training stateful model", seed)
    stateful = train(train_set, tcfg, {**arch, "use_state": True}, norm=norm)
    log.info("seed %d: training stateless model", seed)
    stateless = train(train_set, tcfg, {**arch, "use_state": False}, norm=norm)

    res: dict = {"seed": seed, "config": asdict(cfg),
                 "train_seconds": {"stateful": stateful.seconds, "stateless": stateless.seconds}}
    lin = [normalize(baseline_linear(t).points, norm)[t.is_query, :2] for t in tasks]
    res["mse"] = {"linear": _query_mse(lin, tasks, norm)}
    res["wall"] = {}
    outs = {}
    runs = [("sp-ddim", cfg.T, stateful), ("sp-ddim", cfg.few_steps, stateful),
            ("ddim", cfg.T, stateless), ("ddim", cfg.few_steps, stateless)]
    for kind, steps, tr in runs:
        out = recover(tasks, tr.model, SamplerSpec(kind, steps, seed), sched)
        key = f"{kind}-{steps}"
        outs[key] = out
        res["mse"][key] = _query_mse(out.predictions, tasks, norm)
        res["wall"][key] = out.wall_seconds
        log.info("seed %d: %s mse %.3g (%.1f s)", seed, key, res["mse"][key], out.wall_seconds)

    res["speed_distance"] = {
        "truth": aggregate_speed_distance([t.dense_truth() for t in tasks]),
        "sparse": aggregate_speed_distance([t.sparse for t in tasks]),
        "recovered": aggregate_speed_distance(outs[f"sp-ddim-{cfg.T}"].trajectories),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "result.json").write_text(json.dumps(res, indent=2) + "\n")
        plot_loss_curve(stateful.losses, out_dir / "loss_stateful.png")
        plot_loss_curve(stateless.losses, out_dir / "loss_stateless.png")
        for i in range(min(3, len(tasks))):
            plot_overlay(tasks[i].dense_truth(), tasks[i].sparse, outs[f"sp-ddim-{cfg.T}"].trajectories[i],
                         out_dir / f"overlay_{i}.png", title=f"seed {seed}, trajectory {i}")
    return res


def format_summary(results: list[dict]) -> str:
    keys = list(results[0]["mse"])
    head = f"{'seed':<6}" + "".join(f"{k:>14}" for k in keys)
    lines = ["query-row MSE (normalized units)", head]
    for r in results:
        lines.append(f"{r['seed']:<6}" + "".join(f"{r['mse'][k]:>14.4g}" for k in keys))
    lines += ["", "wall seconds", f"{'seed':<6}" + "".join(f"{k:>14}" for k in results[0]["wall"])]
    for r in results:
        lines.append(f"{r['seed']:<6}" + "".join(f"{v:>14.2f}" for v in r["wall"].values()))
    lines += ["", f"{'seed':<6}{'set':<11}{'speed m/s':>11}{'dist km':>10}"]
    for r in results:
        for name, sd in r["speed_distance"].items():
            lines.append(f"{r['seed']:<6}{name:<11}{sd['speed_mps']:>11.3f}{sd['distance_km']:>10.3f}")
    return "\n".join(lines) + "\n"
