"""Command-line entry point: ``trajrecover {synth,train,recover,eval,bench,replay}``.

Exit codes: 0 success, 2 validation error, 3 numeric failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("trajrecover")


def _write_echo(out_dir: Path, command: str, args: argparse.Namespace) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    params = {k: v for k, v in vars(args).items() if k not in ("func", "command", "verbose")}
    (out_dir / "config_echo.json").write_text(
        json.dumps({"command": command, "args": params}, indent=2, sort_keys=True) + "\n"
    )


def _dataset_path(p: str) -> Path:
    path = Path(p)
    if path.is_dir():
        path = path / "trajectories.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return path


def _stats_block(trajs) -> str:
    n_pts = sum(len(t) for t in trajs)
    durations = [t.times[-1] - t.times[0] for t in trajs] or [0.0]
    rows = [("#Trajectories", f"{len(trajs)}"), ("#Points", f"{n_pts}"),
            ("Mean duration", f"{np.mean(durations) / 60:.1f} min")]
    width = max(len(k) for k, _ in rows) + 2
    return "\n".join(f"{k:<{width}}{v}" for k, v in rows)


# -- commands ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .traj_data import NormStats, save_jsonl, synth_generate

    trajs = synth_generate(args.n, args.len, args.seed)
    out = Path(args.out)
    save_jsonl(trajs, out / "trajectories.jsonl")
    if trajs:
        NormStats.from_trajectories(trajs).save(out / "norm.json")
    _write_echo(out, "synth", args)
    print("Dataset statistics")
    print(_stats_block(trajs))
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import plot_loss_curve, plot_step_histogram
    from .traj_data import NormStats, load_jsonl
    from .training import TrainConfig, t_histogram_flatness, train

    trajs = load_jsonl(_dataset_path(args.data))
    cfg = TrainConfig(T=args.T, beta_start=args.beta_start, beta_end=args.beta_end, k=args.steps_per_iter,
                      batch_size=args.batch_size, lr=args.lr, batch_mode=args.batch_mode, iters=args.iters,
                      seed=args.seed, sparsity=args.sparsity, seq_len=args.seq_len)
    model_cfg = dict(levels=args.levels, base_width=args.base_width, heads=args.heads, fusion=args.fusion,
                     state_ratio=args.state_ratio, use_state=not args.no_state)
    norm = NormStats.load(args.norm) if args.norm else None
    out = Path(args.out)
    _write_echo(out, "train", args)
    res = train(trajs, cfg, model_cfg, norm=norm, out_dir=out, log_every=args.log_every)
    plot_loss_curve(res.losses, out / "loss.png")
    plot_step_histogram(res.trained_steps, out / "t_hist.png")
    tail = res.losses[-min(50, len(res.losses)):] or [float("nan")]
    print(f"iterations      {cfg.iters}")
    print(f"final loss      {np.mean(tail):.5f} (mean of last {len(tail)})")
    if res.trained_steps.sum():
        print(f"t histogram     max relative deviation over 50 bins: "
              f"{t_histogram_flatness(res.trained_steps):.3f} ({cfg.batch_mode} mode)")
    print(f"wall seconds    {res.seconds:.1f}")
    print(f"checkpoint      {out / 'model.pt'}")
    return EXIT_OK


def _tasks_from_records(records, norm, sparsity, seed):
    from .traj_data import Query, RecoveryTask, Trajectory, TrajectoryError

    tasks = []
    seeds = np.random.SeedSequence([seed, 0]).generate_state(max(1, len(records)))
    for i, rec in enumerate(records):
        tr = Trajectory(rec["points"])
        if sparsity is not None:
            tasks.append(RecoveryTask.from_dense(tr, sparsity, int(seeds[i]), norm, rec.get("contexts")))
        elif "query" in rec:
            tasks.append(RecoveryTask(tr, Query(rec["query"]), norm, rec.get("contexts") or {}))
        else:
            raise TrajectoryError(f"line {i + 1}: no 'query' field and no --sparsity given")
    return tasks


def cmd_recover(args) -> int:
    from .denoiser import load_checkpoint
    from .diffusion import NoiseSchedule
    from .sampling import SamplerSpec, recover
    from .traj_data import NormStats, read_jsonl_records, save_jsonl, trajectory_to_json

    model, meta = load_checkpoint(args.ckpt)
    norm = NormStats.from_dict(meta["norm"])
    sched = NoiseSchedule.from_dict(meta["schedule"])
    records = read_jsonl_records(_dataset_path(args.data))
    tasks = _tasks_from_records(records, norm, args.sparsity, args.seed)
    spec = SamplerSpec(args.sampler, args.steps, args.seed)
    out_dir = Path(args.out)
    _write_echo(out_dir, "recover", args)
    res = recover(tasks, model, spec, sched, layout=meta["layout"], batch_size=args.batch_size)

    with (out_dir / "sparse.jsonl").open("w") as fh:
        for task in tasks:
            fh.write(trajectory_to_json(task.sparse, query=[float(t) for t in task.query.times]) + "\n")
    if args.sparsity is not None:
        save_jsonl([t.dense_truth() for t in tasks], out_dir / "truth.jsonl")
    save_jsonl(res.trajectories, out_dir / "recovered.jsonl")
    steps = len(spec.visited(sched.T))
    with (out_dir / "recovered.meta.jsonl").open("w") as fh:
        for secs in res.batch_seconds:
            fh.write(json.dumps({"sampler": spec.kind, "steps": steps, "seed": spec.seed,
                                 "wall_seconds": round(secs, 6)}) + "\n")
    print(f"recovered {len(tasks)} trajectories with {spec.kind} ({steps} steps) "
          f"in {res.wall_seconds:.2f} s")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evalkit import evaluate, speed_and_distance, mse_metric, ndtw_metric
    from .plotting import plot_overlay
    from .traj_data import NormStats, load_jsonl, normalize

    truth = load_jsonl(_dataset_path(args.truth))
    recovered = load_jsonl(_dataset_path(args.recovered))
    sparse = load_jsonl(_dataset_path(args.sparse)) if args.sparse else None
    if len(truth) != len(recovered) or (sparse is not None and len(sparse) != len(truth)):
        raise ValueError("recovered, truth and sparse sets have different sizes")
    norm = NormStats.load(args.norm) if args.norm else NormStats.from_trajectories(truth)
    report = evaluate(recovered, truth, norm, sparse, config={k: v for k, v in vars(args).items()
                                                                  if k not in ("func", "verbose")})
    out = Path(args.out)
    _write_echo(out, "eval", args)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.txt").write_text(report.to_table())

    with (out / "per_trajectory.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "mse", "ndtw", "truth_km", "recovered_km"] + (["sparse_km"] if sparse else []))
        for i, (r, t) in enumerate(zip(recovered, truth)):
            rn, tn = normalize(r.points, norm)[:, :2], normalize(t.points, norm)[:, :2]
            mask = ~np.isin(t.times, sparse[i].times) if sparse else None
            row = [i, f"{mse_metric(rn, tn, mask if mask is not None and mask.any() else None):.6g}",
                   f"{ndtw_metric(rn, tn):.6g}", f"{speed_and_distance(t)[1]:.6g}",
                   f"{speed_and_distance(r)[1]:.6g}"]
            if sparse:
                row.append(f"{speed_and_distance(sparse[i])[1]:.6g}")
            w.writerow(row)

    n_plots = min(args.plot_n, len(truth))
    if n_plots and sparse is not None:
        for i in range(n_plots):
            plot_overlay(truth[i], sparse[i], recovered[i], out / "plots" / f"overlay_{i:03d}.png",
                         title=f"trajectory {i}")
    elif n_plots:
        log.warning("--plot-n needs --sparse; no overlays written")
    print(report.to_table(), end="")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .benchmark import BenchConfig, format_summary, run_benchmark

    cfg = BenchConfig(n=args.n, length=args.len, iters=args.iters, batch_size=args.batch_size,
                      base_width=args.base_width, lr=args.lr, n_test=args.n_test, few_steps=args.few_steps,
                      T=args.T)
    out = Path(args.out)
    _write_echo(out, "bench", args)
    results = [run_benchmark(cfg, seed, out / f"seed{seed}") for seed in args.seeds]
    (out / "bench.json").write_text(json.dumps(results, indent=2) + "\n")
    print(format_summary(results), end="")
    return EXIT_OK


def cmd_replay(args) -> int:
    echo = json.loads(Path(args.echo).read_text())
    argv = [echo["command"]]
    for k, v in echo["args"].items():
        flag = "--" + k.replace("_", "-")
        if isinstance(v, bool):
            if v:
                argv.append(flag)
        elif isinstance(v, list):
            argv += [flag, *map(str, v)]
        elif v is not None:
            argv += [flag, str(v)]
    return main(argv)


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajrecover", description="Diffusion-based sparse trajectory recovery")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dense trajectory dataset")
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--len", type=int, default=64)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a state-propagating denoiser")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--norm", default=None, help="NormStats JSON sidecar (default: from the data)")
    s.add_argument("--iters", type=int, default=1000)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--batch-mode", choices=["shared", "consecutive", "uniform"], default="uniform")
    s.add_argument("--steps-per-iter", type=int, default=2)
    s.add_argument("--fusion", choices=["add", "concat", "cross-attention"], default="add")
    s.add_argument("--T", type=int, default=500)
    s.add_argument("--beta-start", type=float, default=1e-4)
    s.add_argument("--beta-end", type=float, default=0.02)
    s.add_argument("--levels", type=int, default=3)
    s.add_argument("--base-width", type=int, default=64)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--state-ratio", type=float, default=0.5)
    s.add_argument("--no-state", action="store_true", help="build the network without state paths")
    s.add_argument("--lr", type=float, default=2e-4)
    s.add_argument("--sparsity", type=float, default=0.5)
    s.add_argument("--seq-len", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--log-every", type=int, default=50)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("recover", help="recover dense trajectories from sparse ones")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True, help="JSONL; dense with --sparsity, else lines carry 'query'")
    s.add_argument("--out", required=True)
    s.add_argument("--sampler", choices=["ddpm", "ddim", "sp-ddim"], default="sp-ddim")
    s.add_argument("--steps", type=int, default=None, help="visited steps (default: T)")
    s.add_argument("--sparsity", type=float, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--batch-size", type=int, default=256)
    s.set_defaults(func=cmd_recover)

    s = sub.add_parser("eval", help="score recovered trajectories and draw overlays")
    s.add_argument("--truth", required=True)
    s.add_argument("--recovered", required=True)
    s.add_argument("--sparse", default=None)
    s.add_argument("--norm", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--plot-n", type=int, default=4)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="run the toy benchmark (baseline, stateless and stateful models)")
    s.add_argument("--n", type=int, default=2000)
    s.add_argument("--len", type=int, default=64)
    s.add_argument("--T", type=int, default=500)
    s.add_argument("--iters", type=int, default=3000)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--base-width", type=int, default=32)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--n-test", type=int, default=100)
    s.add_argument("--few-steps", type=int, default=21)
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("replay", help="rerun a command from its config_echo.json")
    s.add_argument("echo")
    s.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    from .conditioning import LayoutError
    from .denoiser import ConfigError
    from .training import NumericFailure

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, LayoutError, ConfigError, IndexError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
