"""Command-line interface: gen-data, train, eval, compare, bench, plot.

Exit codes: 0 success, 1 usage error, 2 numeric failure (NaN/divergence),
3 I/O or format error.
"""

from __future__ import annotations

import os

# Pin BLAS threading before numpy is pulled in: the matrices here are small,
# and single-threaded kernels keep outputs bit-reproducible across runs.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import kernels
from .baselines import (DiskParticleFilter, MismatchedDiskKf, MismatchedOdomEkf,
                        OracleDiskKf)
from .dataio import build_id, read_dataset, write_dataset
from .errors import FormatError, NumericError, UsageError
from .filtering import run_episode, start_frame
from .persist import load_model, save_model
from .plotting import (read_csv, write_csv, write_curves_svg,
                       write_trajectory_svg)
from .rng import Rng
from .simulators import (DISK, config_from_dict, generate_split, split_seeds)
from .training import (evaluate_baseline, evaluate_dnd, measure_throughput,
                       train_filter)

BASELINES = ("kf-oracle", "kf-mismatched", "pf")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: _Parser):
    p.add_argument("--config", help="JSON run config (defaults documented in README)")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--task", choices=("disk", "odom"), help="override config task")
    p.add_argument("--k", type=int, action="append",
                   help="diffusion steps (repeatable where a list makes sense)")
    p.add_argument("--overwrite", action="store_true")


def build_parser() -> _Parser:
    parser = _Parser(prog="dndfilter")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--manifest", help="regenerate byte-identically from a manifest")

    p = sub.add_parser("train", help="run the stagewise training pipeline")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint or baseline")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--method", default="dnd", choices=("dnd",) + BASELINES)
    p.add_argument("--pred-mode", choices=("model", "none", "truth"),
                   help="conditioning at inference (dnd only)")
    p.add_argument("--dump-trajectories", action="store_true")

    p = sub.add_parser("compare", help="ranked table over checkpoints/baselines")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", action="append", default=[])
    p.add_argument("--baseline", action="append", default=[], choices=BASELINES)

    p = sub.add_parser("bench", help="filter steps/sec per diffusion step count")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--steps", type=int, default=1000)

    p = sub.add_parser("plot", help="render CSV outputs as SVG")
    _add_common(p)
    p.add_argument("--trajectory", help="trajectory CSV from eval --dump-trajectories")
    p.add_argument("--metrics", help="loss-curve CSV from train")
    return parser


def _resolved(args) -> dict:
    user = cfgmod.load_config(args.config) if args.config else {}
    cfg = cfgmod.resolve_config(user)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out:
        cfg["out"] = args.out
    if args.task:
        cfg["task"] = args.task
    if args.k:
        cfg["diffusion"]["k_steps"] = args.k[-1]
    return cfg


def _meta_lines(cfg: dict) -> list[str]:
    return [f"build={build_id()}", f"config_hash={cfgmod.config_hash(cfg)}",
            "config=" + json.dumps(cfg, sort_keys=True)]


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _resolved(args)
    out = _out_dir(cfg)
    if args.manifest:
        manifest = json.loads(Path(args.manifest).read_text())
        task = manifest["task"]
        world = config_from_dict(task, manifest["world"])
        splits = {manifest["split"]: manifest["seeds"]}
    else:
        task = cfg["task"]
        world = cfgmod.world_config(cfg)
        n_train = args.n_train if args.n_train is not None else cfg["data"]["n_train"]
        n_test = args.n_test if args.n_test is not None else cfg["data"]["n_test"]
        base = cfg["seed"] if args.seed is not None else cfg["data"]["base_seed"]
        splits = {"train": split_seeds(base, "train", n_train),
                  "test": split_seeds(base, "test", n_test)}
    for split, seeds in splits.items():
        episodes = generate_split(task, world, seeds)
        manifest = {
            "task": task,
            "split": split,
            "world": asdict(world),
            "seeds": list(map(int, seeds)),
            "episodes": len(episodes),
            "seq_len": int(episodes[0].seq_len),
            "build": build_id(),
            "config_hash": cfgmod.config_hash(cfg),
        }
        if task == DISK:
            rate = float(np.mean([ep.occluded.mean() for ep in episodes]))
            manifest["occlusion_rate"] = rate
        write_dataset(out / f"{split}.dndf", episodes, manifest,
                      overwrite=args.overwrite)
        (out / f"{split}_manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True))
        print(f"wrote {out / f'{split}.dndf'} ({len(episodes)} episodes)")
    return 0


def cmd_train(args) -> int:
    cfg = _resolved(args)
    out = _out_dir(cfg)
    chash = cfgmod.config_hash(cfg)
    ckpt_path = out / "checkpoint.dndc"
    if ckpt_path.exists():
        from .dataio import read_checkpoint
        _, old_meta = read_checkpoint(ckpt_path)
        if old_meta.get("config_hash") != chash and not args.overwrite:
            raise FormatError(
                f"{ckpt_path} was trained with config {old_meta.get('config_hash')}, "
                f"current is {chash}; pass --overwrite to replace")
    train_path = cfg["dataset"]["train"]
    if not train_path:
        raise UsageError("config dataset.train is required for training")
    episodes, _ = read_dataset(train_path)
    if episodes[0].task != cfg["task"]:
        raise UsageError(f"dataset task {episodes[0].task!r} != config task {cfg['task']!r}")
    world = cfgmod.world_config(cfg)
    tcfg = cfgmod.train_config(cfg)
    result = train_filter(tcfg, episodes, world)
    (out / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    snap = result.model.snapshot()
    for stage_id, params in result.stage_params.items():
        result.model.restore(params)
        save_model(out / f"checkpoint_stage{stage_id}.dndc", result.model, chash,
                   {"stage": stage_id})
    result.model.restore(snap)
    save_model(ckpt_path, result.model, chash,
               {"stage": max(result.stage_params)})
    write_csv(out / "loss_curves.csv", _meta_lines(cfg),
              ["stage", "epoch", "train_loss", "val_loss"],
              [[c["stage"], c["epoch"], c["train_loss"], c["val_loss"]]
               for c in result.curves])
    print(f"wrote {ckpt_path} (config {chash})")
    if result.stage3_aborted:
        print("stage 3 diverged; kept the stage-2 checkpoint")
    return 0


def _report_rows(report) -> list[list]:
    rows = []
    for name in report.metric_names():
        for i, v in enumerate(report.values[name]):
            rows.append([report.method, name, f"ep{i}", float(v)])
        rows.append([report.method, name, "mean", report.mean(name)])
        rows.append([report.method, name, "std", report.std(name)])
    return rows


def _load_eval_inputs(args, cfg):
    episodes, manifest = read_dataset(args.dataset)
    world = config_from_dict(episodes[0].task, manifest.get("world", {}))
    return episodes, manifest, world


def cmd_eval(args) -> int:
    cfg = _resolved(args)
    out = _out_dir(cfg)
    episodes, manifest, world = _load_eval_inputs(args, cfg)
    rng = Rng(cfg["eval"]["seed"]).substream("eval")
    if args.method == "dnd":
        if not args.checkpoint:
            raise UsageError("eval --method dnd needs --checkpoint")
        model, meta = load_model(args.checkpoint)
        if model.task != episodes[0].task:
            raise UsageError("checkpoint task does not match dataset task")
        model.n_samples = cfg["eval"]["n_samples"]
        report = evaluate_dnd(model, episodes, rng, pred_mode=args.pred_mode)
    else:
        report = evaluate_baseline(args.method, episodes, world, rng,
                                   pf_particles=cfg["eval"]["pf_particles"])
    write_csv(out / "metrics.csv", _meta_lines(cfg),
              ["method", "metric", "scope", "value"], _report_rows(report))
    lines = [f"{report.method} on {args.dataset} ({report.n_episodes} episodes)"]
    for name in report.metric_names():
        lines.append(f"  {name}: {report.mean(name):.6g} +/- {report.std(name):.6g}")
    (out / "metrics.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    if args.dump_trajectories:
        _dump_trajectory(out, args, cfg, episodes, world)
    return 0


def _first_episode_estimates(args, cfg, episode, world) -> np.ndarray:
    rng = Rng(cfg["eval"]["seed"]).substream("traj")
    if args.method == "dnd":
        model, _ = load_model(args.checkpoint)
        model.n_samples = cfg["eval"]["n_samples"]
        return run_episode(model, episode, rng, pred_mode=args.pred_mode)
    if args.method == "kf-oracle":
        return OracleDiskKf(world).run(episode)
    if args.method == "kf-mismatched":
        flt = MismatchedDiskKf(world) if episode.task == DISK else MismatchedOdomEkf(world)
        return flt.run(episode)
    return DiskParticleFilter(world, cfg["eval"]["pf_particles"]).run(episode, rng)


def _dump_trajectory(out, args, cfg, episodes, world):
    ep = episodes[0]
    est = _first_episode_estimates(args, cfg, ep, world)
    t0 = start_frame(ep.task)
    dims = ["x", "y"] if ep.task == DISK else ["px", "py", "theta", "v", "w"]
    cols = ["t"] + [f"gt_{d}" for d in dims] + [f"est_{d}" for d in dims] + ["occluded"]
    rows = []
    for i, t in enumerate(range(t0, ep.seq_len + 1)):
        rows.append([t, *map(float, ep.states[t]), *map(float, est[i]),
                     int(ep.occluded[t - 1])])
    write_csv(out / "trajectory_ep0.csv", _meta_lines(cfg) + [f"task={ep.task}"],
              cols, rows)
    print(f"wrote {out / 'trajectory_ep0.csv'}")


def cmd_compare(args) -> int:
    cfg = _resolved(args)
    out = _out_dir(cfg)
    episodes, manifest, world = _load_eval_inputs(args, cfg)
    rng_root = Rng(cfg["eval"]["seed"])
    reports = []
    for path in args.checkpoint:
        model, meta = load_model(path)
        model.n_samples = cfg["eval"]["n_samples"]
        label = f"dnd:{Path(path).stem}"
        reports.append(evaluate_dnd(model, episodes, rng_root.substream("eval"),
                                    method=label))
    for name in args.baseline:
        reports.append(evaluate_baseline(name, episodes, world,
                                         rng_root.substream("eval"),
                                         pf_particles=cfg["eval"]["pf_particles"]))
    if not reports:
        raise UsageError("compare needs at least one --checkpoint or --baseline")
    key = reports[0].metric_names()[0]
    reports.sort(key=lambda r: r.mean(key))
    rows, lines = [], []
    for rank, rep in enumerate(reports, 1):
        row = [rank, rep.method]
        text = f"{rank:2d}. {rep.method:28s}"
        for name in rep.metric_names():
            row += [rep.mean(name), rep.std(name)]
            text += f"  {name}={rep.mean(name):.6g} +/- {rep.std(name):.6g}"
        rows.append(row)
        lines.append(text)
    cols = ["rank", "method"]
    for name in reports[0].metric_names():
        cols += [f"{name}_mean", f"{name}_std"]
    write_csv(out / "compare.csv", _meta_lines(cfg), cols, rows)
    (out / "compare.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_bench(args) -> int:
    cfg = _resolved(args)
    out = _out_dir(cfg)
    model, meta = load_model(args.checkpoint)
    if args.dataset:
        episodes, _ = read_dataset(args.dataset)
        episode = episodes[0]
    else:
        from .simulators import default_config, generate_episode
        episode = generate_episode(model.task, default_config(model.task), 7)
    k_list = args.k or [5, 10]
    rows = []
    for backend in kernels.backends():
        rows.extend(measure_throughput(model, episode, k_list,
                                       n_steps=args.steps, backend=backend))
    write_csv(out / "bench.csv", _meta_lines(cfg), ["k", "backend", "steps_per_sec"],
              [[r["k"], r["backend"], r["steps_per_sec"]] for r in rows])
    for r in rows:
        print(f"K={r['k']:4d} backend={r['backend']:9s} "
              f"{r['steps_per_sec']:.1f} steps/sec")
    return 0


def cmd_plot(args) -> int:
    cfg = _resolved(args)
    out = _out_dir(cfg)
    if not args.trajectory and not args.metrics:
        raise UsageError("plot needs --trajectory and/or --metrics")
    if args.trajectory:
        comments, cols, rows = read_csv(args.trajectory)
        if not rows:
            raise UsageError(f"{args.trajectory} has no data rows")
        data = np.array([[float(v) for v in r] for r in rows])
        dims = [c[3:] for c in cols if c.startswith("gt_")]
        gt = data[:, 1: 1 + len(dims)]
        est = data[:, 1 + len(dims): 1 + 2 * len(dims)]
        write_trajectory_svg(out / "trajectory.svg", data[:, 0], gt, est,
                             data[:, -1] > 0.5, dims,
                             f"trajectory | {'; '.join(comments)}")
        write_csv(out / "trajectory_data.csv", comments, cols, rows)
        print(f"wrote {out / 'trajectory.svg'}")
    if args.metrics:
        comments, cols, rows = read_csv(args.metrics)
        if not rows:
            raise UsageError(f"{args.metrics} has no data rows")
        curves: dict[str, list[float]] = {}
        for r in rows:
            rec = dict(zip(cols, r))
            for field in ("train_loss", "val_loss"):
                curves.setdefault(f"stage{rec['stage']}.{field}", []).append(
                    float(rec[field]))
        write_curves_svg(out / "curves.svg", curves, f"loss | {'; '.join(comments)}")
        write_csv(out / "curves_data.csv", comments, cols, rows)
        print(f"wrote {out / 'curves.svg'}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "gen-data": cmd_gen_data,
            "train": cmd_train,
            "eval": cmd_eval,
            "compare": cmd_compare,
            "bench": cmd_bench,
            "plot": cmd_plot,
        }[args.command]
        return handler(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
