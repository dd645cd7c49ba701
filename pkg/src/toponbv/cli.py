"""``toponbv`` command line: capture, precompute, merge, betti, train, eval, nbv, heatmap."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .agent import load_model, predict_nbv, save_model, train
from .config import RunConfig, load_config
from .env import (BettiCache, Dataset, MissingCacheEntryError, _Worker, build_observation,
                  env_step, precompute_cache)
from .geometry import angular_difference, read_ply, write_ply
from .metric import MetricConfig, view_value
from .pipeline import angle_table, evaluate, object_data
from .plotting import plot_heatmap, plot_learning_curve
from .registration import tur_merge
from .sensor_sim import generate_dataset, make_object
from .tda import filtration_profile

log = logging.getLogger("toponbv")


class CliError(Exception):
    pass


# ----------------------------------------------------------------- output

def _emit(args, record, rows: Optional[list] = None, columns: Optional[list] = None) -> None:
    """JSON with ``--json``; otherwise ``key,value`` lines and an optional CSV table."""
    out = sys.stdout
    if args.json:
        payload = dict(record)
        if rows is not None:
            payload["rows"] = rows
        out.write(json.dumps(payload, sort_keys=True) + "\n")
        return
    w = csv.writer(out, lineterminator="\n")
    for k, v in record.items():
        w.writerow([k, v])
    if rows:
        cols = columns or list(rows[0])
        out.write("\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] for c in cols])


# ------------------------------------------------------------------ setup

def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.output_dir is not None:
        cfg = replace(cfg, output_dir=args.output_dir)
    return cfg


def _object_spec(cfg: RunConfig, name: str) -> dict:
    try:
        return cfg.object(name)
    except KeyError:
        # a bare kind name works without a config entry
        return {"name": name, "kind": name, "params": {}, "role": "test"}


def _dataset_path(args, cfg: RunConfig, name: Optional[str]) -> Path:
    if getattr(args, "dataset", None):
        return Path(args.dataset)
    if name is None:
        raise CliError("give an object name or --dataset")
    return cfg.dataset_dir(name)


def _cache_path(args, cfg: RunConfig, ds: Dataset) -> Path:
    if getattr(args, "cache", None):
        return Path(args.cache)
    if getattr(args, "dataset", None):
        return Path(args.dataset) / "cache.jsonl"
    return cfg.cache_path(ds.name)


def _load_cache(path: Path) -> BettiCache:
    if not path.exists():
        raise CliError(f"cache {path} not found; run `toponbv precompute` first")
    return BettiCache.load(path)


# ---------------------------------------------------------------- commands

def cmd_capture(args, cfg: RunConfig) -> None:
    spec = _object_spec(cfg, args.object)
    mesh = make_object(spec["kind"], **spec.get("params", {}))
    out = Path(args.out) if args.out else cfg.dataset_dir(spec["name"])
    seed = args.seed if args.seed is not None else 0
    manifest = generate_dataset(mesh, cfg.action_space, cfg.sensor, seed, out, spec["name"],
                                cfg.orbit_radius, args.jobs, spec)
    _emit(args, {"manifest": str(out / "manifest.json"), "object": spec["name"],
                 "views": len(manifest["views"]),
                 "mean_points": float(np.mean([v["points"] for v in manifest["views"]]))})


def cmd_precompute(args, cfg: RunConfig) -> None:
    ds_path = _dataset_path(args, cfg, args.object)
    ds = Dataset.load(ds_path)
    cache_path = _cache_path(args, cfg, ds)
    cache_path.parent.mkdir(parents=True, exist_ok=True)
    icp = None if args.no_icp else cfg.icp
    cache = precompute_cache(ds_path, cfg.metric, icp, cache_path, cfg.union_voxel, args.jobs,
                             pairs=not args.singles_only)
    _emit(args, {"cache": str(cache_path), "object": ds.name,
                 "singles": len(cache.singles), "pairs": len(cache.pairs)})


def cmd_merge(args, cfg: RunConfig) -> None:
    ds = Dataset.load(_dataset_path(args, cfg, args.object))
    views = [(ds.cloud(v), ds.poses[v]) for v in args.views]
    icp = None if args.no_icp else cfg.icp
    merged = tur_merge(views, ds.orbit_radius, icp, cfg.union_voxel)
    record = {"object": ds.name, "views": " ".join(map(str, args.views)), "points": len(merged)}
    if args.out:
        write_ply(args.out, merged)
        record["ply"] = args.out
    prof = filtration_profile(merged, cfg.metric.radii)
    record["value"] = view_value(prof, cfg.metric)
    _emit(args, record, _profile_rows(prof))


def _profile_rows(prof) -> list:
    return [{"radius": r, "betti0": b0, "betti1": b1}
            for r, b0, b1 in zip(prof.radii, prof.betti0, prof.betti1)]


def cmd_betti(args, cfg: RunConfig) -> None:
    metric = cfg.metric
    if args.radii:
        metric = MetricConfig(metric.alpha, tuple(args.radii))
    cloud = read_ply(args.ply)
    prof = filtration_profile(cloud, metric.radii)
    _emit(args, {"ply": args.ply, "points": len(cloud), "alpha": metric.alpha,
                 "value": view_value(prof, metric)}, _profile_rows(prof))


def cmd_train(args, cfg: RunConfig) -> None:
    tc = cfg.train
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    if args.cycles is not None:
        tc = replace(tc, cycles=args.cycles)
    names = args.objects or [o["name"] for o in cfg.objects_with_role("train")]
    caches = {n: _load_cache(cfg.cache_path(n)) for n in names}
    objects = [object_data(caches[n], cfg.action_space, n) for n in names]

    def label_check(obj, view, labels):
        cache = caches[names[obj]]
        rng = np.random.default_rng(view)
        for a in rng.choice(len(labels), 5, replace=False):
            if labels[a] != env_step(view, int(a), cache):
                raise CliError(f"label mismatch for {names[obj]} view {view} action {a}")

    net, curve = train(objects, tc, label_check)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_path = Path(args.model) if args.model else out_dir / "model.json"
    curve_path = Path(args.curve) if args.curve else out_dir / "learning_curve.csv"
    baseline = float(np.mean([o.rewards.mean() for o in objects]))
    save_model(net, model_path, {"objects": names, "train": tc.to_dict(),
                                 "metric": cfg.metric.to_dict(),
                                 "action_space": cfg.action_space.to_dict(),
                                 "random_policy_reward": baseline})
    curve.write_csv(curve_path)
    png = curve_path.with_suffix(".png")
    plot_learning_curve(curve.test_rewards, png, baseline,
                        [c.mean_train_reward for c in curve.cycles])
    final = curve.test_rewards[-1] if curve.cycles else float("nan")
    _emit(args, {"model": str(model_path), "curve": str(curve_path), "plot": str(png),
                 "cycles": len(curve.cycles), "final_test_reward": final,
                 "random_policy_reward": baseline},
          [{"cycle": c.cycle, "epsilon": c.epsilon, "train_loss": c.mean_train_loss,
            "test_reward": c.mean_test_reward} for c in curve.cycles])


def _model(args):
    try:
        return load_model(args.model)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def cmd_eval(args, cfg: RunConfig) -> None:
    net, _ = _model(args)
    names = args.objects or [o["name"] for o in cfg.objects]
    angles = angle_table(cfg.action_space)
    rows = []
    for n in names:
        cache = _load_cache(cfg.cache_path(n))
        full = len(cache.pairs) > 0
        data = object_data(cache, cfg.action_space, n, with_rewards=full)
        rows.append(evaluate(net, data, cfg.action_space, angles).to_dict())
    _emit(args, {"model": args.model, "objects": len(rows)}, rows)


def _initial(args, cfg: RunConfig):
    space = cfg.action_space
    try:
        action = space.index(args.yaw, args.pitch)
    except IndexError as exc:
        raise CliError(str(exc)) from exc
    ds_path = _dataset_path(args, cfg, args.object)
    ds = Dataset.load(ds_path)
    cache_path = _cache_path(args, cfg, ds)
    cache = BettiCache.load(cache_path) if cache_path.exists() else None
    if cache is not None and action in cache.singles:
        prof = cache.single_profile(action)
    else:
        prof = filtration_profile(_Worker(ds.root / "manifest.json", cfg.metric, cfg.icp,
                                          cfg.union_voxel).merged(action), cfg.metric.radii)
    obs = build_observation(prof, space.pose(action), space)
    return ds, action, obs, cache


def cmd_nbv(args, cfg: RunConfig) -> None:
    net, _ = _model(args)
    space = cfg.action_space
    ds, initial, obs, cache = _initial(args, cfg)
    best, values = predict_nbv(net, obs)
    yb, pb = space.decompose(best)
    record = {"object": ds.name, "initial_action": initial, "initial_yaw_bucket": args.yaw,
              "initial_pitch_bucket": args.pitch, "nbv_action": best, "nbv_yaw_bucket": yb,
              "nbv_pitch_bucket": pb, "predicted_reward": float(values[best]),
              "angle_deg": angular_difference(space.pose(initial), space.pose(best))}
    if cache is not None:
        try:
            true = [env_step(initial, a, cache) for a in range(space.action_count)]
        except MissingCacheEntryError:
            true = None
        if true is not None:
            record["true_reward"] = true[best]
            record["best_action"] = int(np.argmax(true))
            record["best_reward"] = max(true)
            record["regret"] = max(true) - true[best]
    _emit(args, record)


def _write_pgm(path: Path, grid: np.ndarray) -> None:
    lo, hi = float(grid.min()), float(grid.max())
    if hi > lo:
        levels = np.rint((grid - lo) / (hi - lo) * 255.0).astype(int)
    else:
        levels = np.zeros(grid.shape, dtype=int)
    lines = ["P2", f"{grid.shape[1]} {grid.shape[0]}", "255"]
    lines += [" ".join(str(v) for v in row) for row in levels]
    path.write_text("\n".join(lines) + "\n")


def cmd_heatmap(args, cfg: RunConfig) -> None:
    net, _ = _model(args)
    space = cfg.action_space
    ds, initial, obs, _ = _initial(args, cfg)
    best, values = predict_nbv(net, obs)
    grid = values.reshape(space.yaw_buckets, space.pitch_buckets)
    default = Path(cfg.output_dir) / "heatmaps" / f"{ds.name}_y{args.yaw}_p{args.pitch}"
    prefix = Path(args.out) if args.out else default
    prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path, pgm_path = prefix.with_suffix(".csv"), prefix.with_suffix(".pgm")
    png_path, json_path = prefix.with_suffix(".png"), prefix.with_suffix(".json")
    with open(csv_path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows([[repr(float(v)) for v in row] for row in grid])
    _write_pgm(pgm_path, grid)
    yb, pb = space.decompose(best)
    plot_heatmap(grid, png_path, (args.yaw, args.pitch), (yb, pb), f"{ds.name}: predicted reward")
    side = {"object": ds.name, "model": args.model,
            "initial": {"action": initial, "yaw_bucket": args.yaw, "pitch_bucket": args.pitch},
            "argmax": {"action": best, "yaw_bucket": yb, "pitch_bucket": pb},
            "min": float(grid.min()), "max": float(grid.max()),
            "rows": "yaw_bucket", "columns": "pitch_bucket",
            "csv": csv_path.name, "pgm": pgm_path.name, "png": png_path.name}
    json_path.write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    _emit(args, {"csv": str(csv_path), "pgm": str(pgm_path), "png": str(png_path),
                 "sidecar": str(json_path), "nbv_action": best})


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    def global_options(suppress: bool) -> argparse.ArgumentParser:
        # subcommands repeat the global flags; SUPPRESS keeps them from
        # overwriting values given before the subcommand
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--config", default=d(None), help="run configuration JSON")
        g.add_argument("--output-dir", default=d(None), help="override the config's output directory")
        g.add_argument("--seed", type=int, default=d(None), help="seed for capture and training")
        g.add_argument("--jobs", type=int, default=d(1), help="worker processes for capture/precompute")
        g.add_argument("--json", action="store_true", default=d(False), help="machine-readable JSON output")
        g.add_argument("-v", "--verbose", action="store_true", default=d(False))
        return g

    common = global_options(True)
    p = argparse.ArgumentParser(prog="toponbv", parents=[global_options(False)],
                                description="Topology-driven next-best-view planning at desk scale.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(func=func)
        return sp

    sp = add("capture", cmd_capture, "simulate one depth view per action cell")
    sp.add_argument("object", help="object name from the config, or a bare object kind")
    sp.add_argument("--out", help="dataset directory")

    sp = add("precompute", cmd_precompute, "build the single/pair Betti cache")
    sp.add_argument("object", nargs="?")
    sp.add_argument("--dataset")
    sp.add_argument("--cache")
    sp.add_argument("--no-icp", action="store_true", help="transform-only unions")
    sp.add_argument("--singles-only", action="store_true")

    sp = add("merge", cmd_merge, "TUR-merge selected views into one cloud")
    sp.add_argument("object", nargs="?")
    sp.add_argument("--dataset")
    sp.add_argument("--views", type=int, nargs="+", required=True)
    sp.add_argument("--out", help="merged PLY path")
    sp.add_argument("--no-icp", action="store_true")

    sp = add("betti", cmd_betti, "filtration profile and value of a PLY cloud")
    sp.add_argument("ply")
    sp.add_argument("--radii", type=float, nargs="+")

    sp = add("train", cmd_train, "train the action-value network from caches")
    sp.add_argument("--objects", nargs="+")
    sp.add_argument("--cycles", type=int)
    sp.add_argument("--model")
    sp.add_argument("--curve")

    sp = add("eval", cmd_eval, "score greedy NBVs for every initial view")
    sp.add_argument("--model", required=True)
    sp.add_argument("--objects", nargs="+")

    for name, func, help_ in (("nbv", cmd_nbv, "predict the NBV for one initial view"),
                              ("heatmap", cmd_heatmap, "export the predicted-reward grid")):
        sp = add(name, func, help_)
        sp.add_argument("object", nargs="?")
        sp.add_argument("--dataset")
        sp.add_argument("--cache")
        sp.add_argument("--model", required=True)
        sp.add_argument("--yaw", type=int, required=True, help="initial yaw bucket")
        sp.add_argument("--pitch", type=int, required=True, help="initial pitch bucket")
        if name == "heatmap":
            sp.add_argument("--out", help="output path prefix")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except (CliError, OSError, ValueError, KeyError, RuntimeError) as exc:
        msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        print(f"toponbv {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
