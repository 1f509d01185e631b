"""Command-line entry point: collect, train, run and eval."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig, load_config
from .errors import CollectionError, ConfigError, DomainError, SchemaError, TrainingError, UsageError
from .forward import collect, load_dataset, reverse_dataset, rollback_arrays, save_dataset, termination_histogram
from .planner import EpisodeResult, run_episode, write_summary_json, write_trace_csv
from .plot import write_svg
from .predictor import evaluate, load_model, save_model, train
from .world import build_world

log = logging.getLogger("diffpark")

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _reversed(data, heading: str):
    return data if data.meta.get("reversed") else reverse_dataset(data, heading)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def cmd_collect(args) -> int:
    cfg = _config(args)
    data = collect(cfg.lot, cfg.schedule, cfg.collect.n_trials, cfg.seed, cfg.dynamics, cfg.noise,
                   cfg.collect.max_steps, args.threads)
    save_dataset(data, args.out)
    print(f"trials: {cfg.collect.n_trials}")
    print(f"terminations: {json.dumps(termination_histogram(data), sort_keys=True)}")
    print(f"records: {len(data)}")
    return EXIT_OK


def _side_paths(out: Path) -> tuple[Path, Path]:
    stem = out.with_suffix("")
    return Path(f"{stem}.history.csv"), Path(f"{stem}.metrics.json")


def cmd_train(args) -> int:
    cfg = _config(args)
    data = _reversed(load_dataset(args.data), cfg.run.reversal_heading)
    tcfg = replace(cfg.train, seed=cfg.seed)
    p, history, held_out = train(data, tcfg, cfg.dynamics)
    S, G, T = rollback_arrays(held_out)
    metrics = evaluate(p, S, G, T, cfg.dynamics, np.random.default_rng(cfg.seed), cfg.seed)
    out = Path(args.out)
    save_model(out, p, cfg.dynamics, tcfg, {"reversal_heading": cfg.run.reversal_heading})
    hist_path, metrics_path = _side_paths(out)
    with open(hist_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("epoch", "train_loss", "val_loss", "train_mse", "val_mse"))
        for e in history:
            writer.writerow((e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.train_mse), repr(e.val_mse)))
    metrics_path.write_text(_dump(metrics))
    sys.stdout.write(_dump(metrics))
    return EXIT_OK


def _episode(cfg: RunConfig, p, dyn, seed: int) -> tuple:
    rng = np.random.default_rng(seed)
    world = build_world(cfg.lot, rng, mode="control", dynamics=dyn, max_steps=cfg.planner.max_steps)
    result = run_episode(world, p, cfg.planner, cfg.preferences, cfg.tolerance, rng, dyn, cfg.noise, seed)
    return world, result


def aggregate(results: Sequence[EpisodeResult]) -> dict:
    n = len(results)
    outcomes = [r.outcome for r in results]
    return {
        "episodes": n,
        "success_rate": outcomes.count("parked") / n,
        "collision_rate": outcomes.count("collision") / n,
        "timeout_rate": outcomes.count("timeout") / n,
        "mean_steps": float(np.mean([r.steps for r in results])),
        "seeds": [r.seed for r in results],
        "outcomes": outcomes,
    }


def cmd_run(args) -> int:
    cfg = _config(args)
    p, dyn = load_model(args.model)
    if dyn != cfg.dynamics:
        raise SchemaError("model was trained with different dynamics parameters than the config")
    episodes = args.episodes if args.episodes is not None else cfg.run.episodes
    if episodes < 1:
        raise ConfigError("--episodes must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [cfg.seed + e for e in range(episodes)]
    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            runs = list(pool.map(lambda s: _episode(cfg, p, dyn, s), seeds))
    else:
        runs = [_episode(cfg, p, dyn, s) for s in seeds]
    for e, (world, result) in enumerate(runs):
        stem = out / f"episode_{e:03d}"
        write_trace_csv(result, f"{stem}.csv")
        write_summary_json(result, f"{stem}.json")
        write_svg(f"{stem}.svg", world, result, dyn, f"seed {result.seed}: {result.outcome} after {result.steps} steps")
    summary = aggregate([r for _, r in runs])
    (out / "summary.json").write_text(_dump(summary))
    print(f"success_rate: {summary['success_rate']:.3f}")
    print(f"collision_rate: {summary['collision_rate']:.3f}")
    print(f"mean_steps: {summary['mean_steps']:.1f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    p, dyn = load_model(args.model)
    with open(args.model) as fh:
        heading = json.load(fh).get("reversal_heading", "keep")
    data = _reversed(load_dataset(args.data), heading)
    S, G, T = rollback_arrays(data)
    seed = args.seed if args.seed is not None else 0
    metrics = evaluate(p, S, G, T, dyn, np.random.default_rng(seed), seed)
    sys.stdout.write(_dump(metrics))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffpark", description="Diffusion-trained parking predictor and planner.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed; overrides the config value")
    common.add_argument("--threads", type=int, default=1, help="worker threads (1 = sequential reference run)")
    sub = parser.add_subparsers(dest="command", required=True)

    c = sub.add_parser("collect", parents=[common], help="run forward-diffusion trials and write a dataset")
    c.add_argument("--config")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_collect)

    t = sub.add_parser("train", parents=[common], help="train the motion predictor on a dataset")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="model file; loss history and metrics are written next to it")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("run", parents=[common], help="run seeded control episodes with a trained model")
    r.add_argument("--config")
    r.add_argument("--model", required=True)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--episodes", type=int, default=None)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", parents=[common], help="print predictor metrics on a dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingError, DomainError, CollectionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
