"""Compare planner variants on seeded control episodes with one trained model.

Variants: the default planner (route-following and predictor candidates scored together),
the predictor-only planner, and the default planner with other cars held static in rollouts.
"""
import argparse
import json
import time
from dataclasses import replace

import numpy as np

from diffpark.config import RunConfig, load_config
from diffpark.planner import run_episode
from diffpark.predictor import load_model
from diffpark.world import build_world, scenario_1, scenario_2

VARIANTS = {
    "default": {},
    "predictor_only": {"use_route": False},
    "static_others": {"others_motion": "static", "hazard_margin": 0.0},
}


def evaluate(cfg: RunConfig, lot, p, dyn, seeds) -> dict:
    outcomes, steps = [], []
    t0 = time.perf_counter()
    for seed in seeds:
        rng = np.random.default_rng(seed)
        world = build_world(lot, rng, mode="control", dynamics=dyn, max_steps=cfg.planner.max_steps)
        res = run_episode(world, p, cfg.planner, cfg.preferences, cfg.tolerance, rng, dyn, cfg.noise, seed)
        outcomes.append(res.outcome)
        steps.append(res.steps)
    n = len(outcomes)
    return {
        "success_rate": outcomes.count("parked") / n,
        "collision_rate": outcomes.count("collision") / n,
        "timeout_rate": outcomes.count("timeout") / n,
        "mean_steps": float(np.mean(steps)),
        "seconds": round(time.perf_counter() - t0, 1),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", required=True)
    ap.add_argument("--config")
    ap.add_argument("--scenario", choices=("1", "2"), default="1")
    ap.add_argument("--episodes", type=int, default=50)
    ap.add_argument("--variants", nargs="*", default=list(VARIANTS))
    args = ap.parse_args()
    base = load_config(args.config) if args.config else RunConfig()
    p, dyn = load_model(args.model)
    lot = scenario_1() if args.scenario == "1" else scenario_2()
    for name in args.variants:
        cfg = replace(base, planner=replace(base.planner, **VARIANTS[name]))
        row = evaluate(cfg, lot, p, dyn, range(base.seed, base.seed + args.episodes))
        print(json.dumps({"variant": name, "scenario": args.scenario, **row}), flush=True)


if __name__ == "__main__":
    main()
