"""Run collect, train, run and eval end to end with one config and report wall times."""
import argparse
import sys
import time
from pathlib import Path

from diffpark.cli import main


def run(step: str, argv: list[str]) -> float:
    t0 = time.perf_counter()
    code = main(argv)
    secs = time.perf_counter() - t0
    print(f"[{step}] exit {code} in {secs:.1f}s", file=sys.stderr)
    if code:
        sys.exit(code)
    return secs


def cli() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "default.config"))
    ap.add_argument("--out", default="pipeline_out")
    ap.add_argument("--seed", default="0")
    ap.add_argument("--episodes", default="5")
    ap.add_argument("--threads", default="1")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data, model = str(out / "data.jsonl"), str(out / "model.json")
    common = ["--seed", args.seed, "--threads", args.threads]
    total = run("collect", ["collect", "--config", args.config, "--out", data, *common])
    total += run("train", ["train", "--config", args.config, "--data", data, "--out", model, *common])
    total += run("run", ["run", "--config", args.config, "--model", model, "--out", str(out / "episodes"),
                         "--episodes", args.episodes, *common])
    total += run("eval", ["eval", "--model", model, "--data", data, "--seed", args.seed])
    print(f"[pipeline] {total:.1f}s", file=sys.stderr)


if __name__ == "__main__":
    cli()
