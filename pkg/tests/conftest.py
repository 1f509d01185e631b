import time

import pytest

from diffpark.config import RunConfig
from diffpark.forward import collect, reverse_dataset
from diffpark.predictor import train

_REPORT: list[str] = []


def report(criterion: int, ok: bool, detail: str) -> None:
    """Record one acceptance line; all of them are printed again at the end of the session."""
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    _REPORT.append(line)


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_REPORT):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def trained():
    """Seeded scenario-1 dataset (default collection size, about 5k transitions) and a
    predictor trained on it with the default settings, shared across the suite."""
    cfg = RunConfig()
    t0 = time.perf_counter()
    data = collect(cfg.lot, cfg.schedule, cfg.collect.n_trials, cfg.seed, cfg.dynamics, cfg.noise,
                   cfg.collect.max_steps)
    p, history, held_out = train(reverse_dataset(data, cfg.run.reversal_heading), cfg.train, cfg.dynamics)
    return {
        "config": cfg,
        "data": data,
        "params": p,
        "history": history,
        "held_out": held_out,
        "seconds": time.perf_counter() - t0,
    }
