import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from wtaspike.model import ModelConfig, SpikingTransformer

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def tiny_config(**kw) -> ModelConfig:
    base = dict(vocab_size=11, d=16, layers=1, heads=2, time_steps=2, max_len=12,
                init_gain=8.0, embed_init=4.0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_decoder():
    return SpikingTransformer(tiny_config(), seed=7)


@pytest.fixture
def tiny_encoder():
    return SpikingTransformer(tiny_config(causal=False), seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@dataclass
class RunResult:
    out: Path
    final: dict        # last validation row of metrics.csv
    seconds: float


_runs: dict = {}
criterion_lines: list = []


def training_run(tmp_root: Path, overrides: str) -> RunResult:
    """Train through the CLI once per distinct override text and cache the result."""
    from wtaspike.cli import main

    if overrides not in _runs:
        out = tmp_root / f"run{len(_runs)}"
        out.mkdir(parents=True)
        cfg = out / "run.cfg"
        cfg.write_text(overrides)
        t0 = time.perf_counter()
        assert main(["train", "--config", str(cfg), "--out", str(out / "run")]) == 0
        seconds = time.perf_counter() - t0
        with open(out / "run" / "metrics.csv") as fh:
            rows = [r for r in csv.DictReader(fh) if r["split"] == "val"]
        final = {k: float(rows[-1][k]) for k in ("step", "loss", "ppl", "acc")}
        _runs[overrides] = RunResult(out / "run", final, seconds)
    return _runs[overrides]


@pytest.fixture(scope="session")
def run_training(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    return lambda overrides: training_run(root, overrides)


COPY_RUN = "task.name=copy\ntrain.steps=2000\ntrain.eval_interval=500\n"


@pytest.fixture(scope="session")
def trained_copy_run(run_training):
    """Default WD-mini trained on the copy task (shared by several slow tests)."""
    return run_training(COPY_RUN).out


@pytest.fixture
def criterion():
    """Record one acceptance PASS/FAIL line; all lines are repeated in the terminal summary."""
    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {detail}"
        criterion_lines.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(criterion_lines):
            terminalreporter.write_line(line)
