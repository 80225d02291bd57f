import sys

import pytest

from tstlab.config import DataConfig, RunConfig, SuperpositionSpec, TrainPlan
from tstlab.data import synth_markov_corpus
from tstlab.model import ModelConfig


def tiny_config(s=2, r=0.5, steps=12, precision="double", **plan_kw) -> RunConfig:
    """A run small enough to train in well under a second."""
    plan = dict(total_steps=steps, batch_rows=2, base_length=8, peak_lr=3e-3, warmup_steps=2,
                precision=precision, eval_windows=4, seed=0)
    plan.update(plan_kw)
    return RunConfig(
        model=ModelConfig(vocab_size=12, d_model=16, n_layers=1, n_heads=2, d_ff=32, max_len=32),
        plan=TrainPlan(**plan),
        spec=SuperpositionSpec(s=s, r=r),
        data=DataConfig(order=2, vocab=12, length=20_000, seed=1),
    )


@pytest.fixture
def tiny_cfg():
    return tiny_config


@pytest.fixture(scope="session")
def tiny_corpus():
    return synth_markov_corpus(2, 12, 20_000, seed=1).split(0.05)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
