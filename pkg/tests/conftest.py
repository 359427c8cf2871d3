import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from defogseg.config import RunConfig  # noqa: E402

torch.set_num_threads(1)


def tiny_config(**kw):
    """32x32 scenes, narrow nets and a few dozen steps: exercises every code path quickly."""
    base = dict(height=32, width=32, n_train=12, n_test=6, n_real=6, n_real_test=6,
                stage_channels=[8, 12, 16, 24], stem_channels=8,
                clean_steps=20, pretrain_steps=10, fdm_steps=6, finetune_steps=10,
                clean_batch=3, pretrain_batch=3, finetune_batch=3, eval_batch=6)
    base.update(kw)
    return RunConfig(**base).validate()


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_runner(tmp_path_factory):
    from defogseg.pipeline import Runner
    return Runner(tiny_config(), root=tmp_path_factory.mktemp("tiny_runs"))


# one PASS/FAIL line per acceptance criterion, filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
