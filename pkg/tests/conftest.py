import os

import pytest
import torch
from hypothesis import HealthCheck, settings

from collatz_lab.model import ModelConfig
from collatz_lab.train import TrainConfig, train_loop

torch.set_num_threads(int(os.environ.get("COLLATZ_TEST_THREADS", "1")))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return ModelConfig(base=10, d_model=16, n_heads=2, d_ff=32, n_enc_layers=2, n_dec_layers=2)


@pytest.fixture
def tiny_train() -> TrainConfig:
    return TrainConfig(range_lo=1, range_hi=300, eval_size=60, steps=12, batch_size=16, lr=1e-3, warmup=4,
                       eval_every=4, ckpt_every=4)


@pytest.fixture(scope="session")
def trained_toy():
    """A briefly trained toy model shared by read-only tests."""
    m = ModelConfig(base=10, d_model=32, n_heads=2, d_ff=64, n_enc_layers=2, n_dec_layers=1)
    t = TrainConfig(range_lo=1, range_hi=400, eval_size=80, steps=150, batch_size=32, lr=2e-3, warmup=20,
                    eval_every=50, ckpt_every=50)
    return m, t, train_loop(m, t)


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record and print one PASS/FAIL line per acceptance criterion."""

    def record(number: int, ok: bool, detail: str = "") -> bool:
        _ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
