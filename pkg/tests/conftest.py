import numpy as np
import pytest

from intquant.simtrain.data import make_bars, make_spiral
from intquant.simtrain.trainer import TrainConfig, cnn_spec, mlp_spec, train

# acceptance criterion id -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def trained_mlp():
    ds = make_spiral(1500, seed=0)
    return train(mlp_spec((32, 32), 3), ds, TrainConfig(steps=1500, quant_delay_steps=500, ema_decay=0.99))


@pytest.fixture(scope="session")
def trained_cnn():
    ds = make_bars(400, seed=0)
    return train(cnn_spec(4, 8), ds, TrainConfig(steps=200, quant_delay_steps=80, ema_decay=0.99))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[2:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key}: {'PASS' if ok else 'FAIL'}  {detail}")
