import functools

import pytest
import torch

from faultguard.dataset import synth_dataset
from faultguard.predictor import PredictorConfig, init_model, train_online_adversarial, train_standard

torch.set_num_threads(1)

DESK = dict(hidden_size=64, n_classes=4, epochs=80)


@functools.lru_cache(maxsize=None)
def synth(seed: int):
    return synth_dataset(4, 400, 3.0, seed=seed)


@functools.lru_cache(maxsize=None)
def trained(seed: int, oat: bool = False, oat_epochs: int = 60):
    """Desk-scale predictor on the seed's synthetic split, cached for the whole session."""
    cfg = PredictorConfig(seed=seed, **{**DESK, **({"epochs": oat_epochs} if oat else {})})
    model = init_model(cfg)
    (train_online_adversarial if oat else train_standard)(model, synth(seed), cfg)
    return model


@pytest.fixture(scope="session")
def synth0():
    return synth(0)


@pytest.fixture(scope="session")
def model0():
    return trained(0)


def tiny_config(**kw):
    """Seconds-scale pipeline config: every stage runs, nothing is trained to convergence."""
    from faultguard.harness import ExperimentConfig

    base = dict(predictor={"hidden_size": 8, "epochs": 2}, oat_epochs=1, ads={"epochs": 1},
                graybox={"epochs": 1, "n_batches": 20}, attack_params={"cw_steps": 3}, seeds=[0],
                dataset={"source": "synthetic", "n_classes": 4, "n_windows": 120, "separation": 3.0})
    return ExperimentConfig(**{**base, **kw})


ACCEPTANCE: dict = {}


def record_criterion(number: int, ok: bool, detail: str, seconds: float) -> str:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({seconds:.1f}s) {detail}"
    ACCEPTANCE[number] = line
    print(line, flush=True)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
