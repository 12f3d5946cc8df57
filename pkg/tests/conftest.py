import numpy as np
import pytest

from model_tailor.scenario import load_scenario
from model_tailor.tailor import tailor_model
from model_tailor.toymodel import capture_activations, init_model, train


class ScenarioRun:
    """Trained artifacts for one scenario config, shared across tests."""

    def __init__(self, name):
        self.cfg = load_scenario(name)
        self.datasets = self.cfg.datasets()
        self.base = init_model(self.cfg.spec())
        self.pre = train(self.base, self.datasets[self.cfg.origin_task], self.cfg.pretrain).checkpoint
        self.sft = {}
        self.calib = {}
        for task in self.cfg.target_tasks:
            res = train(self.pre, self.datasets[task], self.cfg.finetune)
            self.sft[task] = res.checkpoint
            self.calib[task] = capture_activations(res.checkpoint, self.datasets[task], self.cfg.calib_samples)

    def tailored(self, task, **kwargs):
        return tailor_model(self.pre, self.sft[task], self.calib[task], self.cfg.fusion, **kwargs)


@pytest.fixture(scope="session")
def default_run():
    return ScenarioRun("default")


@pytest.fixture(scope="session")
def multitask_run():
    return ScenarioRun("multitask")


@pytest.fixture(scope="session")
def default_fusion(default_run):
    task = default_run.cfg.target_tasks[0]
    fused, patch = default_run.tailored(task)
    return fused, patch


def random_spd(rng, n, scale=1.0):
    a = rng.normal(size=(n, n))
    return a @ a.T + scale * np.eye(n)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
