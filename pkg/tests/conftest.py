import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ppdlab.diffusion import Denoiser, ModelConfig, World, build_schedule

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def world():
    return World()


@pytest.fixture(scope="session")
def sched():
    return build_schedule(64)


@pytest.fixture
def small_model(sched):
    """Untrained denoiser whose adapter value projection is non-zero."""
    model = Denoiser.create(ModelConfig(), sched, seed=3)
    rng = np.random.default_rng(0)
    model.params["user_attn.wv"] = 0.3 * rng.standard_normal(model.params["user_attn.wv"].shape)
    return model


@pytest.fixture(scope="session")
def pretrained(world, sched):
    """A briefly pretrained text-only denoiser (read-only; copy before training)."""
    from ppdlab.diffusion import PretrainConfig, pretrain

    model = Denoiser.create(ModelConfig(), sched, seed=0)
    pretrain(model, world, sched, PretrainConfig(steps=300, batch=64, lr=3e-3))
    return model


class PresetRun:
    def __init__(self, name: str, root):
        import time

        from ppdlab.config import load_config
        from ppdlab.experiments import run_pipeline

        self.cfg = load_config(name)
        start = time.perf_counter()
        self.dir = run_pipeline(self.cfg, root / name)
        self.seconds = time.perf_counter() - start

    def csv(self, name):
        from ppdlab.experiments import read_csv

        return read_csv(self.dir / name)


@pytest.fixture(scope="session")
def multireward_run(tmp_path_factory):
    return PresetRun("multireward", tmp_path_factory.mktemp("preset"))


@pytest.fixture(scope="session")
def fewshot_run(tmp_path_factory):
    return PresetRun("fewshot", tmp_path_factory.mktemp("preset"))


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(criterion: str, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'} {criterion}: {detail}"
        print(line)
        lines.append(line)
        return passed

    return record


_VERDICTS = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def run_preset():
    return PresetRun
