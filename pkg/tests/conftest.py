import numpy as np
import pytest

from copper_rating.config import GeneratorConfig, RunConfig, TrainConfig


def tiny_generator(**kw) -> GeneratorConfig:
    base = dict(image_size=(32, 32), n_stirs=2, granule_radius=(2.0, 4.0))
    base.update(kw)
    return GeneratorConfig(**base)


def tiny_run_config(**train_kw) -> RunConfig:
    train = dict(seg_epochs=1, area_epochs=1, mass_epochs=1, seg_width=8)
    train.update(train_kw)
    return RunConfig(generator=tiny_generator(), train=TrainConfig(**train), num_samples=11, group_size=1)


@pytest.fixture
def tiny_gen():
    return tiny_generator()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    from copper_rating.scene_sim.dataset import generate_dataset

    out = tmp_path_factory.mktemp("tiny") / "data"
    generate_dataset(tiny_run_config(), out)
    return out


# acceptance criteria report one line each; printed again at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
