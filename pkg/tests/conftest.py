import numpy as np
import pytest

from imaformer.episode import SyntheticSpec, generate_synthetic
from imaformer.vit import ModelConfig, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_config():
    return ModelConfig.micro()


@pytest.fixture
def micro_params(micro_config):
    return init_params(micro_config, seed=7)


@pytest.fixture(scope="session")
def small_dataset():
    spec = SyntheticSpec(classes=12, images_per_class=12, image_size=8, patch_size=4,
                         signature_patches=1, distractors=1, seed=3)
    return generate_synthetic(spec)


def random_images(rng, n, config):
    return rng.random((n, config.channels, config.image_size, config.image_size))


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, passed: bool, detail: str) -> str:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
