import numpy as np
import pytest
import torch

from idm.datagen import SceneSpec, generate_source
from idm.model import Arch, init_model


@pytest.fixture
def tiny_arch():
    return Arch(in_channels=3, widths=(4, 6, 8), feature_dim=5, num_classes=4)


@pytest.fixture
def tiny_model(tiny_arch):
    return init_model(tiny_arch, seed=3, dtype=torch.float64)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_source(SceneSpec(width=24, height=24, num_classes=4, shapes_per_image=4, rng_seed=11), 12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria lines, repeated in the terminal summary


def pytest_configure(config):
    config.acceptance_lines = []
    config.benchmark_lines = []


@pytest.fixture
def criterion(request):
    lines = request.config.acceptance_lines

    def report(n: int, title: str, ok: bool, detail: str) -> None:
        line = f"[criterion {n:>2}] {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        lines.append(line)
        print("\n" + line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    runs = getattr(config, "benchmark_lines", [])
    if runs:
        terminalreporter.section("synthetic benchmark runs (target mIoU by iteration)")
        for line in runs:
            terminalreporter.write_line(line)
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
