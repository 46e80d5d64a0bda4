import numpy as np
import pytest

from stackedfan.nn import FanConfig, HourglassConfig, StemConfig, init_params

# 1 stack, depth 1, width 8, 2 landmarks, 16x16 input, 4x4 heatmaps.
MINI_FAN = FanConfig(
    n_stacks=1,
    m_landmarks=2,
    heatmap_hw=(4, 4),
    hourglass=HourglassConfig(depth=1, width=8, block="hpm"),
    stem=StemConfig(conv_channels=4, mid_channels=8, kernel=7, stride=2, pool=True),
)
MINI_FAN_PARAM_COUNT = 3186


@pytest.fixture
def mini_params():
    return init_params(MINI_FAN, seed=0)


@pytest.fixture
def mini_params64():
    return init_params(MINI_FAN, seed=0, dtype=np.float64)


# (criterion, passed, detail) rows appended by test_acceptance.py
ACCEPTANCE: list[tuple[int, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
