import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from apl.raster import RasterImage

settings.register_profile(
    "apl", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("apl")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_image(rng, h, w) -> RasterImage:
    return RasterImage(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def record(n: int, ok: bool, detail: str) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
