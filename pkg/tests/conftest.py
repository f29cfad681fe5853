import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from videolayers.evalsynth import SceneSpec, Shadow, Sprite, synth_scene

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_spec() -> SceneSpec:
    return SceneSpec(
        width=40,
        height=28,
        frames=5,
        camera_velocity=(1.0, 0.0),
        sprites=[Sprite(size=(4.0, 4.0), start=(10.0, 10.0), velocity=(2.0, 1.0), shadow=Shadow(offset=(3.0, 5.0), axes=(5.0, 2.0)))],
    )


@pytest.fixture(scope="session")
def small_scene(small_spec):
    return synth_scene(small_spec, seed=3)


# one PASS/FAIL line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion(request):
    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {n}: {detail}")
