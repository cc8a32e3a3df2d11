import numpy as np
import pytest

from gazeintent.dataio import GazeTrace, Track, Trial
from gazeintent.synthgen import GeneratorConfig, draw_profiles, generate_dataset


def make_trial(
    n=600,
    instruction_end_t=1.0,
    intent="inspection",
    target="cup",
    bbox=(100.0, 100.0, 200.0, 180.0),
    det_times=None,
    trial_id="T0",
    subject_id="S01",
    xy=None,
    valid=None,
):
    """Hand-built trial with a static target box observed at 30 Hz."""
    t = np.arange(n) / 120.0
    if xy is None:
        xy = np.column_stack([150.0 + 10 * np.sin(t), 140.0 + 5 * np.cos(t)])
    valid = np.ones(n, bool) if valid is None else np.asarray(valid, bool)
    xy = np.where(valid[:, None], xy, 0.0)
    det_times = np.arange(0.0, t[-1], 1 / 30.0) if det_times is None else np.asarray(det_times, float)
    tracks = {target: Track(target, det_times, np.tile(bbox, (len(det_times), 1)))}
    return Trial(
        trial_id=trial_id,
        subject_id=subject_id,
        intent=intent,
        target_label=target,
        instruction_end_t=instruction_end_t,
        gaze=GazeTrace(t, xy[:, 0], xy[:, 1], valid),
        tracks=tracks,
        frame_size=(1280, 960),
        manipulation_kind="physical" if intent == "manipulation" else None,
    )


@pytest.fixture
def trial():
    return make_trial()


@pytest.fixture(scope="session")
def small_config():
    return GeneratorConfig(n_subjects=2, trials_per_subject=10, rng_seed=3)


@pytest.fixture(scope="session")
def small_dataset(small_config):
    return generate_dataset(small_config)


@pytest.fixture(scope="session")
def profile():
    return draw_profiles(GeneratorConfig())[0]


# one-line acceptance verdicts, printed after the test session
_VERDICTS: list[str] = []


def record_verdict(line: str) -> None:
    _VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
