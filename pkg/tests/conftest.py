import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for oracles.py

from maskgan.data import SynthConfig, mix_at_snr, noise_signal, speech_proxy, synthesize_corpus
from maskgan.signal import AudioSignal


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_speech(duration=1.5, sample_rate=16000, seed=0):
    return AudioSignal(
        speech_proxy(duration, sample_rate, np.random.default_rng(seed)), sample_rate
    )


def make_noisy_pair(snr_db, duration=1.5, seed=0, kind="white"):
    rng = np.random.default_rng(seed)
    clean = AudioSignal(speech_proxy(duration, 16000, rng))
    noise = AudioSignal(noise_signal(kind, len(clean), 16000, rng))
    mix = mix_at_snr(clean, noise, snr_db)
    return mix.noisy, mix.clean


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small deterministic corpus shared by training/eval tests."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    cfg = SynthConfig(
        n_pairs=10,
        duration_range=(0.7, 1.0),
        snr_grid=(-10.0, -5.0, 0.0, 5.0),
        seed=42,
    )
    manifest = synthesize_corpus(cfg, root)
    return manifest


# ----- acceptance reporting -------------------------------------------------

_ACCEPTANCE_RESULTS = {}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    if "test_acceptance.py" not in str(report.nodeid):
        return
    name = report.nodeid.split("::")[-1]
    _ACCEPTANCE_RESULTS[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name in sorted(_ACCEPTANCE_RESULTS):
        outcome = _ACCEPTANCE_RESULTS[name].upper()
        terminalreporter.write_line(f"{name}: {outcome}")
