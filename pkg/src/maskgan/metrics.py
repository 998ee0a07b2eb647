"""Objective metrics: the native intelligibility score, score normalization
to [0, 1], and adapters for external evaluators (quality score and the
composite regression measures).

The native short-time intelligibility metric follows the standard reference
algorithm: resample both signals to 10 kHz, drop frames whose reference
energy is more than 40 dB below the loudest reference frame, decompose into
15 one-third-octave band envelopes (first center 150 Hz) via a 512-point FFT
over 256-sample Hann frames at 50% overlap, then for every band and every
30-frame segment scale the degraded segment to the reference energy, clip it
at (1 + 10^(-15/20)) times the reference, and correlate.  The final score is
the mean correlation over all bands and segments.

Conventions pinned here (the test oracle codes them independently):

* frames start at 0, step ``hop``, and must fit entirely: the last start is
  ``len - frame`` (used for both silence removal and the band transform);
* the frame window is the endpoint-free symmetric Hann of length ``frame``
  (``hann(frame + 2)`` with the zero endpoints dropped);
* silence removal reconstructs retained frames by overlap-add divided by the
  summed window, exact on the covered region, truncated to full-frame
  coverage;
* zero-variance band segments contribute zero correlation, and a degraded
  segment with zero energy in a band gets scale factor zero.
"""

from __future__ import annotations

import re
import shlex
import subprocess
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AllSilentError, MetricUnavailableError, SignalTooShortError
from .signal import AudioSignal, resample, write_wav


class MetricRangeWarning(UserWarning):
    """Raw score fell outside the metric's declared range and was clamped."""


@dataclass(frozen=True)
class StoiParams:
    """Constants of the reference intelligibility algorithm."""

    target_rate: int = 10000
    frame: int = 256
    hop: int = 128
    fft: int = 512
    bands: int = 15
    lowest_center: float = 150.0
    segment: int = 30
    sdr_clip: float = -15.0      # dB, lower signal-to-distortion bound
    silence_range: float = 40.0  # dB below the loudest reference frame

    def __post_init__(self):
        if min(self.target_rate, self.frame, self.hop, self.fft,
               self.bands, self.segment) <= 0:
            raise ValueError("all frame/band constants must be positive")
        # highest band edge must stay below Nyquist of the working rate
        k = self.bands - 1
        upper_edge = self.lowest_center * 2.0 ** ((k + 0.5) / 3.0)
        if upper_edge >= self.target_rate / 2:
            raise ValueError(
                f"band edge {upper_edge:.0f} Hz reaches Nyquist of {self.target_rate} Hz"
            )


def _stoi_window(n: int) -> np.ndarray:
    # symmetric Hann without the zero endpoints
    return np.hanning(n + 2)[1:-1]


def third_octave_bands(params: StoiParams | None = None):
    """Boolean band matrix (bands x fft//2+1) plus the band center frequencies.

    Band edges are the geometric means of adjacent centers, snapped to the
    nearest FFT bin; a band covers bins [left_edge_bin, right_edge_bin).
    """
    params = params or StoiParams()
    f = np.linspace(0, params.target_rate, params.fft + 1)[: params.fft // 2 + 1]
    k = np.arange(params.bands)
    centers = params.lowest_center * 2.0 ** (k / 3.0)
    lo = np.sqrt(centers * params.lowest_center * 2.0 ** ((k - 1) / 3.0))
    hi = np.sqrt(centers * params.lowest_center * 2.0 ** ((k + 1) / 3.0))
    matrix = np.zeros((params.bands, f.shape[0]))
    for i in range(params.bands):
        lo_bin = int(np.argmin((f - lo[i]) ** 2))
        hi_bin = int(np.argmin((f - hi[i]) ** 2))
        matrix[i, lo_bin:hi_bin] = 1.0
    return matrix, centers


def _frame_starts(n: int, frame: int, hop: int) -> np.ndarray:
    if n < frame:
        raise SignalTooShortError(
            f"{n} samples is shorter than one {frame}-sample frame"
        )
    return np.arange(0, n - frame + 1, hop)


def remove_silent_frames(
    deg: AudioSignal, ref: AudioSignal, params: StoiParams | None = None
):
    """Drop frames whose *reference* energy is more than ``silence_range`` dB
    below the maximum-energy reference frame, from both signals.

    Retained frames are windowed, overlap-added at consecutive hop positions
    and divided by the summed window, so a run of retained frames reproduces
    the input exactly on the covered region.  Output length is the coverage
    of the retained frames, i.e. input tails beyond the last full frame are
    dropped even when nothing is silent.
    """
    params = params or StoiParams()
    if len(deg) != len(ref):
        raise ValueError(f"length mismatch: deg {len(deg)} vs ref {len(ref)}")
    if deg.sample_rate != ref.sample_rate:
        raise ValueError("sample rates differ")
    starts = _frame_starts(len(ref), params.frame, params.hop)
    window = _stoi_window(params.frame)

    ref_frames = np.stack([ref.samples[s : s + params.frame] for s in starts])
    rms = np.sqrt(np.sum((ref_frames * window) ** 2, axis=1) / params.frame)
    if not np.any(rms > 0):
        raise AllSilentError("reference has no frame with nonzero energy")
    with np.errstate(divide="ignore"):
        energy_db = 20.0 * np.log10(rms)
    keep = energy_db - energy_db.max() + params.silence_range > 0

    kept = starts[keep]
    if kept.size == 0:
        raise AllSilentError("every reference frame is below the silence threshold")
    out_len = (kept.size - 1) * params.hop + params.frame
    deg_out = np.zeros(out_len)
    ref_out = np.zeros(out_len)
    wsum = np.zeros(out_len)
    for j, src in enumerate(kept):
        lo, hi = j * params.hop, j * params.hop + params.frame
        deg_out[lo:hi] += deg.samples[src : src + params.frame] * window
        ref_out[lo:hi] += ref.samples[src : src + params.frame] * window
        wsum[lo:hi] += window
    deg_out /= wsum
    ref_out /= wsum
    return (AudioSignal(deg_out, deg.sample_rate),
            AudioSignal(ref_out, ref.sample_rate))


def _band_envelopes(samples: np.ndarray, params: StoiParams, band_matrix: np.ndarray):
    starts = _frame_starts(samples.shape[0], params.frame, params.hop)
    window = _stoi_window(params.frame)
    frames = np.stack([samples[s : s + params.frame] for s in starts]) * window
    spec = np.fft.rfft(frames, n=params.fft)  # (T, fft//2+1)
    power = np.abs(spec) ** 2
    return np.sqrt(power @ band_matrix.T)  # (T, bands)


def stoi(
    deg: AudioSignal,
    ref: AudioSignal,
    params: StoiParams | None = None,
    clamp: bool = True,
) -> float:
    """Short-time intelligibility of ``deg`` against the clean ``ref``.

    Individual band/segment correlations can in principle be negative, so the
    averaged score is clamped to [0, 1] by default; pass ``clamp=False`` for
    the raw average.
    """
    params = params or StoiParams()
    if len(deg) != len(ref):
        raise ValueError(f"length mismatch: deg {len(deg)} vs ref {len(ref)}")
    if deg.sample_rate != ref.sample_rate:
        raise ValueError("sample rates differ")
    if deg.sample_rate != params.target_rate:
        deg = resample(deg, params.target_rate)
        ref = resample(ref, params.target_rate)

    deg, ref = remove_silent_frames(deg, ref, params)

    band_matrix, _ = third_octave_bands(params)
    x = _band_envelopes(ref.samples, params, band_matrix)  # (T, bands)
    y = _band_envelopes(deg.samples, params, band_matrix)
    n_frames, seg = x.shape[0], params.segment
    if n_frames < seg:
        raise SignalTooShortError(
            f"{n_frames} band frames after silence removal, need >= {seg}"
        )

    # sliding segments: (n_segments, bands, seg)
    xs = np.stack([x[m - seg + 1 : m + 1].T for m in range(seg - 1, n_frames)])
    ys = np.stack([y[m - seg + 1 : m + 1].T for m in range(seg - 1, n_frames)])

    y_energy = np.sum(ys**2, axis=2, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.sqrt(np.sum(xs**2, axis=2, keepdims=True) / y_energy)
    scale[~np.isfinite(scale)] = 0.0
    clip_gain = 1.0 + 10.0 ** (params.sdr_clip / 20.0)
    y_scaled = np.minimum(ys * scale, xs * clip_gain)

    xc = xs - xs.mean(axis=2, keepdims=True)
    yc = y_scaled - y_scaled.mean(axis=2, keepdims=True)
    xn = np.linalg.norm(xc, axis=2)
    yn = np.linalg.norm(yc, axis=2)
    valid = (xn > 0) & (yn > 0)
    corr = np.zeros_like(xn)
    corr[valid] = np.sum(xc * yc, axis=2)[valid] / (xn[valid] * yn[valid])

    score = float(corr.mean())
    if clamp:
        score = min(max(score, 0.0), 1.0)
    return score


# ---------------------------------------------------------------------------
# Metric registry and normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MetricInfo:
    name: str
    raw_min: float
    raw_max: float
    native: bool


METRICS = {
    "stoi": MetricInfo("stoi", 0.0, 1.0, native=True),
    "pesq": MetricInfo("pesq", -0.5, 4.5, native=False),
    "csig": MetricInfo("csig", 1.0, 5.0, native=False),
    "cbak": MetricInfo("cbak", 1.0, 5.0, native=False),
    "covl": MetricInfo("covl", 1.0, 5.0, native=False),
}


def metric_info(name: str) -> MetricInfo:
    try:
        return METRICS[name.lower()]
    except KeyError:
        raise KeyError(f"unknown metric {name!r}; known: {sorted(METRICS)}") from None


def normalize(metric: str, raw: float) -> float:
    """Map a raw score onto [0, 1], linearly over the declared raw range, so
    that the range maximum maps to exactly 1 (the training target for a
    perfect score relies on this).  Out-of-range values are clamped with a
    MetricRangeWarning."""
    info = metric_info(metric)
    if raw < info.raw_min or raw > info.raw_max:
        warnings.warn(
            f"{info.name} raw score {raw} outside [{info.raw_min}, {info.raw_max}]; clamped",
            MetricRangeWarning,
            stacklevel=2,
        )
        raw = min(max(raw, info.raw_min), info.raw_max)
    return (raw - info.raw_min) / (info.raw_max - info.raw_min)


# ---------------------------------------------------------------------------
# External evaluator adapter
# ---------------------------------------------------------------------------

_FLOAT_RE = re.compile(r"[-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")


class ExternalEvaluator:
    """Runs a configured command on (reference, degraded) WAV paths and parses
    the LAST number printed to stdout as the raw score.

    The command is a template with ``{ref}``, ``{deg}`` and ``{rate}``
    placeholders, e.g. ``"pesq-tool --rate {rate} {ref} {deg}"``.  Timeouts,
    non-zero exits and unparseable output all raise MetricUnavailableError.
    """

    def __init__(self, command: str, timeout: float = 120.0):
        if not command or "{ref}" not in command or "{deg}" not in command:
            raise ValueError("command template must contain {ref} and {deg}")
        self.command = command
        self.timeout = timeout

    def score_files(self, ref_path, deg_path, sample_rate: int) -> float:
        argv = [
            part.format(ref=str(ref_path), deg=str(deg_path), rate=sample_rate)
            for part in shlex.split(self.command)
        ]
        try:
            proc = subprocess.run(
                argv, capture_output=True, text=True, timeout=self.timeout
            )
        except FileNotFoundError as exc:
            raise MetricUnavailableError(f"evaluator not found: {argv[0]}") from exc
        except subprocess.TimeoutExpired as exc:
            raise MetricUnavailableError(
                f"evaluator timed out after {self.timeout}s: {argv[0]}"
            ) from exc
        if proc.returncode != 0:
            raise MetricUnavailableError(
                f"evaluator exited {proc.returncode}: {proc.stderr.strip()[:200]}"
            )
        numbers = _FLOAT_RE.findall(proc.stdout)
        if not numbers:
            raise MetricUnavailableError(
                f"no numeric score in evaluator output: {proc.stdout.strip()[:200]!r}"
            )
        return float(numbers[-1])

    def score_signals(self, deg: AudioSignal, ref: AudioSignal) -> float:
        with tempfile.TemporaryDirectory(prefix="metric_eval_") as tmp:
            ref_path = Path(tmp) / "ref.wav"
            deg_path = Path(tmp) / "deg.wav"
            write_wav(ref_path, ref)
            write_wav(deg_path, deg)
            return self.score_files(ref_path, deg_path, ref.sample_rate)


def evaluate_pair(
    deg: AudioSignal,
    ref: AudioSignal,
    metric: str = "stoi",
    external: ExternalEvaluator | None = None,
):
    """Score an aligned (degraded, reference) pair.

    Returns ``(raw, normalized)``.  Non-native metrics require an external
    evaluator; without one this raises MetricUnavailableError rather than
    silently substituting anything.
    """
    if len(deg) != len(ref):
        raise ValueError(f"length mismatch: deg {len(deg)} vs ref {len(ref)}")
    if deg.sample_rate != ref.sample_rate:
        raise ValueError("sample rates differ")
    info = metric_info(metric)
    if info.native:
        raw = stoi(deg, ref)
    else:
        if external is None:
            raise MetricUnavailableError(
                f"metric {info.name!r} needs an external evaluator and none is configured"
            )
        raw = external.score_signals(deg, ref)
    return raw, normalize(info.name, raw)
