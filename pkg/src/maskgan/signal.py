"""Time-frequency analysis, feature mapping and overlap-add resynthesis.

Every consumer of spectral data in this package derives its conventions from
this module:

* analysis window: periodic Hann (exact constant-overlap-add at 50% hop);
* framing: "centered" by default, i.e. the signal is reflect-padded by
  ``window_length // 2`` on both ends, giving ``T = 1 + N // hop`` frames for
  an ``N``-sample signal.  ``center=False`` exposes the bare convention
  ``T = 1 + (N - window) // hop`` with no padding;
* forward transform unnormalized; resynthesis overlap-adds windowed frames
  and divides by the summed squared window, which reconstructs the input
  exactly (to rounding) wherever that sum is nonzero;
* resynthesized audio is truncated to the requested output length.

Feature space is ``log(1 + magnitude)`` elementwise; its exact inverse is
``exp(v) - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import SignalTooShortError

DEFAULT_SAMPLE_RATE = 16000


def _hann_periodic(n: int) -> np.ndarray:
    k = np.arange(n)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)


_WINDOWS = {"hann_periodic": _hann_periodic}


@dataclass(frozen=True)
class FrameParams:
    """STFT framing parameters. Defaults: 512-point DFT, 32 ms window,
    16 ms hop at 16 kHz."""

    dft_length: int = 512
    window_length: int = 512
    hop_length: int = 256
    window_kind: str = "hann_periodic"

    def __post_init__(self):
        if not 0 < self.hop_length <= self.window_length <= self.dft_length:
            raise ValueError(
                "need 0 < hop_length <= window_length <= dft_length, got "
                f"hop={self.hop_length} window={self.window_length} dft={self.dft_length}"
            )
        if self.window_kind not in _WINDOWS:
            raise ValueError(f"unknown window kind {self.window_kind!r}")

    @property
    def freq_bins(self) -> int:
        return self.dft_length // 2 + 1


def analysis_window(params: FrameParams) -> np.ndarray:
    return _WINDOWS[params.window_kind](params.window_length)


@dataclass
class AudioSignal:
    """Mono waveform with its sample rate. Samples are finite floats with a
    nominal range of [-1, 1] (not enforced; mixing may exceed it before
    peak bookkeeping)."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"mono 1-D signal required, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("signal contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        self.samples = samples

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class SpectralFrames:
    """Magnitude/phase decomposition of a complex STFT, T x F each."""

    magnitude: np.ndarray
    phase: np.ndarray
    frame_params: FrameParams = field(default_factory=FrameParams)

    def __post_init__(self):
        if self.magnitude.shape != self.phase.shape:
            raise ValueError(
                f"magnitude {self.magnitude.shape} and phase {self.phase.shape} differ"
            )


def stft(samples: np.ndarray, params: FrameParams | None = None, center: bool = True):
    """Short-time transform of a 1-D signal.

    Returns ``(magnitude, phase)``, each ``T x F`` with ``F = dft_length//2 + 1``.
    Requires ``len(samples) >= window_length`` regardless of padding so that the
    no-padding frame count is always defined.
    """
    params = params or FrameParams()
    samples = np.asarray(samples, dtype=np.float64)
    win = params.window_length
    if samples.shape[0] < win:
        raise SignalTooShortError(
            f"signal of {samples.shape[0]} samples is shorter than one "
            f"{win}-sample analysis window"
        )
    if center:
        samples = np.pad(samples, win // 2, mode="reflect")
    frames = sliding_window_view(samples, win)[:: params.hop_length]
    spec = np.fft.rfft(frames * analysis_window(params), n=params.dft_length)
    return np.abs(spec), np.angle(spec)


def compute_features(
    signal: AudioSignal, params: FrameParams | None = None, center: bool = True
):
    """Feature computation: STFT magnitude mapped through log(1 + m).

    Returns the T x F feature matrix together with the full SpectralFrames
    (magnitude and phase kept for resynthesis).
    """
    params = params or FrameParams()
    magnitude, phase = stft(signal.samples, params, center=center)
    features = np.log1p(magnitude)
    return features, SpectralFrames(magnitude, phase, params)


def features_to_magnitude(features: np.ndarray) -> np.ndarray:
    """Invert the feature map: exp(v) - 1, exact up to rounding."""
    features = np.asarray(features, dtype=np.float64)
    if np.any(features < 0):
        raise ValueError("feature values must be >= 0")
    return np.expm1(features)


def apply_mask(mask: np.ndarray, magnitude: np.ndarray) -> np.ndarray:
    """Elementwise multiplicative gain on a magnitude matrix."""
    mask = np.asarray(mask, dtype=np.float64)
    magnitude = np.asarray(magnitude, dtype=np.float64)
    if mask.shape != magnitude.shape:
        raise ValueError(f"mask {mask.shape} does not match magnitude {magnitude.shape}")
    return mask * magnitude


def resynthesize(
    magnitude: np.ndarray,
    phase: np.ndarray,
    params: FrameParams | None = None,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
    length: int | None = None,
    center: bool = True,
) -> AudioSignal:
    """Inverse transform by windowed overlap-add.

    The per-sample division by the summed squared analysis window makes
    analysis -> resynthesis exact wherever the sum is nonzero. ``length``
    truncates the output (pass the original signal length for a round trip);
    when omitted it defaults to ``(T - 1) * hop`` under the centered
    convention and ``(T - 1) * hop + window`` otherwise.
    """
    params = params or FrameParams()
    magnitude = np.asarray(magnitude, dtype=np.float64)
    phase = np.asarray(phase, dtype=np.float64)
    if magnitude.shape != phase.shape:
        raise ValueError(f"magnitude {magnitude.shape} does not match phase {phase.shape}")
    n_frames = magnitude.shape[0]
    if magnitude.shape[1] != params.freq_bins:
        raise ValueError(
            f"expected {params.freq_bins} frequency bins, got {magnitude.shape[1]}"
        )
    win, hop = params.window_length, params.hop_length
    window = analysis_window(params)

    frames = np.fft.irfft(magnitude * np.exp(1j * phase), n=params.dft_length)[:, :win]
    covered = (n_frames - 1) * hop + win
    out = np.zeros(covered)
    wsum = np.zeros(covered)
    for t in range(n_frames):
        start = t * hop
        out[start : start + win] += frames[t] * window
        wsum[start : start + win] += window * window
    nonzero = wsum > 1e-12
    out[nonzero] /= wsum[nonzero]

    if center:
        out = out[win // 2 :]
        if length is None:
            length = (n_frames - 1) * hop
    elif length is None:
        length = covered
    if length > out.shape[0]:
        out = np.pad(out, (0, length - out.shape[0]))
    return AudioSignal(out[:length], sample_rate)


def snr_db(reference: np.ndarray, estimate: np.ndarray) -> float:
    """10 log10 of reference power over residual power."""
    reference = np.asarray(reference, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    noise = np.sum((reference - estimate) ** 2)
    if noise == 0.0:
        return np.inf
    return 10.0 * np.log10(np.sum(reference**2) / noise)


def resample(signal: AudioSignal, target_rate: int) -> AudioSignal:
    """Polyphase windowed-sinc resampling (Kaiser beta=5 design, cutoff at
    the lower of the two Nyquist frequencies)."""
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if signal.sample_rate == target_rate:
        return AudioSignal(signal.samples.copy(), target_rate)
    g = np.gcd(int(signal.sample_rate), int(target_rate))
    up, down = target_rate // g, signal.sample_rate // g
    return AudioSignal(resample_poly(signal.samples, up, down), target_rate)


def read_wav(path) -> AudioSignal:
    """Load a mono WAV file. Integer PCM is scaled to [-1, 1)."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        samples = data / 32768.0
    elif data.dtype == np.int32:
        samples = data / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        samples = data.astype(np.float64)
    return AudioSignal(samples, int(rate))


def write_wav(path, signal: AudioSignal) -> None:
    """Write 16-bit PCM. Samples are clipped to [-1, 1] first."""
    clipped = np.clip(signal.samples, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype(np.int16)
    wavfile.write(path, signal.sample_rate, pcm)
