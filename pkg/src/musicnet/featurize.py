"""In-model featurization: raw frames -> log-power mel spectrogram.

The spectral transform is expressed as two dense matrices (real and
imaginary DFT bases with a periodic Hann window folded in) so the whole
waveform->log-mel pipeline is just matrix products a network can own.
A 9 s clip becomes a 900 x 120 log-mel matrix.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .audio_io import AudioClip, FrameMatrix, frame_signal
from .errors import ContractViolation

N_FFT = 320
N_BINS = N_FFT // 2 + 1  # 161
N_MELS = 120
SAMPLE_RATE = 16000
FMIN = 0.0
FMAX = 8000.0
LOG_FLOOR = 1e-10


def hann_window(n: int) -> np.ndarray:
    """Periodic (DFT-even) Hann window of length n."""
    return (0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)).astype(np.float64)


def build_dft_basis(n_fft: int = N_FFT):
    """Real/imaginary DFT basis matrices [n_fft x (n_fft/2+1)], window folded in.

    frame @ real_basis and frame @ imag_basis reproduce the real and
    imaginary parts of the one-sided FFT of the Hann-windowed frame.
    """
    if n_fft < 2 or n_fft % 2 != 0:
        raise ContractViolation("n_fft must be even and >= 2")
    n_bins = n_fft // 2 + 1
    w = hann_window(n_fft)
    n = np.arange(n_fft)[:, None]
    k = np.arange(n_bins)[None, :]
    ang = 2.0 * np.pi * k * n / n_fft
    real = w[:, None] * np.cos(ang)
    imag = -w[:, None] * np.sin(ang)
    return real, imag


def _hz_to_mel(f: float) -> float:
    # Slaney scale: linear below 1 kHz, logarithmic above.
    f_sp = 200.0 / 3.0
    if f < 1000.0:
        return f / f_sp
    return 15.0 + math.log(f / 1000.0) / (math.log(6.4) / 27.0)


def _mel_to_hz(m: float) -> float:
    f_sp = 200.0 / 3.0
    if m < 15.0:
        return m * f_sp
    return 1000.0 * math.exp((math.log(6.4) / 27.0) * (m - 15.0))


def mel_center_frequencies(n_mels: int = N_MELS, fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """The n_mels+2 band-edge frequencies (Hz), mel-uniformly spaced."""
    mels = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    return np.array([_mel_to_hz(m) for m in mels])


def build_mel_filterbank(
    n_bins: int = N_BINS,
    n_mels: int = N_MELS,
    sr: int = SAMPLE_RATE,
    fmin: float = FMIN,
    fmax: float = FMAX,
) -> np.ndarray:
    """Triangular mel filterbank [n_bins x n_mels], Slaney scale and norm.

    Each filter (column) is a triangle between adjacent band edges, scaled
    by 2/(f_upper - f_lower) so filters integrate to a constant.
    """
    if n_mels < 1:
        raise ContractViolation("n_mels must be >= 1")
    if fmax > sr / 2:
        raise ContractViolation("fmax above Nyquist")
    edges = mel_center_frequencies(n_mels, fmin, fmax)  # n_mels + 2
    fft_freqs = np.linspace(0.0, sr / 2.0, n_bins)
    fdiff = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]  # [n_mels+2, n_bins]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))  # [n_mels, n_bins]
    enorm = 2.0 / (edges[2:] - edges[:-2])
    weights *= enorm[:, None]
    return weights.T.copy()  # [n_bins, n_mels]


@dataclass
class FeaturePlan:
    """All fixed tensors and parameters of the featurization layer."""

    n_fft: int = N_FFT
    n_bins: int = N_BINS
    n_mels: int = N_MELS
    sample_rate_hz: int = SAMPLE_RATE
    log_floor: float = LOG_FLOOR
    real_basis: np.ndarray = None
    imag_basis: np.ndarray = None
    window: np.ndarray = None
    mel_weights: np.ndarray = None

    def __post_init__(self):
        if self.real_basis is None:
            self.real_basis, self.imag_basis = build_dft_basis(self.n_fft)
        if self.window is None:
            self.window = hann_window(self.n_fft)
        if self.mel_weights is None:
            self.mel_weights = build_mel_filterbank(self.n_bins, self.n_mels, self.sample_rate_hz)
        # kept float64 in memory; the weight file stores float32
        self.real_basis = np.asarray(self.real_basis, dtype=np.float64)
        self.imag_basis = np.asarray(self.imag_basis, dtype=np.float64)
        self.window = np.asarray(self.window, dtype=np.float64)
        self.mel_weights = np.asarray(self.mel_weights, dtype=np.float64)
        if self.real_basis.shape != (self.n_fft, self.n_bins):
            raise ContractViolation("real_basis shape mismatch")
        if self.mel_weights.shape != (self.n_bins, self.n_mels):
            raise ContractViolation("mel_weights shape mismatch")


def default_plan() -> FeaturePlan:
    return FeaturePlan()


@dataclass
class LogMelFeature:
    """Log-power mel matrix for one clip."""

    values: np.ndarray  # [n_frames, n_mels]
    clip_ref: str = ""


def logmel(frames, plan: FeaturePlan) -> LogMelFeature:
    """frames -> spectrum via basis matrices -> power -> mel -> ln with floor."""
    f = frames.frames if isinstance(frames, FrameMatrix) else np.asarray(frames)
    if f.ndim != 2 or f.shape[1] != plan.n_fft:
        raise ContractViolation(f"frames shape {f.shape} incompatible with n_fft {plan.n_fft}")
    # float64 throughout: off-peak spectral bins of tonal signals suffer
    # catastrophic cancellation in float32, which the log amplifies
    f = np.asarray(f, dtype=np.float64)
    re = f @ plan.real_basis
    im = f @ plan.imag_basis
    power = re * re + im * im
    mel = power @ plan.mel_weights
    out = np.log(np.maximum(mel, plan.log_floor))
    return LogMelFeature(values=out.astype(np.float32))


def featurize_clip(clip: AudioClip, plan: FeaturePlan) -> LogMelFeature:
    """Full featurization of a conditioned clip (frame -> logmel)."""
    clip.validate()
    feat = logmel(frame_signal(clip), plan)
    feat.clip_ref = clip.source_id
    return feat


def dump_feature(feature: LogMelFeature, sink) -> None:
    """Debug dump: two uint32 dims then float32 LE row-major values."""
    v = np.ascontiguousarray(feature.values, dtype="<f4")
    sink.write(struct.pack("<II", v.shape[0], v.shape[1]))
    sink.write(v.tobytes())


def load_feature_dump(source) -> LogMelFeature:
    hdr = source.read(8)
    rows, cols = struct.unpack("<II", hdr)
    buf = source.read(rows * cols * 4)
    values = np.frombuffer(buf, dtype="<f4").reshape(rows, cols)
    return LogMelFeature(values=values.copy())
