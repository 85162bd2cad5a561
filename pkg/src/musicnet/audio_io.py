"""WAV decoding, conditioning, and framing.

Everything downstream assumes the contract enforced here: 16 kHz mono,
exactly 9 seconds (144000 samples), amplitudes in [-1, 1]. Framing uses
a 20 ms window with a 10 ms hop and reflect padding so a 9 s clip yields
exactly 900 frames.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (
    ContractViolation,
    DecodeError,
    EmptyInput,
    UnsupportedFormat,
    UnsupportedRate,
)

TARGET_RATE = 16000
CLIP_SECONDS = 9
CLIP_SAMPLES = TARGET_RATE * CLIP_SECONDS  # 144000
FRAME_LEN = 320  # 20 ms at 16 kHz
HOP = 160  # 10 ms
N_FRAMES = CLIP_SAMPLES // HOP  # 900

# Windowed-sinc resampler: 64 taps per output sample, Kaiser beta 8.6.
_RESAMPLE_HALF_TAPS = 32
_RESAMPLE_KAISER_BETA = 8.6

LABEL_MUSIC = "music"
LABEL_NO_MUSIC = "no_music"


@dataclass
class AudioClip:
    """Mono waveform with provenance and an optional binary label."""

    samples: np.ndarray  # float32, amplitudes in [-1, 1]
    sample_rate_hz: int
    label: Optional[str] = None  # "music" | "no_music"
    source_id: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate_hz <= 0:
            raise ContractViolation("sample_rate_hz must be positive")
        if self.label not in (None, LABEL_MUSIC, LABEL_NO_MUSIC):
            raise ContractViolation(f"bad label: {self.label!r}")

    def __len__(self) -> int:
        return self.samples.shape[0]

    def validate(self) -> "AudioClip":
        """Check the conditioned-clip invariants; raise ContractViolation."""
        if self.sample_rate_hz != TARGET_RATE:
            raise ContractViolation(f"rate {self.sample_rate_hz} != {TARGET_RATE}")
        if len(self) != CLIP_SAMPLES:
            raise ContractViolation(f"length {len(self)} != {CLIP_SAMPLES}")
        if not np.all(np.isfinite(self.samples)):
            raise ContractViolation("non-finite samples")
        if np.max(np.abs(self.samples), initial=0.0) > 1.0:
            raise ContractViolation("samples outside [-1, 1]")
        return self


@dataclass
class FrameMatrix:
    """Overlapping analysis frames of one conditioned clip."""

    frames: np.ndarray  # [n_frames, frame_len]
    frame_len: int = FRAME_LEN
    hop: int = HOP

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def decode_wav(data: bytes) -> AudioClip:
    """Parse a RIFF/WAVE byte string into a mono AudioClip.

    Accepts PCM 16-bit and IEEE float 32-bit, 1 or 2 channels, any rate.
    Stereo is downmixed by channel averaging; 16-bit values are scaled
    by 1/32768. The original sample rate is preserved.
    """
    if len(data) < 12 or data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise DecodeError("not a RIFF/WAVE stream")
    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4]
        (csize,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + csize]
        if cid == b"fmt ":
            if len(body) < 16:
                raise DecodeError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            if len(body) < csize:
                raise DecodeError("data chunk truncated")
            payload = body
        pos += 8 + csize + (csize & 1)  # chunks are word-aligned
    if fmt is None or payload is None:
        raise DecodeError("missing fmt or data chunk")
    audio_format, channels, rate, _, _, bits = fmt
    if audio_format == 0xFFFE and len(data) >= 2:
        raise UnsupportedFormat("WAVE_FORMAT_EXTENSIBLE not supported")
    if channels not in (1, 2):
        raise UnsupportedFormat(f"{channels} channels not supported")
    if audio_format == 1 and bits == 16:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % (2 * channels)], dtype="<i2")
        x = raw.astype(np.float32) / 32768.0
    elif audio_format == 3 and bits == 32:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % (4 * channels)], dtype="<f4")
        x = raw.astype(np.float32)
    else:
        raise UnsupportedFormat(f"format={audio_format} bits={bits} not supported")
    if channels == 2:
        x = x.reshape(-1, 2).mean(axis=1)
    x = np.clip(x, -1.0, 1.0)
    return AudioClip(samples=x, sample_rate_hz=int(rate))


def encode_wav(clip: AudioClip) -> bytes:
    """Serialize as mono 16-bit PCM WAV (test/synthesis utility)."""
    q = np.clip(np.rint(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    payload = q.tobytes()
    rate = clip.sample_rate_hz
    hdr = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    hdr += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, rate, rate * 2, 2, 16)
    hdr += b"data" + struct.pack("<I", len(payload))
    return hdr + payload


def read_wav(path) -> AudioClip:
    with open(path, "rb") as f:
        clip = decode_wav(f.read())
    clip.source_id = str(path)
    return clip


def write_wav(path, clip: AudioClip) -> None:
    with open(path, "wb") as f:
        f.write(encode_wav(clip))


def resample_to_16k(clip: AudioClip) -> AudioClip:
    """Band-limited resampling to 16 kHz (windowed-sinc, Kaiser beta 8.6).

    Output length is round(n * 16000 / input_rate). Rates below 8 kHz are
    rejected; narrowband upsampling is out of scope.
    """
    if clip.sample_rate_hz < 8000:
        raise UnsupportedRate(f"rate {clip.sample_rate_hz} < 8000")
    if clip.sample_rate_hz == TARGET_RATE:
        return AudioClip(clip.samples.copy(), TARGET_RATE, clip.label, clip.source_id)
    x = clip.samples.astype(np.float64)
    in_rate = clip.sample_rate_hz
    ratio = TARGET_RATE / in_rate
    n_out = int(round(len(x) * TARGET_RATE / in_rate))
    half = _RESAMPLE_HALF_TAPS
    cutoff = min(1.0, ratio)
    xp = np.concatenate([np.zeros(half), x, np.zeros(half + 1)])
    t = np.arange(n_out) / ratio  # output-sample centers, input-sample units
    k0 = np.floor(t).astype(np.int64)
    offs = np.arange(-half + 1, half + 1)
    idx = k0[:, None] + offs[None, :]
    d = t[:, None] - idx  # distance from tap to center, |d| <= half
    win = np.i0(_RESAMPLE_KAISER_BETA * np.sqrt(np.clip(1.0 - (d / half) ** 2, 0.0, 1.0)))
    win /= np.i0(_RESAMPLE_KAISER_BETA)
    h = cutoff * np.sinc(cutoff * d) * win
    h /= h.sum(axis=1, keepdims=True)  # unity DC gain per phase
    y = np.einsum("ij,ij->i", h, xp[idx + half])
    y = np.clip(y, -1.0, 1.0).astype(np.float32)
    return AudioClip(y, TARGET_RATE, clip.label, clip.source_id)


def fit_to_9s(clip: AudioClip) -> AudioClip:
    """Force exactly 144000 samples: truncate front-aligned, zero-pad the end."""
    if clip.sample_rate_hz != TARGET_RATE:
        raise ContractViolation("fit_to_9s requires a 16 kHz clip")
    n = len(clip)
    if n == 0:
        raise EmptyInput("empty clip")
    if n >= CLIP_SAMPLES:
        x = clip.samples[:CLIP_SAMPLES].copy()
    else:
        x = np.concatenate([clip.samples, np.zeros(CLIP_SAMPLES - n, dtype=np.float32)])
    return AudioClip(x, TARGET_RATE, clip.label, clip.source_id)


def condition(clip: AudioClip) -> AudioClip:
    """Resample to 16 kHz and normalize to the 9-second contract."""
    return fit_to_9s(resample_to_16k(clip))


def frame_signal(clip: AudioClip, frame_len: int = FRAME_LEN, hop: int = HOP) -> FrameMatrix:
    """Slice a conditioned clip into overlapping frames.

    The signal is reflect-padded by frame_len/2 on each side so the frame
    count is exactly len/hop (900 for a 9 s clip); frame i covers padded
    samples [i*hop, i*hop + frame_len).
    """
    if frame_len != 2 * hop:
        raise ContractViolation("frame_len must equal 2 * hop")
    x = clip.samples
    if len(x) != CLIP_SAMPLES:
        raise ContractViolation(f"length {len(x)} != {CLIP_SAMPLES}")
    pad = frame_len // 2
    padded = np.pad(x, pad, mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(padded, frame_len)[::hop]
    frames = np.ascontiguousarray(windows[: len(x) // hop], dtype=np.float32)
    return FrameMatrix(frames=frames, frame_len=frame_len, hop=hop)
