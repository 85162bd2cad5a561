"""Test-set synthesis: SMR-controlled speech/music mixing and manifests.

SMR (signal-to-music ratio) is the dB RMS ratio of the speech stem to the
scaled music stem. Synthetic stems (harmonic "music", modulated-noise
"speech", pink noise) are deterministic desk-scale stand-ins for real
corpora; real stem WAVs can be supplied instead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .audio_io import (
    CLIP_SAMPLES,
    LABEL_MUSIC,
    LABEL_NO_MUSIC,
    TARGET_RATE,
    AudioClip,
    write_wav,
)
from .errors import ContractViolation, ManifestError, SilentStem

DEFAULT_SMRS = (-5.0, 0.0, 5.0)
DEFAULT_INSTRUMENTS = ("piano", "guitar", "violin")
PEAK_CEILING = 0.99

CATEGORIES = (
    "music_only",
    "music+clean",
    "music+noisy",
    "clean_only",
    "noisy_only",
    "noise_only",
)


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x, dtype=np.float64))))


def mix_at_smr(speech: AudioClip, music: AudioClip, smr_db: float) -> AudioClip:
    """Mix stems so rms(speech)/rms(scaled music) equals smr_db (in dB).

    If the sum would clip, the whole mix is peak-normalized to 0.99; the
    stem ratio is unaffected and the gains are recorded in clip.meta.
    """
    if speech.sample_rate_hz != TARGET_RATE or music.sample_rate_hz != TARGET_RATE:
        raise ContractViolation("stems must be 16 kHz")
    if len(speech) != len(music):
        raise ContractViolation("stems must have equal length")
    speech_rms = rms(speech.samples)
    if speech_rms == 0.0:
        raise SilentStem("speech stem is silent")
    music_rms = rms(music.samples)
    if music_rms == 0.0:
        raise SilentStem("music stem is silent")
    g = speech_rms / (music_rms * 10.0 ** (smr_db / 20.0))
    mix = speech.samples.astype(np.float64) + g * music.samples.astype(np.float64)
    peak = float(np.max(np.abs(mix)))
    norm = 1.0
    if peak > PEAK_CEILING:
        norm = PEAK_CEILING / peak
        mix *= norm
    return AudioClip(
        mix.astype(np.float32),
        TARGET_RATE,
        label=LABEL_MUSIC,
        source_id=f"mix({speech.source_id}+{music.source_id})",
        meta={"smr_db": smr_db, "music_gain": g, "mix_gain": norm},
    )


def _segments(rng, total: float, lo: float = 0.5, hi: float = 2.0) -> List[float]:
    out = []
    t = 0.0
    while t < total:
        d = float(rng.uniform(lo, hi))
        out.append(min(d, total - t))
        t += d
    return out


def gen_synthetic_stems(kind: str, seconds: float = 9.0, seed: int = 0) -> AudioClip:
    """Deterministic synthetic stem of one of three kinds.

    tonal_music: 3-6 harmonic tones, chord changes every 0.5-2 s.
    speech_like: band-limited noise with a 3-8 Hz syllabic envelope.
    noise: pink noise.
    """
    rng = np.random.default_rng(seed)
    n = int(round(seconds * TARGET_RATE))
    t = np.arange(n) / TARGET_RATE
    if kind == "tonal_music":
        x = np.zeros(n)
        pos = 0
        for dur in _segments(rng, seconds):
            seg_n = int(round(dur * TARGET_RATE))
            seg_n = min(seg_n, n - pos)
            if seg_n <= 0:
                break
            tt = t[pos : pos + seg_n]
            n_tones = int(rng.integers(3, 7))
            seg = np.zeros(seg_n)
            for _ in range(n_tones):
                f0 = float(rng.uniform(110.0, 880.0))
                amp = float(rng.uniform(0.3, 1.0))
                for h, ha in ((1, 1.0), (2, 0.5), (3, 0.25)):
                    if f0 * h < TARGET_RATE / 2:
                        seg += amp * ha * np.sin(2 * np.pi * f0 * h * tt + rng.uniform(0, 2 * np.pi))
            # short fade at segment edges to avoid clicks
            fade = min(160, seg_n // 2)
            env = np.ones(seg_n)
            env[:fade] = np.linspace(0, 1, fade)
            env[-fade:] = np.linspace(1, 0, fade)
            x[pos : pos + seg_n] = seg * env
            pos += seg_n
        label = LABEL_MUSIC
    elif kind == "speech_like":
        white = rng.standard_normal(n)
        spec = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, d=1.0 / TARGET_RATE)
        band = (freqs >= 200.0) & (freqs <= 4000.0)
        spec = np.where(band, spec, 0.02 * spec)  # small out-of-band floor
        x = np.fft.irfft(spec, n)
        f_syl = float(rng.uniform(3.0, 8.0))
        phase = float(rng.uniform(0, 2 * np.pi))
        env = (0.5 * (1.0 + np.sin(2 * np.pi * f_syl * t + phase))) ** 1.5
        x *= env
        label = LABEL_NO_MUSIC
    elif kind == "noise":
        white = rng.standard_normal(n)
        spec = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, d=1.0 / TARGET_RATE)
        scale = np.ones_like(freqs)
        scale[1:] = 1.0 / np.sqrt(freqs[1:])
        scale[0] = 0.0
        x = np.fft.irfft(spec * scale, n)
        label = LABEL_NO_MUSIC
    else:
        raise ContractViolation(f"unknown stem kind {kind!r}")
    peak = float(np.max(np.abs(x)))
    if peak > 0:
        x = 0.5 * x / peak
    return AudioClip(x.astype(np.float32), TARGET_RATE, label=label,
                     source_id=f"synth:{kind}:{seed}")


@dataclass
class ManifestEntry:
    path: str
    label: str
    category: str
    instrument: Optional[str] = None
    smr_db: Optional[float] = None
    source_id: str = ""
    seed: Optional[int] = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ContractViolation(f"bad category {self.category!r}")
        is_music = self.category.startswith("music")
        if is_music != (self.label == LABEL_MUSIC):
            raise ContractViolation(f"label {self.label!r} inconsistent with {self.category!r}")


@dataclass
class TestManifest:
    __test__ = False  # keep pytest from collecting this as a test class

    entries: List[ManifestEntry] = field(default_factory=list)

    def counts_by_category(self) -> Dict[str, int]:
        out = {}
        for e in self.entries:
            out[e.category] = out.get(e.category, 0) + 1
        return out

    def write(self, path) -> None:
        with open(path, "w") as f:
            for e in self.entries:
                f.write(json.dumps({k: v for k, v in asdict(e).items() if v is not None}) + "\n")

    @classmethod
    def read(cls, path) -> "TestManifest":
        m = cls()
        with open(path) as f:
            for line in f:
                line = line.strip()
                if line:
                    m.entries.append(ManifestEntry(**json.loads(line)))
        return m


def build_instrument_grid(
    instruments: Sequence[str] = DEFAULT_INSTRUMENTS,
    per_type_music_only: int = 20,
    per_type_mixed: int = 10,
    smrs: Sequence[float] = DEFAULT_SMRS,
    seed: int = 0,
    stem_dirs: Optional[Dict[str, Sequence[str]]] = None,
) -> TestManifest:
    """Plan the instrument test grid: instruments x (music_only + mixed) x SMRs.

    The default 3 x (20+10) x 3 configuration yields 270 music entries.
    With stem_dirs, each instrument must map to at least one stem file;
    gaps raise ManifestError. Without it, stems are synthesized.
    """
    if not instruments:
        raise ManifestError("no instruments given")
    if stem_dirs is not None:
        missing = [i for i in instruments if not stem_dirs.get(i)]
        if missing:
            raise ManifestError(f"missing stems for instruments: {missing}")
    manifest = TestManifest()
    idx = 0
    for inst in instruments:
        for smr in smrs:
            for j in range(per_type_music_only):
                manifest.entries.append(ManifestEntry(
                    path=f"{inst}_only_smr{smr:+g}_{j:03d}.wav",
                    label=LABEL_MUSIC, category="music_only",
                    instrument=inst, smr_db=float(smr),
                    seed=_entry_seed(seed, idx),
                ))
                idx += 1
            for j in range(per_type_mixed):
                manifest.entries.append(ManifestEntry(
                    path=f"{inst}_mix_smr{smr:+g}_{j:03d}.wav",
                    label=LABEL_MUSIC, category="music+clean",
                    instrument=inst, smr_db=float(smr),
                    seed=_entry_seed(seed, idx),
                ))
                idx += 1
    return manifest


def add_no_music_entries(manifest: TestManifest, clean: int = 150, noisy: int = 150,
                         seed: int = 0) -> TestManifest:
    """Append clean-speech and noisy-speech no-music entries."""
    idx = len(manifest.entries)
    for j in range(clean):
        manifest.entries.append(ManifestEntry(
            path=f"clean_{j:03d}.wav", label=LABEL_NO_MUSIC, category="clean_only",
            seed=_entry_seed(seed, idx)))
        idx += 1
    for j in range(noisy):
        manifest.entries.append(ManifestEntry(
            path=f"noisy_{j:03d}.wav", label=LABEL_NO_MUSIC, category="noisy_only",
            seed=_entry_seed(seed, idx)))
        idx += 1
    return manifest


def _entry_seed(manifest_seed: int, index: int) -> int:
    # independent per-entry stream derived from (manifest seed, entry index)
    return int(np.random.SeedSequence([manifest_seed, index]).generate_state(1)[0])


def render_entry(entry: ManifestEntry) -> AudioClip:
    """Synthesize the clip an entry describes (synthetic-stem mode)."""
    s = entry.seed if entry.seed is not None else 0
    if entry.category == "music_only":
        clip = gen_synthetic_stems("tonal_music", seed=s)
    elif entry.category == "music+clean":
        music = gen_synthetic_stems("tonal_music", seed=s)
        speech = gen_synthetic_stems("speech_like", seed=s + 1)
        clip = mix_at_smr(speech, music, entry.smr_db)
    elif entry.category == "music+noisy":
        music = gen_synthetic_stems("tonal_music", seed=s)
        speech = gen_synthetic_stems("speech_like", seed=s + 1)
        noise = gen_synthetic_stems("noise", seed=s + 2)
        noisy = AudioClip(
            np.clip(speech.samples + 0.3 * noise.samples, -1, 1), TARGET_RATE,
            label=LABEL_NO_MUSIC, source_id=speech.source_id + "+noise")
        clip = mix_at_smr(noisy, music, entry.smr_db)
    elif entry.category == "clean_only":
        clip = gen_synthetic_stems("speech_like", seed=s)
    elif entry.category == "noisy_only":
        speech = gen_synthetic_stems("speech_like", seed=s)
        noise = gen_synthetic_stems("noise", seed=s + 1)
        clip = AudioClip(np.clip(speech.samples + 0.3 * noise.samples, -1, 1),
                         TARGET_RATE, label=LABEL_NO_MUSIC, source_id="synth:noisy")
    elif entry.category == "noise_only":
        clip = gen_synthetic_stems("noise", seed=s)
    else:
        raise ContractViolation(f"bad category {entry.category!r}")
    clip.label = entry.label
    return clip


def render_manifest(manifest: TestManifest, out_dir, manifest_name: str = "manifest.jsonl") -> Path:
    """Write every entry's clip as 16 kHz mono PCM16 WAV plus the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rendered = TestManifest()
    for e in manifest.entries:
        clip = render_entry(e)
        assert len(clip) == CLIP_SAMPLES
        path = out_dir / e.path
        write_wav(path, clip)
        rendered.entries.append(ManifestEntry(
            path=str(path), label=e.label, category=e.category,
            instrument=e.instrument, smr_db=e.smr_db, seed=e.seed,
            source_id=clip.source_id))
    mpath = out_dir / manifest_name
    rendered.write(mpath)
    return mpath
