"""Shared fixtures and oracle helpers for the test suite."""

import numpy as np
import pytest

from musicnet.audio_io import CLIP_SAMPLES, TARGET_RATE, AudioClip


@pytest.fixture(scope="session")
def plan():
    from musicnet.featurize import FeaturePlan

    return FeaturePlan()


@pytest.fixture(scope="session")
def zero_model():
    from musicnet.model import MusicNetModel

    return MusicNetModel()


@pytest.fixture(scope="session")
def random_model():
    from musicnet.model import MusicNetModel

    return MusicNetModel.init_random(seed=7)


def make_clip(kind="noise", seed=0, label=None):
    """A conditioned 9 s test clip (uniform noise / sine / silence)."""
    rng = np.random.default_rng(seed)
    if kind == "noise":
        x = rng.uniform(-0.5, 0.5, CLIP_SAMPLES).astype(np.float32)
    elif kind == "sine":
        t = np.arange(CLIP_SAMPLES) / TARGET_RATE
        x = (0.5 * np.sin(2 * np.pi * 1000.0 * t)).astype(np.float32)
    elif kind == "silence":
        x = np.zeros(CLIP_SAMPLES, dtype=np.float32)
    else:
        raise ValueError(kind)
    return AudioClip(x, TARGET_RATE, label=label, source_id=f"test:{kind}:{seed}")


def reference_logmel(clip, plan):
    """Independent log-mel oracle built on np.fft.rfft (no basis matrices)."""
    from musicnet.audio_io import frame_signal
    from musicnet.featurize import hann_window

    frames = frame_signal(clip).frames.astype(np.float64)
    w = hann_window(plan.n_fft)
    spec = np.fft.rfft(frames * w, axis=1)
    power = np.abs(spec) ** 2
    mel = power @ np.asarray(plan.mel_weights, dtype=np.float64)
    return np.log(np.maximum(mel, plan.log_floor))


def mann_whitney_auc(scores, labels):
    """Exhaustive pairwise AUC: P(pos > neg) + 0.5 P(pos == neg)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos = s[y == 1][:, None]
    neg = s[y == 0][None, :]
    return float((np.sum(pos > neg) + 0.5 * np.sum(pos == neg)) / (pos.size * neg.size))


def finite_difference_grad(f, x, eps=1e-6):
    """Dense central-difference gradient of scalar f at float64 array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g
