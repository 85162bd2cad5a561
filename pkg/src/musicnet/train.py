"""Desk-scale trainer: Adam + binary cross-entropy, with gradient checks.

Training operates on cached log-mel features (the featurization layer is
frozen by default). With train_featurizer=True the two spectrum matrices
are updated as well, which requires keeping raw frames per batch.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import nn_core
from .audio_io import LABEL_MUSIC, AudioClip, frame_signal
from .errors import ContractViolation, EmptyDataset, NonFiniteGradient
from .featurize import FeaturePlan, logmel
from .model import MusicNetModel, network_backward, network_forward, save_weights_file

PROB_CLAMP = 1e-7
MICRO_BATCH = 8  # clips backpropagated at once; gradients accumulate per batch


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    max_epochs: int = 30
    early_stop_patience: int = 5
    min_improvement: float = 1e-4
    seed: int = 0
    train_featurizer: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be >= 1")
        if self.lr < 0:
            raise ContractViolation("lr must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ContractViolation("betas must be in (0, 1)")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def bce_loss(p, y):
    """Binary cross-entropy with probability clamped to [1e-7, 1-1e-7]."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y)
    if not np.all((y == 0) | (y == 1)):
        raise ContractViolation("labels must be 0 or 1")
    return -(y * np.log(p) + (1 - y) * np.log(1 - p))


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> None:
    """One in-place Adam update; aborts without mutating on non-finite grads."""
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradient(f"non-finite gradient in {name}")
    state.t += 1
    t = state.t
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * (g * g)
        p -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps_adam)


@dataclass
class TrainingExample:
    """One labeled clip; features cached, waveform kept only if needed."""

    features: np.ndarray  # (n_frames, n_mels) float32
    y: int
    source_id: str = ""
    samples: Optional[np.ndarray] = None  # raw waveform, for featurizer training


def prepare_dataset(clips: Sequence[AudioClip], plan: FeaturePlan,
                    keep_waveforms: bool = False) -> List[TrainingExample]:
    out = []
    for clip in clips:
        if clip.label is None:
            raise ContractViolation(f"unlabeled clip {clip.source_id!r}")
        feat = logmel(frame_signal(clip), plan)
        out.append(TrainingExample(
            features=feat.values,
            y=1 if clip.label == LABEL_MUSIC else 0,
            source_id=clip.source_id,
            samples=clip.samples if keep_waveforms else None,
        ))
    return out


def balance_dataset(dataset: Sequence[TrainingExample], rng) -> List[TrainingExample]:
    """Equalize class counts by oversampling the minority class."""
    pos = [e for e in dataset if e.y == 1]
    neg = [e for e in dataset if e.y == 0]
    if not pos or not neg:
        raise EmptyDataset("both classes required for balanced training")
    small, large = (pos, neg) if len(pos) < len(neg) else (neg, pos)
    extra = [small[int(rng.integers(len(small)))] for _ in range(len(large) - len(small))]
    return list(dataset) + extra


def _featurizer_grads(plan: FeaturePlan, frames_batch, feat_cache, d_features):
    """Backprop d_features (N,F,M) through logmel into the two basis matrices."""
    re, im, mel = feat_cache
    d_mel = np.where(mel > plan.log_floor, d_features / np.maximum(mel, plan.log_floor), 0.0)
    d_power = d_mel @ plan.mel_weights.T
    d_re = 2.0 * re * d_power
    d_im = 2.0 * im * d_power
    n, f, _ = d_re.shape
    fb = frames_batch.reshape(n * f, -1)
    d_real = fb.T @ d_re.reshape(n * f, -1)
    d_imag = fb.T @ d_im.reshape(n * f, -1)
    return d_real.astype(np.float32), d_imag.astype(np.float32)


def _forward_features_from_frames(plan: FeaturePlan, frames_batch):
    re = frames_batch @ plan.real_basis
    im = frames_batch @ plan.imag_basis
    power = re * re + im * im
    mel = power @ plan.mel_weights
    feats = np.log(np.maximum(mel, plan.log_floor))
    return feats, (re, im, mel)


def batch_gradients(model: MusicNetModel, batch: Sequence[TrainingExample],
                    cfg: TrainConfig, rng) -> Tuple[dict, float, int]:
    """Mean-BCE gradients over one minibatch. Returns (grads, loss_sum, n_correct)."""
    n = len(batch)
    y = np.array([e.y for e in batch], dtype=np.float64)
    grads = {k: np.zeros_like(p, dtype=np.float64) for k, p in model.params.items()}
    plan = model.feature_plan
    if cfg.train_featurizer:
        grads["feat.real_basis"] = np.zeros_like(plan.real_basis, dtype=np.float64)
        grads["feat.imag_basis"] = np.zeros_like(plan.imag_basis, dtype=np.float64)
    loss_sum = 0.0
    n_correct = 0
    for s in range(0, n, MICRO_BATCH):
        sub = batch[s : s + MICRO_BATCH]
        ys = y[s : s + len(sub)]
        feat_cache = None
        frames_batch = None
        if cfg.train_featurizer:
            frames_batch = np.stack([
                frame_signal(AudioClip(e.samples, 16000)).frames for e in sub
            ])
            feats, feat_cache = _forward_features_from_frames(plan, frames_batch)
        else:
            feats = np.stack([e.features for e in sub])
        cache = {}
        p = network_forward(model.params, feats, training=True, rng=rng, cache=cache)
        loss_sum += float(bce_loss(p, ys).sum())
        n_correct += int(np.sum((p >= 0.5) == (ys == 1)))
        d_logit = (p - ys) / n  # gradient of batch-mean BCE through sigmoid
        sub_grads = network_backward(model.params, cache, d_logit,
                                     need_feature_grad=cfg.train_featurizer)
        for k in model.params:
            grads[k] += sub_grads[k]
        if cfg.train_featurizer:
            d_real, d_imag = _featurizer_grads(plan, frames_batch, feat_cache,
                                               sub_grads["_d_features"])
            grads["feat.real_basis"] += d_real
            grads["feat.imag_basis"] += d_imag
    return grads, loss_sum, n_correct


def train_epoch(model: MusicNetModel, dataset: Sequence[TrainingExample],
                cfg: TrainConfig, rng, state: Optional[AdamState] = None) -> dict:
    """One pass of shuffled minibatch SGD; returns {mean_loss, accuracy}."""
    if len(dataset) == 0:
        raise EmptyDataset("empty training dataset")
    if state is None:
        state = AdamState.for_params(model.params)
    train_params = dict(model.params)
    if cfg.train_featurizer:
        train_params["feat.real_basis"] = model.feature_plan.real_basis
        train_params["feat.imag_basis"] = model.feature_plan.imag_basis
        for k in ("feat.real_basis", "feat.imag_basis"):
            if k not in state.m:
                state.m[k] = np.zeros_like(train_params[k])
                state.v[k] = np.zeros_like(train_params[k])
    order = rng.permutation(len(dataset))
    loss_sum = 0.0
    n_correct = 0
    for s in range(0, len(order), cfg.batch_size):
        batch = [dataset[i] for i in order[s : s + cfg.batch_size]]
        grads, batch_loss, batch_correct = batch_gradients(model, batch, cfg, rng)
        adam_step(train_params, grads, state, cfg)
        loss_sum += batch_loss
        n_correct += batch_correct
    return {"mean_loss": loss_sum / len(dataset), "accuracy": n_correct / len(dataset)}


@dataclass
class FitResult:
    epochs_run: int
    history: List[dict]
    stopped_early: bool


def fit(model: MusicNetModel, dataset: Sequence[TrainingExample], cfg: TrainConfig,
        out_dir: Optional[Path] = None, balance: bool = True,
        target_loss: Optional[float] = None) -> FitResult:
    """Train until the loss saturates, max_epochs, or target_loss is reached.

    Writes per-epoch checkpoints and a metrics CSV when out_dir is given.
    """
    rng = np.random.default_rng(cfg.seed)
    if balance:
        dataset = balance_dataset(dataset, rng)
    state = AdamState.for_params(model.params)
    model.mode = "train"
    history = []
    best_loss = math.inf
    stale = 0
    stopped_early = False
    csv_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "metrics.csv"
        with open(csv_path, "w", newline="") as f:
            csv.writer(f).writerow(["epoch", "mean_loss", "accuracy"])
    for epoch in range(1, cfg.max_epochs + 1):
        metrics = train_epoch(model, dataset, cfg, rng, state)
        history.append(metrics)
        if csv_path is not None:
            with open(csv_path, "a", newline="") as f:
                csv.writer(f).writerow([epoch, metrics["mean_loss"], metrics["accuracy"]])
        if out_dir is not None:
            save_weights_file(model, out_dir / f"epoch_{epoch:03d}.mnw")
        if target_loss is not None and metrics["mean_loss"] <= target_loss:
            break
        if best_loss - metrics["mean_loss"] < cfg.min_improvement:
            stale += 1
            if stale >= cfg.early_stop_patience:
                stopped_early = True
                break
        else:
            stale = 0
        best_loss = min(best_loss, metrics["mean_loss"])
    model.mode = "infer"
    return FitResult(epochs_run=len(history), history=history, stopped_early=stopped_early)


def load_manifest(path) -> List[dict]:
    """JSON-lines manifest: one {path, label, source_id, ...} record per clip."""
    records = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def grad_check(model: MusicNetModel, features, y: int, epsilon: float = 1e-4,
               samples_per_layer: int = 200, seed: int = 0) -> float:
    """Central finite differences vs analytic gradients; worst relative error.

    Runs in float64. Samples at least `samples_per_layer` entries per
    parameter tensor; samples whose +/- epsilon forwards land on different
    relu/pool configurations (a kink between the probe points) are excluded.
    """
    rng = np.random.default_rng(seed)
    params = {k: v.astype(np.float64) for k, v in model.params.items()}
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 2:
        feats = feats[None]
    yv = float(y)

    def loss_and_signature(ps):
        cache = {}
        p = network_forward(ps, feats, training=False, cache=cache)
        loss = float(bce_loss(p, yv)[0])
        sig = []
        n_convs = cache["n_convs"]
        for i in range(1, n_convs + 1):
            a = cache[f"block{i}"][1]
            sig.append(a > 0)
            if i < n_convs:
                sig.append(nn_core.maxpool2x2_argmax(a))
        conv_out = cache["head"][1]
        sig.append(conv_out.reshape(conv_out.shape[0], -1, conv_out.shape[-1]).argmax(axis=1))
        sig.append(cache["dense1"][1] > 0)
        sig.append(cache["dense2"][1] > 0)
        return loss, sig

    cache = {}
    p = network_forward(params, feats, training=False, cache=cache)
    d_logit = np.asarray([p[0] - yv])
    analytic = network_backward(params, cache, d_logit)

    worst = 0.0
    for name, tensor in params.items():
        flat = tensor.reshape(-1)
        k = min(samples_per_layer, flat.size)
        idxs = rng.choice(flat.size, size=k, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + epsilon
            lp, sig_p = loss_and_signature(params)
            flat[i] = orig - epsilon
            lm, sig_m = loss_and_signature(params)
            flat[i] = orig
            if any(np.any(a != b) for a, b in zip(sig_p, sig_m)):
                continue  # relu kink between the probe points
            fd = (lp - lm) / (2 * epsilon)
            an = float(analytic[name].reshape(-1)[i])
            denom = max(abs(fd), abs(an), 1e-8)
            worst = max(worst, abs(fd - an) / denom)
    return worst
