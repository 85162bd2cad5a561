"""Network assembly, parameter management, and the portable weight format.

Topology (900x120 log-mel input):
  [conv 3x3 -> relu -> maxpool 2x2 -> dropout 0.3] x 3
  conv 3x3 -> relu -> global max pool
  dense -> relu, dense -> relu, dense(1) -> sigmoid

The weight file ("MNW1") carries the featurization tensors alongside the
trainable parameters so a single file fully determines inference.
"""

from __future__ import annotations

import io
import struct
import zlib
from typing import Optional

import numpy as np

from . import nn_core
from .audio_io import AudioClip
from .errors import ContractViolation, FormatError, IntegrityError, TopologyError
from .featurize import FeaturePlan, LogMelFeature, featurize_clip

DROPOUT_RATE = 0.3

# name -> shape of every trainable tensor, in serialization order.
TRAINABLE_SHAPES = {
    "conv1.kernels": (3, 3, 1, 32),
    "conv1.bias": (32,),
    "conv2.kernels": (3, 3, 32, 32),
    "conv2.bias": (32,),
    "conv3.kernels": (3, 3, 32, 32),
    "conv3.bias": (32,),
    "conv4.kernels": (3, 3, 32, 64),
    "conv4.bias": (64,),
    "dense1.weights": (64, 64),
    "dense1.bias": (64,),
    "dense2.weights": (64, 64),
    "dense2.bias": (64,),
    "dense_out.weights": (64, 1),
    "dense_out.bias": (1,),
}

FEATURE_TENSOR_NAMES = ("feat.real_basis", "feat.imag_basis", "feat.mel_weights", "feat.window")

MAGIC = b"MNW1"
FORMAT_VERSION = 1


def glorot_uniform(shape, fan_in, fan_out, rng):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def init_params(rng) -> dict:
    """Glorot-uniform kernels/weights, zero biases."""
    params = {}
    for name, shape in TRAINABLE_SHAPES.items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
        elif len(shape) == 4:
            kh, kw, cin, cout = shape
            params[name] = glorot_uniform(shape, kh * kw * cin, kh * kw * cout, rng)
        else:
            params[name] = glorot_uniform(shape, shape[0], shape[1], rng)
    return params


def zero_params() -> dict:
    return {n: np.zeros(s, dtype=np.float32) for n, s in TRAINABLE_SHAPES.items()}


def _conv_names(params):
    names = sorted({k.split(".")[0] for k in params if k.startswith("conv")})
    return names  # conv1..convN, last one has no pool/dropout


def network_forward(params, feats, training=False, rng=None, dropout_rate=DROPOUT_RATE,
                    trace=None, cache=None):
    """Run the CNN head on log-mel features (N, F, M) -> probabilities (N,).

    Layer dims are inferred from the parameter shapes, so reduced-width
    parameter sets (used by gradient checking) run through the same code.
    `trace`, if a list, collects per-layer output shapes. `cache`, if a
    dict, collects activations for network_backward.
    """
    feats = np.asarray(feats)
    if feats.ndim == 2:
        feats = feats[None]
    x = feats[..., None]  # (N, F, M, 1)
    n_convs = len(_conv_names(params))
    if trace is not None:
        trace.append(("input", feats.shape[1:]))
    for i in range(1, n_convs + 1):
        k, b = params[f"conv{i}.kernels"], params[f"conv{i}.bias"]
        x_in = x
        patches = None
        if cache is not None:
            z, patches = nn_core.conv2d(x_in, k, b, keep_patches=True)
        else:
            z = nn_core.conv2d(x_in, k, b)
        a = nn_core.relu(z, out=z)  # z not needed past its sign, kept as a
        if trace is not None:
            trace.append((f"conv{i}", a.shape[1:]))
        if i < n_convs:
            p = nn_core.maxpool2x2(a)
            d, mask = nn_core.dropout(p, dropout_rate, training, rng, return_mask=True)
            if trace is not None:
                trace.append((f"pool{i}", p.shape[1:]))
            if cache is not None:
                cache[f"block{i}"] = (x_in, a, mask, patches)
            x = d
        else:
            if cache is not None:
                cache[f"block{i}"] = (x_in, a, None, patches)
            x = a
    g = nn_core.global_max_pool(x)
    if trace is not None:
        trace.append(("global_max_pool", g.shape[1:]))
    h = g
    for name in ("dense1", "dense2"):
        w, b = params[f"{name}.weights"], params[f"{name}.bias"]
        z = nn_core.dense(h, w, b)
        a = nn_core.relu(z)
        if trace is not None:
            trace.append((name, a.shape[1:]))
        if cache is not None:
            cache[name] = (h, a)
        h = a
    logit = nn_core.dense(h, params["dense_out.weights"], params["dense_out.bias"])[:, 0]
    if trace is not None:
        trace.append(("dense_out", (1,)))
    if cache is not None:
        cache["head"] = (h, x)
        cache["n_convs"] = n_convs
    prob = nn_core.sigmoid(logit)
    return prob


def network_backward(params, cache, d_logit, need_feature_grad=False):
    """Gradients of a scalar loss w.r.t. every trainable parameter.

    d_logit is dL/dlogit, shape (N,). Returns a dict mirroring params;
    with need_feature_grad the dict also carries "_d_features", the
    gradient w.r.t. the log-mel input (for featurizer training).
    """
    if "head" not in cache:
        raise ContractViolation("forward cache missing")
    grads = {}
    n_convs = cache["n_convs"]
    h_last, conv_out = cache["head"]
    d = np.asarray(d_logit)[:, None]  # (N,1)
    dw, db, dh = nn_core.dense_backward(h_last, params["dense_out.weights"], d)
    grads["dense_out.weights"], grads["dense_out.bias"] = dw, db
    for name in ("dense2", "dense1"):
        x_in, a = cache[name]
        dz = nn_core.relu_backward(a, dh)
        dw, db, dh = nn_core.dense_backward(x_in, params[f"{name}.weights"], dz)
        grads[f"{name}.weights"], grads[f"{name}.bias"] = dw, db
    d_spatial = nn_core.global_max_pool_backward(conv_out, dh)
    for i in range(n_convs, 0, -1):
        x_in, a, mask, patches = cache[f"block{i}"]
        if i < n_convs:
            dp = nn_core.dropout_backward(mask, d_spatial)
            da = nn_core.maxpool2x2_backward(a, dp)
        else:
            da = d_spatial
        dz = nn_core.relu_backward(a, da)
        need_d_input = i > 1 or need_feature_grad
        dk, db, d_spatial = nn_core.conv2d_backward(
            x_in, params[f"conv{i}.kernels"], dz, need_input_grad=need_d_input,
            patches=patches)
        grads[f"conv{i}.kernels"], grads[f"conv{i}.bias"] = dk, db
    if need_feature_grad:
        grads["_d_features"] = d_spatial[..., 0]
    return grads


class MusicNetModel:
    """Feature plan + trainable parameters + run mode."""

    def __init__(self, feature_plan: Optional[FeaturePlan] = None, params: Optional[dict] = None,
                 mode: str = "infer"):
        self.feature_plan = feature_plan if feature_plan is not None else FeaturePlan()
        self.params = params if params is not None else zero_params()
        if mode not in ("infer", "train"):
            raise ContractViolation(f"bad mode {mode!r}")
        self.mode = mode
        validate_topology(self.params)

    @classmethod
    def init_random(cls, seed: int = 0, mode: str = "infer") -> "MusicNetModel":
        return cls(params=init_params(np.random.default_rng(seed)), mode=mode)

    def featurize(self, clip: AudioClip) -> LogMelFeature:
        return featurize_clip(clip, self.feature_plan)

    def forward(self, clip: AudioClip, rng=None, trace=None) -> float:
        """Raw conditioned clip -> probability of music."""
        training = self.mode == "train"
        if training and rng is None:
            raise ContractViolation("train-mode forward needs an rng")
        feat = self.featurize(clip)
        if trace is not None:
            trace.append(("featurize", feat.values.shape))
        prob = network_forward(self.params, feat.values[None], training=training,
                               rng=rng, trace=trace)
        return float(prob[0])

    def forward_features(self, feats, training=False, rng=None, cache=None):
        return network_forward(self.params, feats, training=training, rng=rng, cache=cache)

    def count_parameters(self) -> dict:
        trainable = sum(int(np.prod(v.shape)) for v in self.params.values())
        fp = self.feature_plan
        frozen = fp.real_basis.size + fp.imag_basis.size + fp.mel_weights.size + fp.window.size
        return {"trainable": trainable, "frozen": int(frozen)}

    def save_weights(self, sink) -> None:
        save_weights(self, sink)


def validate_topology(params: dict) -> None:
    expected = set(TRAINABLE_SHAPES)
    got = set(params)
    if got != expected:
        missing = expected - got
        extra = got - expected
        raise TopologyError(f"tensor set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, shape in TRAINABLE_SHAPES.items():
        if tuple(params[name].shape) != shape:
            raise TopologyError(f"{name}: shape {params[name].shape} != {shape}")


def _feature_tensors(plan: FeaturePlan) -> dict:
    return {
        "feat.real_basis": plan.real_basis,
        "feat.imag_basis": plan.imag_basis,
        "feat.mel_weights": plan.mel_weights,
        "feat.window": plan.window,
    }


def save_weights(model: MusicNetModel, sink) -> None:
    """Write the MNW1 container: header, tensor records, trailing CRC32."""
    tensors = {**_feature_tensors(model.feature_plan), **model.params}
    body = io.BytesIO()
    body.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        nb = name.encode("utf-8")
        v = np.ascontiguousarray(value, dtype="<f4")
        body.write(struct.pack("<H", len(nb)))
        body.write(nb)
        body.write(struct.pack("<BB", 0, v.ndim))
        for d in v.shape:
            body.write(struct.pack("<I", d))
        body.write(v.tobytes())
    payload = body.getvalue()
    sink.write(MAGIC)
    sink.write(struct.pack("<I", FORMAT_VERSION))
    sink.write(payload)
    sink.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_weights(source) -> MusicNetModel:
    """Parse and validate an MNW1 file; never returns a partial model."""
    data = source.read()
    if len(data) < 8 or data[:4] != MAGIC:
        raise FormatError("bad magic")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    if len(data) < 16:
        raise FormatError("truncated file")
    payload, crc_bytes = data[8:-4], data[-4:]
    tensors = {}
    pos = 0
    try:
        (count,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            name = payload[pos : pos + nlen].decode("utf-8")
            if len(payload[pos : pos + nlen]) != nlen:
                raise FormatError("truncated tensor name")
            pos += nlen
            dtype_code, rank = struct.unpack_from("<BB", payload, pos)
            pos += 2
            if dtype_code != 0:
                raise FormatError(f"unknown dtype code {dtype_code}")
            dims = struct.unpack_from(f"<{rank}I", payload, pos)
            pos += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            buf = payload[pos : pos + 4 * size]
            if len(buf) != 4 * size:
                raise FormatError("truncated tensor payload")
            pos += 4 * size
            tensors[name] = np.frombuffer(buf, dtype="<f4").reshape(dims).copy()
    except struct.error as exc:
        raise FormatError(f"truncated file: {exc}") from None
    (crc_stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise IntegrityError("payload CRC mismatch")
    for fname in FEATURE_TENSOR_NAMES:
        if fname not in tensors:
            raise TopologyError(f"missing featurization tensor {fname}")
    real = tensors["feat.real_basis"]
    n_fft, n_bins = real.shape
    mel = tensors["feat.mel_weights"]
    if tensors["feat.imag_basis"].shape != real.shape or mel.shape[0] != n_bins:
        raise TopologyError("featurization tensor shapes inconsistent")
    plan = FeaturePlan(
        n_fft=n_fft,
        n_bins=n_bins,
        n_mels=mel.shape[1],
        real_basis=real,
        imag_basis=tensors["feat.imag_basis"],
        window=tensors["feat.window"],
        mel_weights=mel,
    )
    params = {k: v for k, v in tensors.items() if not k.startswith("feat.")}
    return MusicNetModel(feature_plan=plan, params=params, mode="infer")


def save_weights_file(model: MusicNetModel, path) -> None:
    with open(path, "wb") as f:
        save_weights(model, f)


def load_weights_file(path) -> MusicNetModel:
    with open(path, "rb") as f:
        return load_weights(f)
