"""A small dependency-free convolutional network on numpy.

Forward inference, exact analytic backprop, and SGD training for the
desk-scale experiments. Each layer is conv -> optional ReLU -> optional
2x2 max-pool; the head is global average pooling followed by a linear map,
so class-score gradients at the last layer have a closed form that the
attribution code can be checked against.

Everything is float64 and deterministic: given the same seed, forward
traces, gradients, and trained parameters are bit-identical.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from os import PathLike
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .rng import CounterStream
from .tensors import (
    ActivationVolume,
    CaptureConfig,
    RawGrid,
    read_array,
    write_array,
)

# instrumentation: incremented on every backward pass, so label-free code
# paths can assert they never touch gradients
counters = {"backward_passes": 0}

Embedding = np.ndarray  # 1-d feature vector, length = final conv channels


class NumericError(RuntimeError):
    """Raised when training or inference produces non-finite numbers."""


@dataclass
class ConvLayer:
    kernels: np.ndarray  # (out_channels, in_channels, kh, kw)
    bias: np.ndarray  # (out_channels,)
    stride: int = 1
    padding: int = 1
    relu: bool = True
    pool: bool = True

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]


@dataclass
class TinyCnnModel:
    layers: list[ConvLayer]
    head_weight: np.ndarray  # (classes, features)
    head_bias: np.ndarray  # (classes,)
    seed: int = 0

    def __post_init__(self):
        if not self.layers:
            raise ValueError("model needs at least one convolutional layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_channels != nxt.in_channels:
                raise ValueError(
                    f"channel mismatch: {prev.out_channels} -> {nxt.in_channels}"
                )
        if self.head_weight.shape[1] != self.layers[-1].out_channels:
            raise ValueError("head feature count must equal final conv channels")
        if self.head_weight.shape[0] != self.head_bias.shape[0]:
            raise ValueError("head weight/bias class counts disagree")
        for arr in self._parameters():
            if not np.all(np.isfinite(arr)):
                raise ValueError("model parameters contain NaN or Inf")

    def _parameters(self) -> list[np.ndarray]:
        params = []
        for layer in self.layers:
            params.append(layer.kernels)
            params.append(layer.bias)
        params.append(self.head_weight)
        params.append(self.head_bias)
        return params

    @property
    def classes(self) -> int:
        return self.head_weight.shape[0]

    @property
    def features(self) -> int:
        return self.head_weight.shape[1]

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    def embed(self, image) -> Embedding:
        return forward(self, image).embedding

    def embed_batch(self, images: np.ndarray) -> np.ndarray:
        """Embeddings for a (B, C, H, W) batch; rows match input order."""
        caches = _forward_batch(self, np.asarray(images, dtype=np.float64))
        return caches["embedding"]


@dataclass
class ForwardTrace:
    """Everything one forward pass produced.

    ``layers`` holds each layer's post-activation volume (after ReLU and
    pooling); ``conv_outputs`` the raw convolution outputs, kept for
    pre-activation capture and for routing gradients through ReLU gates.
    """

    input: np.ndarray
    layers: list[ActivationVolume]
    conv_outputs: list[np.ndarray]
    pool_indices: list
    embedding: Embedding
    logits: np.ndarray

    def volume(self, capture: CaptureConfig) -> ActivationVolume:
        """The activation volume selected by a capture config."""
        if not 0 <= capture.layer_index < len(self.layers):
            raise ValueError(f"no convolutional layer {capture.layer_index}")
        if capture.post_activation:
            return self.layers[capture.layer_index]
        return ActivationVolume(self.conv_outputs[capture.layer_index])


def default_model(seed: int = 0, in_channels: int = 1, classes: int = 13) -> TinyCnnModel:
    """The desk-scale default: 3 conv layers (8, 16, 32 channels, 3x3,
    stride 1, pad 1, ReLU, 2x2 pool) and a GAP + linear head.

    On 64x64 inputs the final activation grid is 8x8. Weights use
    fan-in-scaled uniform init, bound sqrt(6 / fan_in); biases start at 0.
    """
    return build_model(seed, in_channels, (8, 16, 32), classes)


def build_model(
    seed: int,
    in_channels: int,
    conv_channels: Sequence[int],
    classes: int,
    kernel: int = 3,
    stride: int = 1,
    padding: int = 1,
    relu: bool = True,
    pool: bool = True,
) -> TinyCnnModel:
    layers = []
    prev = in_channels
    for i, out in enumerate(conv_channels):
        fan_in = prev * kernel * kernel
        bound = np.sqrt(6.0 / fan_in)
        stream = CounterStream(seed, f"init/layer{i}/kernels")
        u = stream.next_units(out * prev * kernel * kernel)
        kernels = ((2.0 * u - 1.0) * bound).reshape(out, prev, kernel, kernel)
        layers.append(
            ConvLayer(
                kernels=kernels,
                bias=np.zeros(out),
                stride=stride,
                padding=padding,
                relu=relu,
                pool=pool,
            )
        )
        prev = out
    bound = np.sqrt(6.0 / prev)
    u = CounterStream(seed, "init/head/weight").next_units(classes * prev)
    head_w = ((2.0 * u - 1.0) * bound).reshape(classes, prev)
    return TinyCnnModel(layers=layers, head_weight=head_w, head_bias=np.zeros(classes), seed=seed)


# --- batched primitives ---


def _conv_windows(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    B, C, Hp, Wp = xp.shape
    oh = (Hp - kh) // stride + 1
    ow = (Wp - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"kernel {kh}x{kw} does not fit input {x.shape[2]}x{x.shape[3]}")
    s0, s1, s2, s3 = xp.strides
    win = as_strided(
        xp, (B, oh, ow, C, kh, kw), (s0, s2 * stride, s3 * stride, s1, s2, s3)
    )
    return xp, win, oh, ow


def _conv_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    _, win, _, _ = _conv_windows(x, *layer.kernels.shape[2:], layer.stride, layer.padding)
    z = np.tensordot(win, layer.kernels, axes=([3, 4, 5], [1, 2, 3]))
    return z.transpose(0, 3, 1, 2) + layer.bias[None, :, None, None]


def _conv_backward_data(dz: np.ndarray, layer: ConvLayer, in_shape) -> np.ndarray:
    B, C, H, W = in_shape
    kh, kw = layer.kernels.shape[2:]
    stride, pad = layer.stride, layer.padding
    oh, ow = dz.shape[2], dz.shape[3]
    dcols = np.tensordot(dz.transpose(0, 2, 3, 1), layer.kernels, axes=([3], [0]))
    dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad))
    for u in range(kh):
        for v in range(kw):
            dxp[:, :, u : u + stride * oh : stride, v : v + stride * ow : stride] += (
                dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            )
    if pad:
        return dxp[:, :, pad : pad + H, pad : pad + W]
    return dxp


def _conv_backward_params(dz: np.ndarray, x: np.ndarray, layer: ConvLayer):
    _, win, _, _ = _conv_windows(x, *layer.kernels.shape[2:], layer.stride, layer.padding)
    dk = np.tensordot(dz, win, axes=([0, 2, 3], [0, 1, 2]))
    db = dz.sum(axis=(0, 2, 3))
    return dk, db


def _pool_forward(a: np.ndarray):
    B, C, H, W = a.shape
    if H % 2 or W % 2:
        raise ValueError(f"2x2 max-pool needs even spatial dims, got {H}x{W}")
    win = a.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=4)  # ties resolve to the first (row-major) position
    y = np.take_along_axis(win, idx[..., None], axis=4)[..., 0]
    return y, idx


def _pool_backward(dy: np.ndarray, idx: np.ndarray, in_shape) -> np.ndarray:
    B, C, H, W = in_shape
    dwin = np.zeros((B, C, H // 2, W // 2, 4))
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=4)
    return (
        dwin.reshape(B, C, H // 2, W // 2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, H, W)
    )


def _forward_batch(model: TinyCnnModel, x: np.ndarray) -> dict:
    if x.ndim != 4:
        raise ValueError(f"expected (B, C, H, W) input, got shape {x.shape}")
    if x.shape[1] != model.in_channels:
        raise ValueError(
            f"input has {x.shape[1]} channels, first layer expects {model.in_channels}"
        )
    inputs, conv_outs, post_acts, pool_idx = [], [], [], []
    for layer in model.layers:
        inputs.append(x)
        z = _conv_forward(x, layer)
        conv_outs.append(z)
        a = np.maximum(z, 0.0) if layer.relu else z
        if layer.pool:
            y, idx = _pool_forward(a)
        else:
            y, idx = a, None
        post_acts.append(y)
        pool_idx.append(idx)
        x = y
    embedding = x.mean(axis=(2, 3))
    logits = embedding @ model.head_weight.T + model.head_bias
    return {
        "inputs": inputs,
        "conv_outputs": conv_outs,
        "post_acts": post_acts,
        "pool_indices": pool_idx,
        "embedding": embedding,
        "logits": logits,
    }


def _as_input(model: TinyCnnModel, image) -> np.ndarray:
    if isinstance(image, RawGrid):
        arr = image.values[None]
    else:
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected a (C, H, W) or (H, W) image, got shape {arr.shape}")
    return arr.astype(np.float64)


def forward(model: TinyCnnModel, image) -> ForwardTrace:
    """Run one image through the network and keep every activation."""
    x = _as_input(model, image)
    caches = _forward_batch(model, x[None])
    return ForwardTrace(
        input=x,
        layers=[ActivationVolume(y[0]) for y in caches["post_acts"]],
        conv_outputs=[z[0] for z in caches["conv_outputs"]],
        pool_indices=[None if i is None else i[0] for i in caches["pool_indices"]],
        embedding=caches["embedding"][0],
        logits=caches["logits"][0],
    )


def backward_class_score(
    model: TinyCnnModel,
    trace: ForwardTrace,
    class_index: int,
    target_layer: Union[CaptureConfig, int],
) -> np.ndarray:
    """Exact gradient of one logit w.r.t. a layer's activation volume.

    Returns a (K, H, W) array matching the captured volume's shape. With the
    GAP + linear head, the gradient at the last layer's post-activation is
    w[c, k] / (H * W) at every spatial position.
    """
    capture = (
        target_layer
        if isinstance(target_layer, CaptureConfig)
        else CaptureConfig(layer_index=int(target_layer))
    )
    t = capture.layer_index
    if not 0 <= t < len(model.layers):
        raise ValueError(f"no convolutional layer {t}")
    if not 0 <= class_index < model.classes:
        raise ValueError(f"class index {class_index} out of range ({model.classes} classes)")
    counters["backward_passes"] += 1

    last = trace.layers[-1].values
    hw = last.shape[1] * last.shape[2]
    d = np.broadcast_to(
        (model.head_weight[class_index] / hw)[:, None, None], last.shape
    ).copy()

    for l in range(len(model.layers) - 1, t, -1):
        layer = model.layers[l]
        if layer.pool:
            d = _pool_backward(
                d[None], trace.pool_indices[l][None], (1,) + trace.conv_outputs[l].shape
            )[0]
        if layer.relu:
            d = d * (trace.conv_outputs[l] > 0.0)
        in_shape = (trace.input if l == 0 else trace.layers[l - 1].values).shape
        d = _conv_backward_data(d[None], layer, (1,) + in_shape)[0]

    if capture.post_activation:
        return d
    layer = model.layers[t]
    if layer.pool:
        d = _pool_backward(
            d[None], trace.pool_indices[t][None], (1,) + trace.conv_outputs[t].shape
        )[0]
    if layer.relu:
        d = d * (trace.conv_outputs[t] > 0.0)
    return d


def _forward_from(model: TinyCnnModel, layer_index: int, volume: np.ndarray):
    """Resume the forward pass from a layer's post-activation volume.

    Returns (logits, gate fingerprint). The fingerprint records downstream
    ReLU signs and pool argmax choices; comparing fingerprints detects when
    a perturbation crossed a kink.
    """
    x = volume[None]
    fingerprint = []
    for layer in model.layers[layer_index + 1 :]:
        z = _conv_forward(x, layer)
        if layer.relu:
            fingerprint.append(z > 0.0)
            a = np.maximum(z, 0.0)
        else:
            a = z
        if layer.pool:
            x, idx = _pool_forward(a)
            fingerprint.append(idx)
        else:
            x = a
    embedding = x.mean(axis=(2, 3))
    logits = embedding @ model.head_weight.T + model.head_bias
    return logits[0], fingerprint


def _same_gates(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    checked: int
    skipped: int

    def __str__(self):
        return (
            f"max_rel_err={self.max_rel_err:.3e} over {self.checked} coords "
            f"({self.skipped} skipped at activation kinks)"
        )


def grad_check(
    model: TinyCnnModel,
    image,
    class_index: int,
    epsilon: float,
    layer_index: int | None = None,
    n_coords: int = 200,
    seed: int = 0,
) -> GradCheckReport:
    """Max relative error between analytic and central-difference gradients.

    Probes a random subsample of activation coordinates at the target layer
    (default: first layer, so the full downstream stack is exercised).
    Coordinates whose probe flips a downstream ReLU gate or pool argmax are
    skipped: finite differences are ill-defined across a kink and the
    subgradient mismatch there is not a bug. Relative error uses
    denominator max(|fd|, |analytic|, 1e-8).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    t = 0 if layer_index is None else layer_index
    trace = forward(model, image)
    volume = trace.layers[t].values
    analytic = backward_class_score(model, trace, class_index, CaptureConfig(t))
    _, base_gates = _forward_from(model, t, volume)

    flat = volume.reshape(-1)
    order = CounterStream(seed, "grad-check/coords").permutation(flat.size)
    max_rel = 0.0
    checked = 0
    skipped = 0
    for coord in order:
        if checked >= n_coords:
            break
        bumped = flat.copy()
        bumped[coord] += epsilon
        lp, gates_p = _forward_from(model, t, bumped.reshape(volume.shape))
        bumped[coord] -= 2.0 * epsilon
        lm, gates_m = _forward_from(model, t, bumped.reshape(volume.shape))
        if not (_same_gates(gates_p, base_gates) and _same_gates(gates_m, base_gates)):
            skipped += 1
            continue
        fd = (lp[class_index] - lm[class_index]) / (2.0 * epsilon)
        g = analytic.reshape(-1)[coord]
        rel = abs(fd - g) / max(abs(fd), abs(g), 1e-8)
        max_rel = max(max_rel, rel)
        checked += 1
    return GradCheckReport(max_rel_err=max_rel, checked=checked, skipped=skipped)


# --- training ---


@dataclass
class TrainResult:
    model: TinyCnnModel
    epoch_losses: list[float] = field(default_factory=list)


def _softmax_ce(logits: np.ndarray, labels: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(len(labels)), labels].mean()
    dlogits = np.exp(log_probs)
    dlogits[np.arange(len(labels)), labels] -= 1.0
    return loss, dlogits / len(labels)


def _backward_batch(model: TinyCnnModel, caches: dict, dlogits: np.ndarray):
    counters["backward_passes"] += 1
    emb = caches["embedding"]
    grads = {
        "head_weight": dlogits.T @ emb,
        "head_bias": dlogits.sum(axis=0),
        "layers": [],
    }
    d = dlogits @ model.head_weight
    last = caches["post_acts"][-1]
    d = np.broadcast_to(
        (d / (last.shape[2] * last.shape[3]))[:, :, None, None], last.shape
    ).copy()
    for l in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[l]
        if layer.pool:
            d = _pool_backward(d, caches["pool_indices"][l], caches["conv_outputs"][l].shape)
        if layer.relu:
            d = d * (caches["conv_outputs"][l] > 0.0)
        dk, db = _conv_backward_params(d, caches["inputs"][l], layer)
        grads["layers"].append((dk, db))
        if l > 0:
            d = _conv_backward_data(d, layer, caches["inputs"][l].shape)
    grads["layers"].reverse()
    return grads


def train_sgd(
    model: TinyCnnModel,
    dataset: Sequence[tuple[np.ndarray, int]],
    epochs: int,
    learning_rate: float,
    batch_size: int,
    seed: int,
) -> TrainResult:
    """Plain SGD on softmax cross-entropy. Deterministic under the seed.

    The input model is untouched; a trained copy is returned together with
    the mean loss per epoch. Aborts with NumericError if the loss leaves
    the finite range.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    labels = np.asarray([int(lab) for _, lab in dataset])
    if labels.min() < 0 or labels.max() >= model.classes:
        raise ValueError("labels must lie in [0, classes)")
    images = np.stack([_as_input(model, img) for img, _ in dataset]).astype(np.float64)

    trained = copy.deepcopy(model)
    shuffle = CounterStream(seed, "train/shuffle")
    losses = []
    n = len(dataset)
    for epoch in range(epochs):
        perm = shuffle.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            batch = perm[start : start + batch_size]
            caches = _forward_batch(trained, images[batch])
            loss, dlogits = _softmax_ce(caches["logits"], labels[batch])
            if not np.isfinite(loss):
                raise NumericError(
                    f"training loss became non-finite at epoch {epoch}, sample {start}"
                )
            total += loss * len(batch)
            grads = _backward_batch(trained, caches, dlogits)
            for layer, (dk, db) in zip(trained.layers, grads["layers"]):
                layer.kernels -= learning_rate * dk
                layer.bias -= learning_rate * db
            trained.head_weight -= learning_rate * grads["head_weight"]
            trained.head_bias -= learning_rate * grads["head_bias"]
        losses.append(total / n)
    return TrainResult(model=trained, epoch_losses=losses)


# --- checkpoint files ---

_CKPT_MAGIC = b"#tinycnn-checkpoint v1\n"


def save_checkpoint(path: Union[str, PathLike], model: TinyCnnModel) -> None:
    """Topology as a versioned text block, then parameter tensors."""
    topo = {
        "version": 1,
        "seed": model.seed,
        "classes": model.classes,
        "layers": [
            {
                "out_channels": layer.out_channels,
                "in_channels": layer.in_channels,
                "kernel": list(layer.kernels.shape[2:]),
                "stride": layer.stride,
                "padding": layer.padding,
                "relu": layer.relu,
                "pool": layer.pool,
            }
            for layer in model.layers
        ],
    }
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write((json.dumps(topo, sort_keys=True) + "\n").encode("utf-8"))
        for layer in model.layers:
            write_array(fh, layer.kernels)
            write_array(fh, layer.bias)
        write_array(fh, model.head_weight)
        write_array(fh, model.head_bias)


def load_checkpoint(path: Union[str, PathLike]) -> TinyCnnModel:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a tinycnn checkpoint: {magic!r}")
        topo = json.loads(fh.readline().decode("utf-8"))
        if topo.get("version") != 1:
            raise ValueError(f"unsupported checkpoint version {topo.get('version')!r}")
        layers = []
        for spec in topo["layers"]:
            kernels = read_array(fh)
            bias = read_array(fh)
            if list(kernels.shape) != [
                spec["out_channels"],
                spec["in_channels"],
            ] + list(spec["kernel"]):
                raise ValueError("checkpoint kernel shape disagrees with topology")
            layers.append(
                ConvLayer(
                    kernels=kernels,
                    bias=bias,
                    stride=spec["stride"],
                    padding=spec["padding"],
                    relu=spec["relu"],
                    pool=spec["pool"],
                )
            )
        head_w = read_array(fh)
        head_b = read_array(fh)
    return TinyCnnModel(layers=layers, head_weight=head_w, head_bias=head_b, seed=topo["seed"])
