"""Compact feed-forward classifier with exact hand-derived backpropagation.

Supports dense, conv2d, relu, flatten, and (non-overlapping) average-pool
layers. The forward pass records per-layer feature maps at fixed capture
points: the output of every relu plus the final logits. Training is plain
SGD with momentum under either a step-decay or cosine learning-rate
schedule, fully deterministic for a given seed.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses
from .data import batch_indices
from .errors import (
    ConsistencyError,
    DivergenceError,
    FormatError,
    InsufficientDataError,
    ShapeError,
)
from .linalg import load_tensor, save_tensor

_OE_STREAM_OFFSET = 1_000_000_007


@dataclass(frozen=True)
class LayerSpec:
    """One layer. Unused fields stay at their defaults for a given kind."""

    kind: str
    in_dim: int = 0
    out_dim: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    pool: int = 0


def dense(in_dim: int, out_dim: int) -> LayerSpec:
    return LayerSpec(kind="dense", in_dim=in_dim, out_dim=out_dim)


def conv2d(in_channels: int, out_channels: int, kernel: int, stride: int = 1,
           padding: int = 0) -> LayerSpec:
    return LayerSpec(kind="conv2d", in_channels=in_channels,
                     out_channels=out_channels, kernel=kernel, stride=stride,
                     padding=padding)


def relu() -> LayerSpec:
    return LayerSpec(kind="relu")


def flatten() -> LayerSpec:
    return LayerSpec(kind="flatten")


def avgpool(pool: int) -> LayerSpec:
    """Non-overlapping average pooling (kernel == stride == pool)."""
    return LayerSpec(kind="avgpool", pool=pool)


def _infer_shapes(layers, input_shape, num_classes):
    """Propagate the activation shape through every layer, validating composition."""
    shape = tuple(int(e) for e in input_shape)
    shapes = [shape]
    for i, spec in enumerate(layers):
        if spec.kind == "dense":
            if len(shape) != 1 or shape[0] != spec.in_dim:
                raise ShapeError(f"layer {i}: dense({spec.in_dim}) cannot follow {shape}")
            shape = (spec.out_dim,)
        elif spec.kind == "conv2d":
            if len(shape) != 3 or shape[0] != spec.in_channels:
                raise ShapeError(f"layer {i}: conv2d expects ({spec.in_channels}, H, W), got {shape}")
            _, h, w = shape
            h2 = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
            w2 = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
            if h2 < 1 or w2 < 1:
                raise ShapeError(f"layer {i}: kernel {spec.kernel} too large for {shape}")
            shape = (spec.out_channels, h2, w2)
        elif spec.kind == "relu":
            pass
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "avgpool":
            if len(shape) != 3:
                raise ShapeError(f"layer {i}: avgpool expects (C, H, W), got {shape}")
            c, h, w = shape
            if h % spec.pool or w % spec.pool:
                raise ShapeError(f"layer {i}: pool {spec.pool} does not divide {h}x{w}")
            shape = (c, h // spec.pool, w // spec.pool)
        else:
            raise ShapeError(f"layer {i}: unknown kind {spec.kind!r}")
        shapes.append(shape)
    if shapes[-1] != (num_classes,):
        raise ShapeError(f"final layer produces {shapes[-1]}, expected ({num_classes},)")
    return shapes


@dataclass
class Network:
    layers: list[LayerSpec]
    params: dict[int, dict[str, np.ndarray]]
    num_classes: int
    input_shape: tuple[int, ...]
    seed: int
    activation_shapes: list[tuple[int, ...]] = field(repr=False, default_factory=list)

    @property
    def capture_layers(self) -> list[int]:
        """Indices of layers whose output is captured (every relu)."""
        return [i for i, s in enumerate(self.layers) if s.kind == "relu"]

    @property
    def num_captures(self) -> int:
        """Capture count: one per relu plus the logits."""
        return len(self.capture_layers) + 1

    def capture_shapes(self) -> list[tuple[int, ...]]:
        shapes = [self.activation_shapes[i + 1] for i in self.capture_layers]
        shapes.append((self.num_classes,))
        return shapes


def build_network(layers, input_shape, num_classes: int, seed: int) -> Network:
    """Create a network with Glorot-uniform weights and zero biases."""
    layers = list(layers)
    shapes = _infer_shapes(layers, input_shape, num_classes)
    rng = np.random.default_rng(seed)
    params: dict[int, dict[str, np.ndarray]] = {}
    for i, spec in enumerate(layers):
        if spec.kind == "dense":
            bound = math.sqrt(6.0 / (spec.in_dim + spec.out_dim))
            params[i] = {
                "w": rng.uniform(-bound, bound, size=(spec.in_dim, spec.out_dim)),
                "b": np.zeros(spec.out_dim),
            }
        elif spec.kind == "conv2d":
            fan = (spec.in_channels + spec.out_channels) * spec.kernel * spec.kernel
            bound = math.sqrt(6.0 / fan)
            params[i] = {
                "w": rng.uniform(-bound, bound,
                                 size=(spec.out_channels, spec.in_channels,
                                       spec.kernel, spec.kernel)),
                "b": np.zeros(spec.out_channels),
            }
    return Network(layers=layers, params=params, num_classes=num_classes,
                   input_shape=tuple(int(e) for e in input_shape), seed=seed,
                   activation_shapes=shapes)


def copy_network(net: Network) -> Network:
    return Network(layers=list(net.layers),
                   params=copy.deepcopy(net.params),
                   num_classes=net.num_classes,
                   input_shape=net.input_shape,
                   seed=net.seed,
                   activation_shapes=list(net.activation_shapes))


@dataclass
class ForwardTrace:
    logits: np.ndarray
    features: list[np.ndarray]
    layer_inputs: list[np.ndarray] = field(repr=False, default_factory=list)
    net: Network = field(repr=False, default=None, compare=False)


def _im2col(x, kernel, stride, padding):
    n, c, h, w = x.shape
    h_out = (h + 2 * padding - kernel) // stride + 1
    w_out = (w + 2 * padding - kernel) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = np.empty((n, c, kernel, kernel, h_out, w_out))
    for i in range(kernel):
        for j in range(kernel):
            cols[:, :, i, j] = xp[:, :, i:i + stride * h_out:stride,
                                  j:j + stride * w_out:stride]
    return cols


def _col2im(dcols, x_shape, kernel, stride, padding):
    n, c, h, w = x_shape
    h_out, w_out = dcols.shape[4], dcols.shape[5]
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kernel):
        for j in range(kernel):
            dxp[:, :, i:i + stride * h_out:stride,
                j:j + stride * w_out:stride] += dcols[:, :, i, j]
    if padding:
        return dxp[:, :, padding:padding + h, padding:padding + w]
    return dxp


def forward(net: Network, x: np.ndarray) -> ForwardTrace:
    """Run a batch through the network, recording capture-point features.

    x must be shaped (batch, *input_shape). Deterministic and side-effect
    free: two calls on identical inputs produce bit-identical traces.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != len(net.input_shape) + 1 or x.shape[1:] != net.input_shape:
        raise ShapeError(f"input {x.shape} does not match (N, {net.input_shape})")
    features: list[np.ndarray] = []
    layer_inputs: list[np.ndarray] = []
    a = x
    for i, spec in enumerate(net.layers):
        layer_inputs.append(a)
        if spec.kind == "dense":
            a = a @ net.params[i]["w"] + net.params[i]["b"]
        elif spec.kind == "conv2d":
            cols = _im2col(a, spec.kernel, spec.stride, spec.padding)
            a = np.einsum("ncklhw,ockl->nohw", cols, net.params[i]["w"],
                          optimize=True) + net.params[i]["b"][None, :, None, None]
        elif spec.kind == "relu":
            a = np.maximum(a, 0.0)
            features.append(a)
        elif spec.kind == "flatten":
            a = a.reshape(a.shape[0], -1)
        elif spec.kind == "avgpool":
            n, c, h, w = a.shape
            p = spec.pool
            a = a.reshape(n, c, h // p, p, w // p, p).mean(axis=(3, 5))
    features.append(a)
    return ForwardTrace(logits=a, features=features, layer_inputs=layer_inputs, net=net)


def backward(net: Network, trace: ForwardTrace, dloss_dlogits: np.ndarray):
    """Exact gradients of the scalar loss whose logit gradient is supplied.

    Returns (grads, dx) where grads maps layer index to parameter gradients
    and dx is the gradient with respect to the network input.
    """
    if trace.net is not net:
        raise ConsistencyError("trace was produced by a different network")
    da = np.asarray(dloss_dlogits, dtype=np.float64)
    if da.shape != trace.logits.shape:
        raise ShapeError(f"dloss {da.shape} does not match logits {trace.logits.shape}")
    grads: dict[int, dict[str, np.ndarray]] = {}
    for i in range(len(net.layers) - 1, -1, -1):
        spec = net.layers[i]
        a_in = trace.layer_inputs[i]
        if spec.kind == "dense":
            grads[i] = {"w": a_in.T @ da, "b": da.sum(axis=0)}
            da = da @ net.params[i]["w"].T
        elif spec.kind == "conv2d":
            cols = _im2col(a_in, spec.kernel, spec.stride, spec.padding)
            grads[i] = {
                "w": np.einsum("ncklhw,nohw->ockl", cols, da, optimize=True),
                "b": da.sum(axis=(0, 2, 3)),
            }
            dcols = np.einsum("nohw,ockl->ncklhw", da, net.params[i]["w"],
                              optimize=True)
            da = _col2im(dcols, a_in.shape, spec.kernel, spec.stride, spec.padding)
        elif spec.kind == "relu":
            da = da * (a_in > 0.0)
        elif spec.kind == "flatten":
            da = da.reshape(a_in.shape)
        elif spec.kind == "avgpool":
            p = spec.pool
            da = np.repeat(np.repeat(da, p, axis=2), p, axis=3) / (p * p)
    return grads, da


def zero_velocity(net: Network) -> dict:
    return {i: {k: np.zeros_like(v) for k, v in layer.items()}
            for i, layer in net.params.items()}


def sgd_step(net: Network, grads, velocity, lr: float, momentum: float):
    """In-place SGD with momentum: v <- momentum*v + g; theta <- theta - lr*v."""
    for i, layer in net.params.items():
        for key, param in layer.items():
            g = grads[i][key]
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"layer{i}.{key}", f"non-finite gradient in layer{i}.{key}")
            v = velocity[i][key]
            v *= momentum
            v += g
            param -= lr * v
            if not np.all(np.isfinite(param)):
                raise DivergenceError(f"layer{i}.{key}", f"non-finite parameter in layer{i}.{key}")
    return net, velocity


@dataclass(frozen=True)
class LrSchedule:
    """Learning-rate schedule: "cosine" or "step-decay".

    step-decay multiplies by drop_factor at each milestone (fractions of the
    total step budget); cosine anneals from the initial value to zero.
    """

    kind: str
    initial: float
    drop_factor: float = 0.1
    milestones: tuple[float, ...] = (0.5, 0.75)


def lr_at(schedule: LrSchedule, step: int, total_steps: int) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if schedule.kind == "cosine":
        if total_steps == 0:
            return schedule.initial
        return schedule.initial * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
    if schedule.kind == "step-decay":
        frac = step / total_steps if total_steps else 0.0
        passed = sum(1 for m in schedule.milestones if frac >= m)
        return schedule.initial * schedule.drop_factor ** passed
    raise ValueError(f"unknown schedule kind {schedule.kind!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_in: int
    momentum: float
    lr_schedule: LrSchedule
    seed: int
    batch_oe: int = 0


def predict_logits(net: Network, images: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Logits for a whole dataset, evaluated in chunks."""
    out = []
    for start in range(0, len(images), chunk):
        out.append(forward(net, images[start:start + chunk]).logits)
    return np.concatenate(out, axis=0)


def accuracy(net: Network, images: np.ndarray, labels: np.ndarray) -> float:
    logits = predict_logits(net, images)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def train(net: Network, images: np.ndarray, labels: np.ndarray,
          config: TrainConfig, loss: str = "cross-entropy", step_hook=None):
    """Train with cross-entropy; returns (trained net, final training accuracy).

    The input network is not mutated. The returned accuracy is measured over
    the full training set after the last epoch.
    """
    if loss != "cross-entropy":
        raise ValueError(f"unsupported loss {loss!r}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= net.num_classes:
        raise ValueError(f"labels outside [0, {net.num_classes})")
    net = copy_network(net)
    n = len(images)
    steps_per_epoch = max(1, math.ceil(n / config.batch_in))
    total_steps = config.epochs * steps_per_epoch
    velocity = zero_velocity(net)
    step = 0
    for epoch in range(config.epochs):
        for idx in batch_indices(n, config.batch_in, config.seed, epoch):
            lr = lr_at(config.lr_schedule, step, total_steps)
            trace = forward(net, images[idx])
            _, dlogits = losses.ce_loss(trace.logits, labels[idx])
            grads, _ = backward(net, trace, dlogits)
            sgd_step(net, grads, velocity, lr, config.momentum)
            step += 1
            if step_hook is not None:
                step_hook(step, net)
    return net, accuracy(net, images, labels)


def finetune_oecc(net: Network, images_in: np.ndarray, labels_in: np.ndarray,
                  images_oe: np.ndarray, config: TrainConfig,
                  lam1: float, lam2: float, a_tr: float, step_hook=None) -> Network:
    """Fine-tune under the combined objective on joint (in, OE) batches.

    Each step draws batch_in examples from the in-distribution set and
    batch_oe from the outlier set (an independent cycling stream), runs the
    concatenated batch forward, and applies one SGD step. With lam2 == 0 the
    OE stream is never touched, which makes the lam1 == lam2 == 0 trajectory
    bit-identical to plain cross-entropy fine-tuning on the same seed.
    """
    cfg = losses.OeccConfig(lam1=lam1, lam2=lam2, a_tr=a_tr)
    if len(images_oe) == 0:
        raise InsufficientDataError("outlier-exposure set is empty")
    labels_in = np.asarray(labels_in, dtype=np.int64)
    net = copy_network(net)
    n_in = len(images_in)
    n_oe = len(images_oe)
    steps_per_epoch = max(1, math.ceil(n_in / config.batch_in))
    total_steps = config.epochs * steps_per_epoch
    velocity = zero_velocity(net)
    use_oe = lam2 > 0.0
    oe_seed = config.seed + _OE_STREAM_OFFSET
    oe_epoch = 0
    oe_iter = iter(batch_indices(n_oe, config.batch_oe, oe_seed, oe_epoch))
    step = 0
    for epoch in range(config.epochs):
        for idx in batch_indices(n_in, config.batch_in, config.seed, epoch):
            lr = lr_at(config.lr_schedule, step, total_steps)
            xb = images_in[idx]
            if use_oe:
                try:
                    oe_idx = next(oe_iter)
                except StopIteration:
                    oe_epoch += 1
                    oe_iter = iter(batch_indices(n_oe, config.batch_oe, oe_seed, oe_epoch))
                    oe_idx = next(oe_iter)
                joint = np.concatenate([xb, images_oe[oe_idx]], axis=0)
                trace = forward(net, joint)
                in_logits = trace.logits[:len(idx)]
                oe_logits = trace.logits[len(idx):]
                _, g_in, g_oe = losses.oecc_loss(in_logits, labels_in[idx], oe_logits, cfg)
                dlogits = np.concatenate([g_in, g_oe], axis=0)
            else:
                trace = forward(net, xb)
                _, g_in, _ = losses.oecc_loss(trace.logits, labels_in[idx], None, cfg)
                dlogits = g_in
            grads, _ = backward(net, trace, dlogits)
            sgd_step(net, grads, velocity, lr, config.momentum)
            step += 1
            if step_hook is not None:
                step_hook(step, net)
    return net


def save_network(net: Network, path, extra: dict | None = None) -> None:
    """Persist a network as manifest.json plus one tensor file per parameter."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": 1,
        "layers": [asdict(s) for s in net.layers],
        "num_classes": net.num_classes,
        "input_shape": list(net.input_shape),
        "seed": net.seed,
        "capture_layers": net.capture_layers,
        "extra": extra or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for i, layer in sorted(net.params.items()):
        for key, value in sorted(layer.items()):
            save_tensor(path / f"layer{i}_{key}.oodt", value)


def load_network(path):
    """Load a checkpoint saved by save_network; returns (net, extra)."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FormatError(f"{path}: no manifest.json")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != 1:
        raise FormatError(f"{path}: unsupported checkpoint version")
    layers = [LayerSpec(**s) for s in manifest["layers"]]
    net = build_network(layers, manifest["input_shape"], manifest["num_classes"],
                        manifest["seed"])
    for i, layer in net.params.items():
        for key in layer:
            tensor = load_tensor(path / f"layer{i}_{key}.oodt")
            if tensor.shape != layer[key].shape:
                raise FormatError(f"{path}: layer{i}.{key} has shape {tensor.shape}, "
                                  f"expected {layer[key].shape}")
            layer[key] = tensor
    return net, manifest.get("extra", {})
