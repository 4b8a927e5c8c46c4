"""Small convolutional classifier with hand-written backpropagation.

The network is a stack of ``conv``/``relu``/``maxpool`` layers followed by a
global-average-pool + fully-connected head. Every ``conv`` must be followed
directly by a ``relu``; the output of that ``relu`` is the activation map a
conv layer "owns", and :func:`capture` returns it together with the exact
gradient of one class logit with respect to it.

Parameters live in a read-only dict, so a network is safe to share between
threads once built.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .geometry import Box, pixel_extent

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv", "relu" or "maxpool"
    name: str = ""
    channels: int = 0
    k: int = 3
    stride: int = 1

    def token(self) -> str:
        if self.kind == "conv":
            return f"conv:{self.name}:{self.channels}:{self.k}"
        if self.kind == "maxpool":
            return f"maxpool:{self.k}:{self.stride}"
        return "relu"


def conv(name: str, channels: int, k: int = 3) -> LayerSpec:
    return LayerSpec("conv", name, channels, k, 1)


def maxpool(k: int = 2, stride: int = 2) -> LayerSpec:
    return LayerSpec("maxpool", "", 0, k, stride)


RELU = LayerSpec("relu")

DEFAULT_LAYERS = (
    conv("conv1", 16), RELU, maxpool(),
    conv("conv2", 32), RELU, maxpool(),
    conv("conv3", 32), RELU,
    conv("conv4", 32), RELU,
)


def parse_layers(text: str) -> tuple[LayerSpec, ...]:
    """Parse ``conv:NAME:CH:K,relu,maxpool:K:STRIDE,...``."""
    out = []
    for tok in (t.strip() for t in text.split(",")):
        parts = tok.split(":")
        if parts[0] == "conv" and len(parts) == 4:
            out.append(conv(parts[1], int(parts[2]), int(parts[3])))
        elif parts[0] == "maxpool" and len(parts) == 3:
            out.append(maxpool(int(parts[1]), int(parts[2])))
        elif tok == "relu":
            out.append(RELU)
        else:
            raise ValueError(f"bad layer token {tok!r}")
    return tuple(out)


def format_layers(layers) -> str:
    return ",".join(layer.token() for layer in layers)


@dataclass(frozen=True)
class NetworkConfig:
    input_side: int = 32
    layers: tuple[LayerSpec, ...] = DEFAULT_LAYERS
    num_classes: int = 3
    seed: int = 0
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        names = [layer.name for layer in self.layers if layer.kind == "conv"]
        if len(names) < 2:
            raise ValueError("network needs at least two conv layers")
        if len(set(names)) != len(names):
            raise ValueError(f"conv layer names must be unique: {names}")
        for i, layer in enumerate(self.layers):
            if layer.kind not in ("conv", "relu", "maxpool"):
                raise ValueError(f"unknown layer kind {layer.kind!r}")
            if layer.kind == "conv":
                nxt = self.layers[i + 1] if i + 1 < len(self.layers) else None
                if nxt is None or nxt.kind != "relu":
                    raise ValueError(f"conv layer {layer.name!r} must be followed by relu")

    @property
    def conv_names(self) -> list[str]:
        return [layer.name for layer in self.layers if layer.kind == "conv"]

    def capture_index(self, layer_name: str) -> int:
        """Index of the relu whose output belongs to ``layer_name``."""
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv" and layer.name == layer_name:
                return i + 1
        raise KeyError(f"unknown conv layer {layer_name!r}; have {self.conv_names}")


@dataclass(frozen=True)
class ClassScore:
    class_id: int
    score: float


@dataclass(frozen=True)
class ActivationRecord:
    proposal_index: int
    layer_name: str
    activation: np.ndarray  # (K, H, W), post-ReLU
    gradient: np.ndarray  # d logit[target_class] / d activation
    target_class: int

    def __post_init__(self):
        if self.activation.shape != self.gradient.shape:
            raise ValueError("activation and gradient shapes differ")
        if self.activation.ndim != 3:
            raise ValueError("activation must be (K, H, W)")


@dataclass(frozen=True)
class TrainedNetwork:
    config: NetworkConfig
    params: dict = field(repr=False)
    # full-data (loss, accuracy) before and after training; empty if untrained
    history: tuple = ()

    def __post_init__(self):
        frozen = {}
        for k, v in self.params.items():
            arr = np.array(v, dtype=np.float64)
            arr.flags.writeable = False
            frozen[k] = arr
        object.__setattr__(self, "params", frozen)


def init_network(config: NetworkConfig) -> TrainedNetwork:
    """He-initialised weights, zero biases; depends only on ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    params = {}
    c_in = config.in_channels
    for layer in config.layers:
        if layer.kind == "conv":
            fan_in = c_in * layer.k * layer.k
            params[f"{layer.name}.weight"] = rng.normal(0, np.sqrt(2.0 / fan_in), (layer.channels, c_in, layer.k, layer.k))
            params[f"{layer.name}.bias"] = np.zeros(layer.channels)
            c_in = layer.channels
    params["fc.weight"] = rng.normal(0, np.sqrt(1.0 / c_in), (config.num_classes, c_in))
    params["fc.bias"] = np.zeros(config.num_classes)
    return TrainedNetwork(config, params)


# -- forward / backward ------------------------------------------------------


def _run_layers(net: TrainedNetwork, x: np.ndarray, start: int = 0, stop: int | None = None):
    """Run layers ``start:stop`` on ``x``; returns the output and per-layer caches."""
    caches = []
    for layer in net.config.layers[start:stop]:
        if layer.kind == "conv":
            w = net.params[f"{layer.name}.weight"]
            caches.append(x)
            x = T.conv2d(x, w, net.params[f"{layer.name}.bias"], stride=1, pad=layer.k // 2)
        elif layer.kind == "relu":
            caches.append(x > 0)
            x = np.maximum(x, 0.0)
        else:
            out, arg = T.maxpool2d(x, layer.k, layer.stride)
            caches.append((arg, x.shape))
            x = out
    return x, caches


def _head(net: TrainedNetwork, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pooled = T.global_average_pool(a)
    return pooled @ net.params["fc.weight"].T + net.params["fc.bias"], pooled


def _back_layers(net: TrainedNetwork, da: np.ndarray, caches, start: int, grads: dict | None = None):
    """Backpropagate ``da`` from the top of the stack down to the input of layer ``start``.

    ``caches`` are those of ``_run_layers(net, x, start)``.
    """
    layers = net.config.layers
    for i in range(len(layers) - 1, start - 1, -1):
        layer, cache = layers[i], caches[i - start]
        if layer.kind == "conv":
            w = net.params[f"{layer.name}.weight"]
            dx, dw, db = T.conv2d_backward(da, cache, w, stride=1, pad=layer.k // 2)
            if grads is not None:
                grads[f"{layer.name}.weight"] = dw
                grads[f"{layer.name}.bias"] = db
            da = dx
        elif layer.kind == "relu":
            da = da * cache
        else:
            arg, shape = cache
            da = T.maxpool2d_backward(da, arg, shape, layer.k, layer.stride)
    return da


def _check_patches(net: TrainedNetwork, patches) -> np.ndarray:
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    s, c = net.config.input_side, net.config.in_channels
    if x.ndim != 4 or x.shape[1:] != (c, s, s):
        raise T.ShapeError(f"expected patches of shape ({c}, {s}, {s}), got {x.shape[-3:]}")
    return x


def logits(net: TrainedNetwork, patches) -> np.ndarray:
    """Class logits for a batch ``(N, C, S, S)`` (or one ``(C, S, S)`` patch)."""
    x = _check_patches(net, patches)
    a, _ = _run_layers(net, x)
    out, _ = _head(net, a)
    return out


def forward(net: TrainedNetwork, patch) -> list[ClassScore]:
    scores = logits(net, patch)[0]
    return [ClassScore(c, float(s)) for c, s in enumerate(scores)]


def forward_from(net: TrainedNetwork, layer_name: str, activation) -> np.ndarray:
    """Logits obtained by injecting ``activation`` as the post-ReLU output of ``layer_name``."""
    idx = net.config.capture_index(layer_name)
    a = np.asarray(activation, dtype=np.float64)
    single = a.ndim == 3
    if single:
        a = a[None]
    out, _ = _run_layers(net, a, start=idx + 1)
    res, _ = _head(net, out)
    return res[0] if single else res


def capture_batch(net: TrainedNetwork, patches, target_classes, layer_name: str) -> tuple[np.ndarray, np.ndarray]:
    """Activations and target-logit gradients at ``layer_name`` for a batch.

    Returns ``(activations, gradients)``, both ``(N, K, H, W)``. Each patch's
    logit depends only on that patch, so one backward pass with a one-hot
    seed per row gives every per-patch gradient at once.
    """
    x = _check_patches(net, patches)
    idx = net.config.capture_index(layer_name)
    targets = np.broadcast_to(np.asarray(target_classes, dtype=np.intp), (x.shape[0],))
    if targets.min() < 0 or targets.max() >= net.config.num_classes:
        raise ValueError("target class out of range")
    act, _ = _run_layers(net, x, stop=idx + 1)
    top, caches = _run_layers(net, act, start=idx + 1)
    h, w = top.shape[2:]
    fc = net.params["fc.weight"]
    # d logit_c / d top = fc[c, k] / (h * w) at every position
    dtop = np.broadcast_to((fc[targets] / (h * w))[:, :, None, None], top.shape).copy()
    grad = _back_layers(net, dtop, caches, start=idx + 1)
    return act, np.ascontiguousarray(grad)


def capture(net: TrainedNetwork, patch, target_class: int, layer_name: str, proposal_index: int = 0) -> ActivationRecord:
    """Post-ReLU activation at ``layer_name`` and d(logit[target_class])/d(activation)."""
    act, grad = capture_batch(net, patch, [target_class], layer_name)
    return ActivationRecord(proposal_index, layer_name, act[0], grad[0], int(target_class))


# -- training ----------------------------------------------------------------


def _softmax_xent(z: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = z.shape[0]
    loss = -np.log(p[np.arange(n), y] + 1e-300).mean()
    dz = p
    dz[np.arange(n), y] -= 1.0
    return float(loss), dz / n


def loss_and_grads(net: TrainedNetwork, x: np.ndarray, y: np.ndarray) -> tuple[float, dict]:
    """Mean softmax cross-entropy over the batch and its parameter gradients."""
    a, caches = _run_layers(net, x)
    z, pooled = _head(net, a)
    loss, dz = _softmax_xent(z, y)
    grads = {"fc.weight": dz.T @ pooled, "fc.bias": dz.sum(axis=0)}
    dpool = dz @ net.params["fc.weight"]
    h, w = a.shape[2:]
    da = np.broadcast_to(dpool[:, :, None, None] / (h * w), a.shape).copy()
    _back_layers(net, da, caches, start=0, grads=grads)
    return loss, grads


def evaluate(net: TrainedNetwork, x, y, batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and accuracy of ``net`` on ``(x, y)``."""
    x = _check_patches(net, x)
    y = np.asarray(y, dtype=np.intp)
    losses, hits = [], 0
    for i in range(0, len(x), batch_size):
        z = logits(net, x[i : i + batch_size])
        loss, _ = _softmax_xent(z, y[i : i + batch_size])
        losses.append(loss * len(z))
        hits += int((z.argmax(axis=1) == y[i : i + batch_size]).sum())
    return sum(losses) / len(x), hits / len(x)


def train(
    config: NetworkConfig,
    samples,
    epochs: int,
    lr: float,
    batch_size: int = 32,
) -> TrainedNetwork:
    """Minibatch SGD on softmax cross-entropy.

    ``samples`` is a sequence of ``(patch, class_id)`` pairs or a
    ``(patches, labels)`` tuple of arrays. Shuffling uses a generator seeded
    from ``config.seed``, so identical inputs give bit-identical weights.
    """
    x, y = _stack_samples(samples)
    if len(x) == 0:
        raise ValueError("no training samples")
    if y.min() < 0 or y.max() >= config.num_classes:
        raise ValueError(f"class id out of range [0, {config.num_classes})")
    net = init_network(config)
    x = _check_patches(net, x)
    if epochs <= 0:
        return net
    start = evaluate(net, x, y)
    params = {k: v.copy() for k, v in net.params.items()}
    rng = np.random.default_rng([config.seed, 1])
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        running = 0.0
        for i in range(0, len(x), batch_size):
            idx = order[i : i + batch_size]
            loss, grads = loss_and_grads(TrainedNetwork(config, params), x[idx], y[idx])
            for k, g in grads.items():
                params[k] -= lr * g
            running += loss * len(idx)
        log.debug("epoch %d/%d  loss %.4f", epoch + 1, epochs, running / len(x))
    net = TrainedNetwork(config, params)
    end = evaluate(net, x, y)
    log.info("trained on %d patches: loss %.4f -> %.4f, accuracy %.3f", len(x), start[0], end[0], end[1])
    return TrainedNetwork(config, params, history=(start, end))


def _stack_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(samples, tuple) and len(samples) == 2 and isinstance(samples[0], np.ndarray):
        return np.asarray(samples[0], dtype=np.float64), np.asarray(samples[1], dtype=np.intp)
    samples = list(samples)
    if not samples:
        return np.zeros((0,)), np.zeros((0,), dtype=np.intp)
    x = np.stack([np.asarray(p, dtype=np.float64) for p, _ in samples])
    y = np.array([c for _, c in samples], dtype=np.intp)
    return x, y


# -- patches -----------------------------------------------------------------


def extract_patch(image: np.ndarray, box: Box, side: int) -> np.ndarray:
    """Crop ``box`` from a ``(C, H, W)`` image and resample it to ``side x side``."""
    _, h, w = image.shape
    x1, y1, x2, y2 = pixel_extent(box, w, h)
    return T.bilinear_upsample(image[:, y1:y2, x1:x2], side, side)


# -- checkpoints ---------------------------------------------------------------

_CKPT_MAGIC = b"CKPT1\n"


def save_checkpoint(path, net: TrainedNetwork) -> None:
    """Plain-text ``key=value`` manifest, a blank line, then one TNSR record per parameter."""
    cfg = net.config
    names = list(net.params)
    header = [
        f"input_side={cfg.input_side}",
        f"in_channels={cfg.in_channels}",
        f"num_classes={cfg.num_classes}",
        f"seed={cfg.seed}",
        f"layers={format_layers(cfg.layers)}",
        f"params={','.join(names)}",
    ]
    for name in names:
        header.append(f"dims.{name}={'x'.join(str(d) for d in net.params[name].shape)}")
    body = b"".join(T.tensor_to_bytes(net.params[n]) for n in names)
    Path(path).write_bytes(_CKPT_MAGIC + ("\n".join(header) + "\n\n").encode() + body)


def load_checkpoint(path) -> TrainedNetwork:
    raw = Path(path).read_bytes()
    if not raw.startswith(_CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    text, _, body = raw[len(_CKPT_MAGIC):].partition(b"\n\n")
    meta = dict(line.split("=", 1) for line in text.decode().splitlines())
    cfg = NetworkConfig(
        input_side=int(meta["input_side"]),
        layers=parse_layers(meta["layers"]),
        num_classes=int(meta["num_classes"]),
        seed=int(meta["seed"]),
        in_channels=int(meta["in_channels"]),
    )
    fh = io.BytesIO(body)
    params = {}
    for name in meta["params"].split(","):
        arr = T.read_tensor(fh)
        expect = tuple(int(d) for d in meta[f"dims.{name}"].split("x"))
        if arr.shape != expect:
            raise ValueError(f"{path}: parameter {name} has shape {arr.shape}, manifest says {expect}")
        params[name] = arr
    return TrainedNetwork(cfg, params)
