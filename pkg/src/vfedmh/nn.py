"""Minimal dense/conv network with manual forward and backward passes.

Every party trains a network split into two stacks: an embedding stack that
maps the party's feature shard into a shared embedding space, and a decision
stack that maps a (global) embedding to class logits.  All math is plain
float64 numpy; layers are described declaratively so specs can be built from
config strings and states serialized independently of behaviour.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when an input does not match the width a layer expects."""


class TraceError(ValueError):
    """Raised when a backward pass is fed a stale or mismatched trace."""


# ---------------------------------------------------------------------------
# Layer descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class MaxPool2:
    """2x2 max pooling with stride 2; spatial dims must be even."""


@dataclass(frozen=True)
class Reshape:
    """Reshape flat features to (channels, height, width) for conv stacks."""

    channels: int
    height: int
    width: int


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Dense | ReLU | Conv2D | MaxPool2 | Reshape | Flatten


@dataclass(frozen=True)
class NetworkSpec:
    """Layer list plus the index separating embedding and decision stacks.

    ``layers[:split_index]`` form the embedding network (shard -> embedding),
    ``layers[split_index:]`` the decision network (embedding -> logits).
    """

    tag: str
    layers: tuple[Layer, ...]
    split_index: int
    embedding_dim: int

    def __post_init__(self):
        if not 0 < self.split_index < len(self.layers):
            raise ValueError("split_index must fall strictly inside the layer list")
        emb_out = _propagate(self.layers[: self.split_index], None)
        if emb_out != ("flat", self.embedding_dim):
            raise ValueError(
                f"embedding stack emits {emb_out}, expected flat width {self.embedding_dim}"
            )
        dec_in = _input_width(self.layers[self.split_index])
        if dec_in is not None and dec_in != self.embedding_dim:
            raise ValueError(
                f"decision stack expects input width {dec_in}, "
                f"embedding_dim is {self.embedding_dim}"
            )

    @property
    def input_features(self) -> int:
        first = self.layers[0]
        if isinstance(first, Dense):
            return first.in_features
        if isinstance(first, Reshape):
            return first.channels * first.height * first.width
        raise ValueError(f"cannot infer input width from {first!r}")

    @property
    def n_classes(self) -> int:
        shape = _propagate(self.layers, None)
        return shape[1]


def _input_width(layer: Layer):
    if isinstance(layer, Dense):
        return layer.in_features
    return None


def _propagate(layers, start):
    """Walk layer descriptors and return the final symbolic shape.

    Shapes are ("flat", n) or ("chw", c, h, w); ``start=None`` infers the
    input from the first layer.
    """
    shape = start
    for layer in layers:
        if isinstance(layer, Dense):
            if shape is None:
                shape = ("flat", layer.in_features)
            if shape != ("flat", layer.in_features):
                raise ValueError(f"dense {layer} cannot follow shape {shape}")
            shape = ("flat", layer.out_features)
        elif isinstance(layer, Reshape):
            flat = layer.channels * layer.height * layer.width
            if shape is None:
                shape = ("flat", flat)
            if shape != ("flat", flat):
                raise ValueError(f"reshape {layer} cannot follow shape {shape}")
            shape = ("chw", layer.channels, layer.height, layer.width)
        elif isinstance(layer, Conv2D):
            if shape is None or shape[0] != "chw" or shape[1] != layer.in_channels:
                raise ValueError(f"conv {layer} cannot follow shape {shape}")
            _, _, h, w = shape
            ho = (h - layer.kernel) // layer.stride + 1
            wo = (w - layer.kernel) // layer.stride + 1
            if ho < 1 or wo < 1:
                raise ValueError(f"conv {layer} does not fit input {h}x{w}")
            shape = ("chw", layer.out_channels, ho, wo)
        elif isinstance(layer, MaxPool2):
            if shape is None or shape[0] != "chw":
                raise ValueError(f"pool cannot follow shape {shape}")
            _, c, h, w = shape
            if h % 2 or w % 2:
                raise ValueError(f"2x2 pool needs even dims, got {h}x{w}")
            shape = ("chw", c, h // 2, w // 2)
        elif isinstance(layer, Flatten):
            if shape is None or shape[0] != "chw":
                raise ValueError(f"flatten cannot follow shape {shape}")
            shape = ("flat", shape[1] * shape[2] * shape[3])
        elif isinstance(layer, ReLU):
            if shape is None:
                raise ValueError("ReLU cannot be the first layer")
        else:
            raise ValueError(f"unknown layer {layer!r}")
    return shape


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class NetworkState:
    """Per-layer parameter tensors, ordered to match the spec's layer list."""

    params: list[list[np.ndarray]]

    @property
    def param_count(self) -> int:
        return sum(p.size for layer in self.params for p in layer)

    def flat(self) -> list[np.ndarray]:
        return [p for layer in self.params for p in layer]

    def copy(self) -> "NetworkState":
        return NetworkState([[p.copy() for p in layer] for layer in self.params])


def init_state(spec: NetworkSpec, seed: int) -> NetworkState:
    """Glorot-uniform initialization from a party-local seeded generator."""
    rng = np.random.default_rng(seed)
    params: list[list[np.ndarray]] = []
    for layer in spec.layers:
        if isinstance(layer, Dense):
            limit = math.sqrt(6.0 / (layer.in_features + layer.out_features))
            w = rng.uniform(-limit, limit, size=(layer.in_features, layer.out_features))
            params.append([w, np.zeros(layer.out_features)])
        elif isinstance(layer, Conv2D):
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            fan_out = layer.out_channels * layer.kernel * layer.kernel
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(
                -limit,
                limit,
                size=(layer.out_channels, layer.in_channels, layer.kernel, layer.kernel),
            )
            params.append([w, np.zeros(layer.out_channels)])
        else:
            params.append([])
    return NetworkState(params)


# ---------------------------------------------------------------------------
# Forward / backward per layer
# ---------------------------------------------------------------------------


def _forward_layer(layer, params, x):
    if isinstance(layer, Dense):
        w, b = params
        if x.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(
                f"dense layer expects width {w.shape[0]}, got input shape {x.shape}"
            )
        return x @ w + b, x
    if isinstance(layer, ReLU):
        mask = x > 0
        return x * mask, mask
    if isinstance(layer, Reshape):
        flat = layer.channels * layer.height * layer.width
        if x.ndim != 2 or x.shape[1] != flat:
            raise ShapeError(f"reshape expects width {flat}, got input shape {x.shape}")
        return x.reshape(x.shape[0], layer.channels, layer.height, layer.width), x.shape
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1), x.shape
    if isinstance(layer, Conv2D):
        return _conv_forward(layer, params, x)
    if isinstance(layer, MaxPool2):
        return _pool_forward(x)
    raise ValueError(f"unknown layer {layer!r}")


def _backward_layer(layer, params, cache, grad):
    """Return (param_grads, grad_input) for one layer."""
    if isinstance(layer, Dense):
        w, _ = params
        x = cache
        return [x.T @ grad, grad.sum(axis=0)], grad @ w.T
    if isinstance(layer, ReLU):
        return [], grad * cache
    if isinstance(layer, Reshape):
        return [], grad.reshape(cache)
    if isinstance(layer, Flatten):
        return [], grad.reshape(cache)
    if isinstance(layer, Conv2D):
        return _conv_backward(layer, params, cache, grad)
    if isinstance(layer, MaxPool2):
        return [], _pool_backward(cache, grad)
    raise ValueError(f"unknown layer {layer!r}")


def _conv_forward(layer, params, x):
    w, b = params
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise ShapeError(
            f"conv expects {layer.in_channels} input channels, got shape {x.shape}"
        )
    k, s = layer.kernel, layer.stride
    n, _, h, wd = x.shape
    ho = (h - k) // s + 1
    wo = (wd - k) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv kernel {k} does not fit input {h}x{wd}")
    out = np.zeros((n, layer.out_channels, ho, wo))
    # direct valid convolution, one kernel offset at a time
    for u in range(k):
        for v in range(k):
            xs = x[:, :, u : u + ho * s : s, v : v + wo * s : s]
            out += np.einsum("bchw,oc->bohw", xs, w[:, :, u, v])
    out += b[None, :, None, None]
    return out, x


def _conv_backward(layer, params, x, grad):
    w, _ = params
    k, s = layer.kernel, layer.stride
    ho, wo = grad.shape[2], grad.shape[3]
    grad_w = np.zeros_like(w)
    grad_x = np.zeros_like(x)
    for u in range(k):
        for v in range(k):
            xs = x[:, :, u : u + ho * s : s, v : v + wo * s : s]
            grad_w[:, :, u, v] = np.einsum("bohw,bchw->oc", grad, xs)
            grad_x[:, :, u : u + ho * s : s, v : v + wo * s : s] += np.einsum(
                "bohw,oc->bchw", grad, w[:, :, u, v]
            )
    grad_b = grad.sum(axis=(0, 2, 3))
    return [grad_w, grad_b], grad_x


def _pool_forward(x):
    if x.ndim != 4:
        raise ShapeError(f"pool expects a chw batch, got shape {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"2x2 pool needs even dims, got {h}x{w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def _pool_backward(cache, grad):
    shape, idx = cache
    n, c, h, w = shape
    gb = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(gb, idx[..., None], grad[..., None], axis=-1)
    gb = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return gb.reshape(n, c, h, w)


# ---------------------------------------------------------------------------
# Split forward/backward API
# ---------------------------------------------------------------------------


@dataclass
class ForwardTrace:
    """Per-layer caches from one forward pass over one stack."""

    part: str  # "embedding" or "decision"
    batch_size: int
    caches: list = field(default_factory=list)


def _run_forward(layers, params, x, part):
    trace = ForwardTrace(part=part, batch_size=x.shape[0])
    out = x
    for layer, p in zip(layers, params):
        out, cache = _forward_layer(layer, p, out)
        trace.caches.append(cache)
    return out, trace


def _run_backward(layers, params, trace, grad, part):
    if trace.part != part or len(trace.caches) != len(layers):
        raise TraceError(
            f"trace for {trace.part!r}/{len(trace.caches)} layers does not match "
            f"{part!r}/{len(layers)} layers"
        )
    param_grads = [None] * len(layers)
    g = grad
    for i in range(len(layers) - 1, -1, -1):
        param_grads[i], g = _backward_layer(layers[i], params[i], trace.caches[i], g)
    flat = [pg for layer in param_grads for pg in layer]
    return flat, g


def forward_embedding(state: NetworkState, spec: NetworkSpec, batch: np.ndarray):
    """Run the embedding stack on a feature batch; returns (embedding, trace)."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != spec.input_features:
        raise ShapeError(
            f"expected batch of width {spec.input_features}, got shape {batch.shape}"
        )
    out, trace = _run_forward(
        spec.layers[: spec.split_index], state.params[: spec.split_index], batch, "embedding"
    )
    if not np.isfinite(out).all():
        raise FloatingPointError("non-finite values in embedding output")
    return out, trace


def forward_decision(state: NetworkState, spec: NetworkSpec, embedding: np.ndarray):
    """Run the decision stack on a (global) embedding; returns (logits, trace)."""
    embedding = np.asarray(embedding, dtype=np.float64)
    if embedding.ndim != 2 or embedding.shape[1] != spec.embedding_dim:
        raise ShapeError(
            f"expected embedding of width {spec.embedding_dim}, got shape {embedding.shape}"
        )
    out, trace = _run_forward(
        spec.layers[spec.split_index :], state.params[spec.split_index :], embedding, "decision"
    )
    if not np.isfinite(out).all():
        raise FloatingPointError("non-finite values in logits")
    return out, trace


def backward_decision(state: NetworkState, spec: NetworkSpec, trace: ForwardTrace, grad_logits):
    """Backprop through the decision stack.

    Returns (param_grads, grad_embedding) where param_grads covers only the
    decision layers' tensors and grad_embedding is the loss gradient at the
    stack's input.
    """
    return _run_backward(
        spec.layers[spec.split_index :],
        state.params[spec.split_index :],
        trace,
        np.asarray(grad_logits, dtype=np.float64),
        "decision",
    )


def backward_embedding(state: NetworkState, spec: NetworkSpec, trace: ForwardTrace, grad_embedding):
    """Backprop through the embedding stack; returns its param grads.

    The caller is responsible for any scaling of ``grad_embedding`` (the
    protocol applies the 1/C share of the averaged global embedding).
    """
    grads, _ = _run_backward(
        spec.layers[: spec.split_index],
        state.params[: spec.split_index],
        trace,
        np.asarray(grad_embedding, dtype=np.float64),
        "embedding",
    )
    return grads


def forward_full(state: NetworkState, spec: NetworkSpec, batch: np.ndarray):
    """Run the whole (unsplit) network on a feature batch."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != spec.input_features:
        raise ShapeError(
            f"expected batch of width {spec.input_features}, got shape {batch.shape}"
        )
    out, trace = _run_forward(spec.layers, state.params, batch, "full")
    return out, trace


def backward_full(state: NetworkState, spec: NetworkSpec, trace: ForwardTrace, grad_logits):
    grads, _ = _run_backward(
        spec.layers, state.params, trace, np.asarray(grad_logits, dtype=np.float64), "full"
    )
    return grads


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross entropy of stabilized softmax probabilities.

    Returns (loss, grad_logits); grad_logits is the exact gradient of the
    batch-mean loss, so each row is (softmax - onehot) / batch_size and rows
    sum to zero.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.ndim != 1 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} do not align")
    n, m = logits.shape
    if n < 1:
        raise ShapeError("empty batch")
    if labels.min() < 0 or labels.max() >= m:
        bad = labels[(labels < 0) | (labels >= m)][0]
        raise ValueError(f"label {bad} out of range for {m} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float((lse - shifted[np.arange(n), labels]).mean())
    probs = np.exp(shifted - lse[:, None])
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


# ---------------------------------------------------------------------------
# Finite differences (test oracle, also exposed for calibration checks)
# ---------------------------------------------------------------------------


def finite_diff_gradient(state: NetworkState, spec: NetworkSpec, loss_fn, h: float):
    """Central-difference gradient of ``loss_fn(state)`` per scalar parameter."""
    if h <= 0:
        raise ValueError("h must be positive")
    grads = []
    for li, layer_params in enumerate(state.params):
        layer_grads = []
        for pi, p in enumerate(layer_params):
            g = np.zeros_like(p)
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = loss_fn(state)
                flat[i] = orig - h
                fm = loss_fn(state)
                flat[i] = orig
                gflat[i] = (fp - fm) / (2.0 * h)
            layer_grads.append(g)
        grads.append(layer_grads)
    return [g for layer in grads for g in layer]


# ---------------------------------------------------------------------------
# Architecture builders
# ---------------------------------------------------------------------------


def _near_square(n: int) -> tuple[int, int]:
    h = int(math.isqrt(n))
    while n % h:
        h -= 1
    return h, n // h


def mlp3(in_features: int, embedding_dim: int, n_classes: int, hidden: int | None = None) -> NetworkSpec:
    """Three dense layers: shard -> hidden -> embedding | -> logits."""
    hidden = hidden or max(64, embedding_dim)
    layers = (
        Dense(in_features, hidden),
        ReLU(),
        Dense(hidden, embedding_dim),
        ReLU(),
        Dense(embedding_dim, n_classes),
    )
    return NetworkSpec("mlp3", layers, split_index=3, embedding_dim=embedding_dim)


def cnn2(in_features: int, embedding_dim: int, n_classes: int, channels=(8, 16)) -> NetworkSpec:
    """Two valid-padding conv layers plus two dense layers."""
    h, w = _near_square(in_features)
    k = 3 if min(h, w) >= 7 else (2 if min(h, w) >= 3 else 1)
    c1, c2 = channels
    ho, wo = h - 2 * (k - 1), w - 2 * (k - 1)
    layers = (
        Reshape(1, h, w),
        Conv2D(1, c1, k),
        ReLU(),
        Conv2D(c1, c2, k),
        ReLU(),
        Flatten(),
        Dense(ho * wo * c2, embedding_dim),
        ReLU(),
        Dense(embedding_dim, n_classes),
    )
    return NetworkSpec("cnn2", layers, split_index=7, embedding_dim=embedding_dim)


def lenet(in_features: int, embedding_dim: int, n_classes: int, channels=(6, 16, 32), fc1: int = 84) -> NetworkSpec:
    """Three conv layers, one 2x2 max pool, three dense layers.

    Kernel sizes and the pool position adapt to the shard's spatial extent so
    the stack stays valid on small inputs.
    """
    h, w = _near_square(in_features)
    c1, c2, c3 = channels
    conv_part: list[Layer] = [Reshape(1, h, w)]
    if min(h, w) >= 12:
        plan = [("conv", 1, c1, 3), ("pool",), ("conv", c1, c2, 3), ("conv", c2, c3, 3)]
    elif min(h, w) >= 4:
        plan = [("conv", 1, c1, 2), ("conv", c1, c2, 2), ("pool",), ("conv", c2, c3, 1)]
    elif min(h, w) >= 2:
        plan = [("conv", 1, c1, 1), ("conv", c1, c2, 1), ("pool",), ("conv", c2, c3, 1)]
    else:
        plan = [("conv", 1, c1, 1), ("conv", c1, c2, 1), ("conv", c2, c3, 1)]
    ch, cw = h, w
    for step in plan:
        if step[0] == "conv":
            _, ci, co, k = step
            conv_part += [Conv2D(ci, co, k), ReLU()]
            ch, cw = ch - k + 1, cw - k + 1
        else:
            if ch % 2 or cw % 2:
                raise ValueError(f"lenet pool landed on odd dims {ch}x{cw} for input {h}x{w}")
            conv_part.append(MaxPool2())
            ch, cw = ch // 2, cw // 2
    flat = ch * cw * plan[-1][2] if plan[-1][0] == "conv" else ch * cw * c3
    layers = tuple(conv_part) + (
        Flatten(),
        Dense(flat, fc1),
        ReLU(),
        Dense(fc1, embedding_dim),
        ReLU(),
        Dense(embedding_dim, n_classes),
    )
    split = len(layers) - 2
    return NetworkSpec("lenet", layers, split_index=split, embedding_dim=embedding_dim)


def linear_pair(in_features: int, embedding_dim: int, n_classes: int) -> NetworkSpec:
    """One linear embedding layer and one linear decision layer (no ReLU).

    Used by the convergence calibration, where the decision problem must stay
    convex, and by small hand-check tests.
    """
    layers = (Dense(in_features, embedding_dim), Dense(embedding_dim, n_classes))
    return NetworkSpec("linear", layers, split_index=1, embedding_dim=embedding_dim)


ARCHITECTURES = {"mlp3": mlp3, "cnn2": cnn2, "lenet": lenet, "linear": linear_pair}


def spec_from_name(name: str, in_features: int, embedding_dim: int, n_classes: int) -> NetworkSpec:
    try:
        builder = ARCHITECTURES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}")
    return builder(in_features, embedding_dim, n_classes)
