"""Feedforward networks with activation capture and logit-pair gradients.

A network is a flat sequence of primitive layers (``dense``, ``conv2d``,
``relu``) obeying the grammar ``(affine relu?)+``: every affine layer starts a
*block*, an immediately following ReLU belongs to the same block.  "Layer l"
always means the activation emitted by the l-th block; the raw input is layer
0.  All arithmetic is float64.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, InvalidPairError, ShapeError

__all__ = [
    "Dense",
    "Conv2d",
    "Relu",
    "Network",
    "ActivationTrace",
    "PairGradient",
    "forward",
    "forward_from",
    "relu_pattern_from",
    "logit_pair_gradients",
    "scale_layer_pair",
    "fold_affine_normalization",
    "save_model",
    "load_model",
]


def _frozen_array(values, shape=None) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dense:
    """Affine map ``y = W x + b``; flattens its input if needed."""

    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    kind: str = field(default="dense", init=False)

    def __post_init__(self):
        w = _frozen_array(self.weight)
        b = _frozen_array(self.bias)
        if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise ShapeError(
                f"dense layer expects weight (out,in) and bias (out,), got "
                f"{w.shape} and {b.shape}"
            )
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True, eq=False)
class Conv2d:
    """Strided 2-D convolution, valid padding only."""

    weight: np.ndarray  # (out_channels, in_channels, k, k)
    bias: np.ndarray  # (out_channels,)
    stride: int = 1
    kind: str = field(default="conv2d", init=False)

    def __post_init__(self):
        w = _frozen_array(self.weight)
        b = _frozen_array(self.bias)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"conv2d weight must be (out,in,k,k), got {w.shape}")
        if b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise ShapeError(f"conv2d bias must be (out_channels,), got {b.shape}")
        if self.stride < 1:
            raise ShapeError(f"conv2d stride must be >= 1, got {self.stride}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]


@dataclass(frozen=True)
class Relu:
    kind: str = field(default="relu", init=False)


Layer = Dense | Conv2d | Relu


def _conv_out_hw(in_hw: tuple[int, int], k: int, stride: int) -> tuple[int, int]:
    return ((in_hw[0] - k) // stride + 1, (in_hw[1] - k) // stride + 1)


def _propagate_shape(layer: Layer, shape: tuple[int, ...], index: int) -> tuple[int, ...]:
    """Output shape of ``layer`` fed an input of ``shape``; raises ShapeError."""
    if isinstance(layer, Dense):
        if math.prod(shape) != layer.in_dim:
            raise ShapeError(
                f"layer {index} (dense) expects {layer.in_dim} inputs, "
                f"got shape {shape}"
            )
        return (layer.out_dim,)
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ShapeError(
                f"layer {index} (conv2d) expects (channels={layer.in_channels}, H, W), "
                f"got shape {shape}"
            )
        k, s = layer.kernel_size, layer.stride
        if shape[1] < k or shape[2] < k:
            raise ShapeError(f"layer {index} (conv2d) kernel {k} exceeds input {shape}")
        oh, ow = _conv_out_hw((shape[1], shape[2]), k, s)
        if oh < 1 or ow < 1:
            raise ShapeError(f"layer {index} (conv2d) produces empty output from {shape}")
        return (layer.out_channels, oh, ow)
    return shape


@dataclass(frozen=True, eq=False)
class Network:
    """Ordered feedforward graph; immutable after construction.

    ``input_shape`` may be omitted for networks whose first layer is dense
    (then it is ``(in_dim,)``); convolutional networks must state it because
    the spatial extent is not recoverable from the weights.
    """

    layers: tuple[Layer, ...]
    class_count: int
    input_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if not layers:
            raise ShapeError("network needs at least one layer")
        prev_affine = False
        for idx, layer in enumerate(layers):
            if isinstance(layer, Relu):
                if not prev_affine:
                    raise ShapeError(
                        f"layer {idx}: relu must directly follow a dense/conv2d layer"
                    )
                prev_affine = False
            else:
                prev_affine = True
                if not (np.isfinite(layer.weight).all() and np.isfinite(layer.bias).all()):
                    raise ShapeError(f"layer {idx}: non-finite weights")
        shape = self.input_shape
        if shape is None:
            first = layers[0]
            if isinstance(first, Dense):
                shape = (first.in_dim,)
            else:
                raise ShapeError("input_shape is required when the first layer is conv2d")
        shape = tuple(int(d) for d in shape)
        object.__setattr__(self, "input_shape", shape)
        for idx, layer in enumerate(layers):
            shape = _propagate_shape(layer, shape, idx)
        object.__setattr__(self, "_output_shape", shape)
        if math.prod(shape) != self.class_count:
            raise ShapeError(
                f"final layer emits {math.prod(shape)} values, "
                f"expected class_count={self.class_count}"
            )
        # primitive index at which each block's activation is produced
        ends = []
        for idx, layer in enumerate(layers):
            if isinstance(layer, Relu):
                ends[-1] = idx
            else:
                ends.append(idx)
        object.__setattr__(self, "_block_ends", tuple(ends))

    @property
    def block_ends(self) -> tuple[int, ...]:
        return self._block_ends  # type: ignore[attr-defined]

    @property
    def n_blocks(self) -> int:
        return len(self.block_ends)

    @property
    def hidden_count(self) -> int:
        return self.n_blocks - 1

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self._output_shape  # type: ignore[attr-defined]

    def layer_shape(self, layer_index: int) -> tuple[int, ...]:
        """Shape of the activation at block index ``layer_index`` (0 = input)."""
        if not 0 <= layer_index <= self.n_blocks:
            raise IndexError(f"layer index {layer_index} out of range 0..{self.n_blocks}")
        shape = self.input_shape
        upto = -1 if layer_index == 0 else self.block_ends[layer_index - 1]
        for idx in range(upto + 1):
            shape = _propagate_shape(self.layers[idx], shape, idx)
        return shape


@dataclass(frozen=True, eq=False)
class ActivationTrace:
    """All block activations of one forward pass plus the final logits.

    ``activations[0]`` is the input exactly as given; ``activations[l]`` is
    the block-l output; ``logits`` is the flattened final activation.
    ``layer_outputs`` keeps every primitive layer's output so a reverse pass
    can recover ReLU masks without recomputing the forward.
    """

    activations: tuple[np.ndarray, ...]
    logits: np.ndarray
    layer_outputs: tuple[np.ndarray, ...]


@dataclass(frozen=True, eq=False)
class PairGradient:
    """Gradients of ``f_i - f_j`` with respect to selected block activations."""

    per_layer: dict[int, np.ndarray]
    pair: tuple[int, int]


# ---------------------------------------------------------------------------
# primitive forward / backward kernels (batched over axis 0)

def conv2d_batch(x: np.ndarray, layer: Conv2d) -> np.ndarray:
    """x: (N, C_in, H, W) -> (N, C_out, H', W')."""
    k, s = layer.kernel_size, layer.stride
    oh, ow = _conv_out_hw((x.shape[2], x.shape[3]), k, s)
    out = np.zeros((x.shape[0], layer.out_channels, oh, ow))
    for ki in range(k):
        for kj in range(k):
            patch = x[:, :, ki : ki + s * oh : s, kj : kj + s * ow : s]
            out += np.einsum("oc,bchw->bohw", layer.weight[:, :, ki, kj], patch)
    return out + layer.bias[None, :, None, None]


def conv2d_input_grad_batch(d: np.ndarray, layer: Conv2d, x_shape) -> np.ndarray:
    """d: (N, C_out, H', W') cotangent -> gradient w.r.t. the (N, *x_shape) input."""
    k, s = layer.kernel_size, layer.stride
    oh, ow = d.shape[2], d.shape[3]
    dx = np.zeros((d.shape[0],) + tuple(x_shape))
    for ki in range(k):
        for kj in range(k):
            contrib = np.einsum("oc,bohw->bchw", layer.weight[:, :, ki, kj], d)
            dx[:, :, ki : ki + s * oh : s, kj : kj + s * ow : s] += contrib
    return dx


def conv2d_weight_grad_batch(d: np.ndarray, layer: Conv2d, x: np.ndarray):
    """Accumulated (dW, db) for a batch: d (N,C_out,H',W'), x (N,C_in,H,W)."""
    k, s = layer.kernel_size, layer.stride
    oh, ow = d.shape[2], d.shape[3]
    dw = np.zeros_like(layer.weight)
    for ki in range(k):
        for kj in range(k):
            patch = x[:, :, ki : ki + s * oh : s, kj : kj + s * ow : s]
            dw[:, :, ki, kj] = np.einsum("bohw,bchw->oc", d, patch)
    db = d.sum(axis=(0, 2, 3))
    return dw, db


def apply_layer(layer: Layer, x: np.ndarray) -> np.ndarray:
    """Single-sample primitive forward."""
    if isinstance(layer, Dense):
        return layer.weight @ x.reshape(-1) + layer.bias
    if isinstance(layer, Conv2d):
        return conv2d_batch(x[None], layer)[0]
    return np.maximum(x, 0.0)


def _backprop_layer(layer: Layer, d: np.ndarray, x_in: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Single-sample cotangent pull-back through one primitive."""
    if isinstance(layer, Dense):
        return (layer.weight.T @ d.reshape(-1)).reshape(x_in.shape)
    if isinstance(layer, Conv2d):
        return conv2d_input_grad_batch(d[None], layer, x_in.shape)[0]
    # relu subgradient: 0 at exactly 0 (out > 0 iff pre-activation > 0)
    return d * (out > 0.0)


# ---------------------------------------------------------------------------
# public operations

def forward(net: Network, input: np.ndarray) -> ActivationTrace:
    """Run the network on one sample, capturing every block activation.

    Inference semantics: deterministic, no dropout.  The input must match the
    network's input shape exactly.
    """
    x = np.array(input, dtype=np.float64)
    if x.shape != net.input_shape:
        raise ShapeError(
            f"layer 0 expects input shape {net.input_shape}, got {x.shape}"
        )
    outputs: list[np.ndarray] = []
    cur = x
    for layer in net.layers:
        cur = apply_layer(layer, cur)
        outputs.append(cur)
    activations = (x,) + tuple(outputs[e] for e in net.block_ends)
    logits = outputs[-1].reshape(-1)
    return ActivationTrace(activations=activations, logits=logits, layer_outputs=tuple(outputs))


def forward_from(net: Network, layer_index: int, activation: np.ndarray) -> np.ndarray:
    """Replay the tail of the network from a stored block-``layer_index``
    activation; returns the flattened logits."""
    if not 0 <= layer_index <= net.n_blocks:
        raise IndexError(f"layer index {layer_index} out of range 0..{net.n_blocks}")
    start = 0 if layer_index == 0 else net.block_ends[layer_index - 1] + 1
    cur = np.asarray(activation, dtype=np.float64)
    for layer in net.layers[start:]:
        cur = apply_layer(layer, cur)
    return cur.reshape(-1)


def relu_pattern_from(net: Network, layer_index: int, activation: np.ndarray) -> tuple[np.ndarray, ...]:
    """Boolean on/off pattern of every ReLU in the tail starting after block
    ``layer_index``.  Two points with identical patterns lie in the same
    linear region of the tail map."""
    if not 0 <= layer_index <= net.n_blocks:
        raise IndexError(f"layer index {layer_index} out of range 0..{net.n_blocks}")
    start = 0 if layer_index == 0 else net.block_ends[layer_index - 1] + 1
    cur = np.asarray(activation, dtype=np.float64)
    pattern = []
    for layer in net.layers[start:]:
        cur = apply_layer(layer, cur)
        if isinstance(layer, Relu):
            pattern.append(cur > 0.0)
    return tuple(pattern)


def logit_pair_gradients(
    net: Network,
    trace: ActivationTrace,
    i: int,
    j: int,
    layers: Iterable[int],
) -> PairGradient:
    """Gradient of ``f_i - f_j`` w.r.t. every requested block activation.

    One reverse pass computes all of them: the cotangent reaching block l's
    output *is* the layer-l gradient.
    """
    if i == j:
        raise InvalidPairError(f"class pair requires i != j, got ({i}, {j})")
    n = net.class_count
    if not (0 <= i < n and 0 <= j < n):
        raise InvalidPairError(f"class pair ({i}, {j}) outside 0..{n - 1}")
    wanted = set(int(l) for l in layers)
    for l in wanted:
        if not 0 <= l <= net.n_blocks:
            raise IndexError(f"layer index {l} out of range 0..{net.n_blocks}")

    cot = np.zeros(net.class_count)
    cot[i] = 1.0
    cot[j] = -1.0
    cot = cot.reshape(trace.layer_outputs[-1].shape)

    grads: dict[int, np.ndarray] = {}
    block_of_end = {e: b + 1 for b, e in enumerate(net.block_ends)}
    if net.n_blocks in wanted:
        grads[net.n_blocks] = cot.copy()
    for idx in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[idx]
        x_in = trace.layer_outputs[idx - 1] if idx > 0 else trace.activations[0]
        cot = _backprop_layer(layer, cot, x_in, trace.layer_outputs[idx])
        # having crossed primitive idx, cot sits on the output of primitive idx-1
        b = block_of_end.get(idx - 1, 0 if idx == 0 else None)
        if b is not None and b in wanted:
            grads[b] = cot.copy()
    return PairGradient(per_layer=grads, pair=(i, j))


def _scaled_affine(layer: Layer, w_factor: float, b_factor: float) -> Layer:
    if isinstance(layer, Dense):
        return Dense(layer.weight * w_factor, layer.bias * b_factor)
    if isinstance(layer, Conv2d):
        return Conv2d(layer.weight * w_factor, layer.bias * b_factor, layer.stride)
    raise ShapeError("expected an affine layer")


def scale_layer_pair(net: Network, l: int, c: float) -> Network:
    """Multiply block ``l``'s weights and biases by ``c`` and divide block
    ``l+1``'s weights by ``c`` (its biases untouched).

    On ReLU networks this leaves the function unchanged (positive
    homogeneity) while rescaling the layer-l activation, and hence the
    unnormalized layer-l distances, by ``c``.
    """
    if not c > 0:
        raise ShapeError(f"scale factor must be positive, got {c}")
    if not 1 <= l <= net.n_blocks:
        raise IndexError(f"block index {l} out of range 1..{net.n_blocks}")
    if l == net.n_blocks:
        raise IndexError(f"block {l} is the last affine layer; nothing follows to unscale")
    layers = list(net.layers)
    for block, end in enumerate(net.block_ends, start=1):
        affine_idx = end if not isinstance(layers[end], Relu) else end - 1
        if block == l:
            layers[affine_idx] = _scaled_affine(layers[affine_idx], c, c)
        elif block == l + 1:
            layers[affine_idx] = _scaled_affine(layers[affine_idx], 1.0 / c, 1.0)
    return Network(tuple(layers), net.class_count, net.input_shape)


def fold_affine_normalization(
    net: Network,
    per_layer_scale: Mapping[int, np.ndarray | float],
    per_layer_shift: Mapping[int, np.ndarray | float] | None = None,
) -> Network:
    """Absorb per-channel ``scale * x + shift`` maps into the affine layers.

    Keys are block indices (1-based); values are scalars or vectors over the
    block's output channels.  The returned network's forward equals applying
    the normalization right after each affine of the original network.
    """
    per_layer_shift = per_layer_shift or {}
    layers = list(net.layers)
    blocks = set(per_layer_scale) | set(per_layer_shift)
    for block in blocks:
        if not 1 <= block <= net.n_blocks:
            raise IndexError(f"block index {block} out of range 1..{net.n_blocks}")
        end = net.block_ends[block - 1]
        affine_idx = end if not isinstance(layers[end], Relu) else end - 1
        layer = layers[affine_idx]
        out_ch = layer.out_dim if isinstance(layer, Dense) else layer.out_channels
        scale = np.broadcast_to(np.asarray(per_layer_scale.get(block, 1.0), dtype=np.float64), (out_ch,))
        shift = np.broadcast_to(np.asarray(per_layer_shift.get(block, 0.0), dtype=np.float64), (out_ch,))
        if np.any(scale == 0.0):
            raise ShapeError(f"block {block}: zero normalization scale")
        if isinstance(layer, Dense):
            layers[affine_idx] = Dense(scale[:, None] * layer.weight, scale * layer.bias + shift)
        else:
            layers[affine_idx] = Conv2d(
                scale[:, None, None, None] * layer.weight,
                scale * layer.bias + shift,
                layer.stride,
            )
    return Network(tuple(layers), net.class_count, net.input_shape)


# ---------------------------------------------------------------------------
# model (de)serialization

def _layer_to_json(layer: Layer) -> dict:
    if isinstance(layer, Dense):
        return {
            "kind": "dense",
            "in_dim": layer.in_dim,
            "out_dim": layer.out_dim,
            "weights": layer.weight.reshape(-1).tolist(),
            "bias": layer.bias.tolist(),
        }
    if isinstance(layer, Conv2d):
        return {
            "kind": "conv2d",
            "in_channels": layer.in_channels,
            "out_channels": layer.out_channels,
            "kernel_size": layer.kernel_size,
            "stride": layer.stride,
            "weights": layer.weight.reshape(-1).tolist(),
            "bias": layer.bias.tolist(),
        }
    return {"kind": "relu"}


def _layer_from_json(obj: dict) -> Layer:
    kind = obj.get("kind")
    if kind == "dense":
        w = _frozen_array(obj["weights"], (obj["out_dim"], obj["in_dim"]))
        return Dense(w, np.asarray(obj["bias"], dtype=np.float64))
    if kind == "conv2d":
        shape = (obj["out_channels"], obj["in_channels"], obj["kernel_size"], obj["kernel_size"])
        w = _frozen_array(obj["weights"], shape)
        return Conv2d(w, np.asarray(obj["bias"], dtype=np.float64), obj["stride"])
    if kind == "relu":
        return Relu()
    raise ConfigError(f"unknown layer kind {kind!r}")


def save_model(net: Network, path) -> None:
    doc = {
        "class_count": net.class_count,
        "input_shape": list(net.input_shape),
        "layers": [_layer_to_json(layer) for layer in net.layers],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_model(path) -> Network:
    with open(path) as fh:
        doc = json.load(fh)
    layers = tuple(_layer_from_json(obj) for obj in doc["layers"])
    input_shape = tuple(doc["input_shape"]) if "input_shape" in doc else None
    return Network(layers, int(doc["class_count"]), input_shape)
