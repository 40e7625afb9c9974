"""Dense-network engine: layers, activations, losses, backprop, Adam, checkpoints.

Deliberately small and explicit. Everything runs in float64 with seeded
initialization so whole training trajectories reproduce bit-for-bit, and the
forward pass returns a full trace (per-layer inputs and pre-activations)
because downstream code needs the final hidden vector and the output
probabilities, not just the network output.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LEAKY_SLOPE = 0.01

IDENTITY = "identity"
LEAKY_RELU = "leaky_relu"
SOFTMAX = "softmax"

_ACT_TAG = {IDENTITY: 0, LEAKY_RELU: 1, SOFTMAX: 2}
_TAG_ACT = {tag: name for name, tag in _ACT_TAG.items()}

_MAGIC = b"MHFDNET\x00"
_FORMAT_VERSION = 1


class CheckpointError(Exception):
    """A network checkpoint is unreadable or does not fit its consumer."""


@dataclass
class Layer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray     # (out,)
    activation: str

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "Layer":
        return Layer(self.weights.copy(), self.bias.copy(), self.activation)


@dataclass
class DenseNet:
    layers: list[Layer]

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]

    @property
    def activations(self) -> list[str]:
        return [layer.activation for layer in self.layers]

    def copy(self) -> "DenseNet":
        return DenseNet([layer.copy() for layer in self.layers])

    def param_count(self) -> int:
        return sum(layer.weights.size + layer.bias.size for layer in self.layers)


@dataclass
class ForwardTrace:
    """Everything the forward pass saw: inputs[k] and pre[k] per layer k.

    inputs[0] is the batch itself; inputs[-1] is the final hidden vector
    (the input of the output layer). out is the final activation.
    """

    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    out: np.ndarray

    @property
    def final_input(self) -> np.ndarray:
        return self.inputs[-1]

    @property
    def probs(self) -> np.ndarray:
        return self.out


def init(dims: list[int], activations: list[str], seed) -> DenseNet:
    """Build a network with weights uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].

    Biases start at zero. `seed` may be an int or a numpy Generator; passing a
    Generator lets a caller derive several nets from one stream.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError(f"dims must describe at least one layer, got {dims}")
    if any(d < 1 for d in dims):
        raise ValueError(f"all dims must be positive, got {dims}")
    if len(activations) != len(dims) - 1:
        raise ValueError(
            f"need {len(dims) - 1} activations for dims {dims}, got {len(activations)}"
        )
    for k, act in enumerate(activations):
        if act not in _ACT_TAG:
            raise ValueError(f"unknown activation {act!r}")
        if act == SOFTMAX and k != len(activations) - 1:
            raise ValueError("softmax is only supported as the final activation")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for k in range(len(dims) - 1):
        fan_in, fan_out = dims[k], dims[k + 1]
        bound = 1.0 / np.sqrt(fan_in)
        weights = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append(Layer(weights, np.zeros(fan_out), activations[k]))
    return DenseNet(layers)


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == IDENTITY:
        return z
    if activation == LEAKY_RELU:
        return np.where(z > 0, z, LEAKY_SLOPE * z)
    if activation == SOFTMAX:
        shifted = z - z.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)
    raise ValueError(f"unknown activation {activation!r}")


def forward(net: DenseNet, batch: np.ndarray) -> ForwardTrace:
    """Run a (B, in_dim) batch through the net, retaining all intermediates."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"batch must be 2-d (B, in_dim), got shape {x.shape}")
    if x.shape[1] != net.layers[0].in_dim:
        raise ValueError(
            f"batch width {x.shape[1]} does not match net input dim {net.layers[0].in_dim}"
        )
    inputs: list[np.ndarray] = []
    pre: list[np.ndarray] = []
    for layer in net.layers:
        inputs.append(x)
        z = x @ layer.weights.T + layer.bias
        pre.append(z)
        x = _activate(z, layer.activation)
    return ForwardTrace(inputs, pre, x)


def cross_entropy(trace: ForwardTrace, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of a two-class softmax output.

    Returns (loss, grad) where grad is with respect to the output layer's
    pre-softmax values, i.e. the fused softmax/cross-entropy shortcut
    (p - onehot) / B. Targets are class indices in {0, 1}.
    """
    p = trace.out
    if p.ndim != 2 or p.shape[1] != 2:
        raise ValueError(f"cross_entropy expects (B, 2) probabilities, got {p.shape}")
    t = np.asarray(targets)
    if t.shape != (p.shape[0],):
        raise ValueError(f"targets shape {t.shape} does not match batch size {p.shape[0]}")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("invalid class index: targets must be 0 or 1")
    t = t.astype(np.intp)
    b = p.shape[0]
    rows = np.arange(b)
    loss = float(-np.log(p[rows, t]).sum() / b)
    grad = p.copy()
    grad[rows, t] -= 1.0
    grad /= b
    return loss, grad


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error. Returns (loss, grad) with grad = 2 (pred - target) / B."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    target = np.asarray(target, dtype=np.float64).ravel()
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} vs target shape {target.shape}")
    if pred.size == 0:
        raise ValueError("mse of an empty batch")
    diff = pred - target
    loss = float((diff * diff).sum() / diff.size)
    grad = 2.0 * diff / diff.size
    return loss, grad


def backward(net: DenseNet, trace: ForwardTrace, output_grad: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Backpropagate output_grad through the net.

    For a softmax output layer, output_grad must already be with respect to
    the pre-softmax values (as produced by cross_entropy); for identity and
    leaky-ReLU outputs it is with respect to the activation itself. Returns
    one (weight_grad, bias_grad) pair per layer, in layer order.
    """
    n = len(net.layers)
    if len(trace.inputs) != n or len(trace.pre) != n:
        raise ValueError("trace does not match net: wrong layer count")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != trace.out.shape:
        raise ValueError(f"output_grad shape {g.shape} does not match output {trace.out.shape}")
    grads: list[tuple[np.ndarray, np.ndarray] | None] = [None] * n
    for k in reversed(range(n)):
        layer = net.layers[k]
        z = trace.pre[k]
        x = trace.inputs[k]
        if z.shape[1] != layer.out_dim or x.shape[1] != layer.in_dim:
            raise ValueError(f"trace does not match net at layer {k} (stale trace?)")
        if layer.activation == SOFTMAX:
            dz = g  # fused with cross_entropy: g is already d/d(pre-activation)
        elif layer.activation == LEAKY_RELU:
            dz = g * np.where(z > 0, 1.0, LEAKY_SLOPE)
        else:
            dz = g
        grads[k] = (dz.T @ x, dz.sum(axis=0))
        if k:
            g = dz @ layer.weights
    return grads  # type: ignore[return-value]


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    v: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


def init_adam(net: DenseNet, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for layer in net.layers:
        state.m.append((np.zeros_like(layer.weights), np.zeros_like(layer.bias)))
        state.v.append((np.zeros_like(layer.weights), np.zeros_like(layer.bias)))
    return state


def adam_step(net: DenseNet, grads: list[tuple[np.ndarray, np.ndarray]],
              state: AdamState) -> tuple[DenseNet, AdamState]:
    """Apply one bias-corrected Adam update in place; returns (net, state)."""
    if len(grads) != len(net.layers) or len(state.m) != len(net.layers):
        raise ValueError("grads/state do not match net layer count")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for layer, (gw, gb), (mw, mb), (vw, vb) in zip(net.layers, grads, state.m, state.v):
        if gw.shape != layer.weights.shape or gb.shape != layer.bias.shape:
            raise ValueError("gradient shape does not match layer")
        mw *= state.beta1
        mw += (1.0 - state.beta1) * gw
        mb *= state.beta1
        mb += (1.0 - state.beta1) * gb
        vw *= state.beta2
        vw += (1.0 - state.beta2) * (gw * gw)
        vb *= state.beta2
        vb += (1.0 - state.beta2) * (gb * gb)
        layer.weights -= state.lr * (mw / c1) / (np.sqrt(vw / c2) + state.eps)
        layer.bias -= state.lr * (mb / c1) / (np.sqrt(vb / c2) + state.eps)
    return net, state


def save(net: DenseNet, path) -> None:
    """Write a self-describing little-endian binary checkpoint.

    Layout: magic (8 bytes), format version (u8), layer count (u32), then per
    layer: in_dim (u32), out_dim (u32), activation tag (u8), weights row-major
    (out*in f64), bias (out f64).
    """
    chunks = [_MAGIC, struct.pack("<B", _FORMAT_VERSION), struct.pack("<I", len(net.layers))]
    for layer in net.layers:
        chunks.append(struct.pack("<IIB", layer.in_dim, layer.out_dim, _ACT_TAG[layer.activation]))
        chunks.append(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load(path) -> DenseNet:
    """Read a checkpoint written by save(). Raises CheckpointError on damage."""
    buf = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint (wanted {n} bytes at offset {off})")
        piece = buf[off:off + n]
        off += n
        return piece

    if take(8) != _MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a network checkpoint")
    version = struct.unpack("<B", take(1))[0]
    if version != _FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (n_layers,) = struct.unpack("<I", take(4))
    layers = []
    for k in range(n_layers):
        in_dim, out_dim, tag = struct.unpack("<IIB", take(9))
        if tag not in _TAG_ACT:
            raise CheckpointError(f"{path}: layer {k} has unknown activation tag {tag}")
        weights = np.frombuffer(take(8 * in_dim * out_dim), dtype="<f8").reshape(out_dim, in_dim).copy()
        bias = np.frombuffer(take(8 * out_dim), dtype="<f8").copy()
        layers.append(Layer(weights, bias, _TAG_ACT[tag]))
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes after last layer")
    if not layers:
        raise CheckpointError(f"{path}: checkpoint contains no layers")
    return DenseNet(layers)


def fingerprint(net: DenseNet) -> str:
    """Hex digest of topology and exact parameter bytes; equal iff nets are bit-identical."""
    h = hashlib.sha256()
    for layer in net.layers:
        h.update(struct.pack("<IIB", layer.in_dim, layer.out_dim, _ACT_TAG[layer.activation]))
        h.update(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    return h.hexdigest()
