"""Calibration network: a small dense net mapping an observed series to
positive model parameters, trained with Adam.

The final layer always applies the absolute value, so outputs live on the
closed positive half-line, matching the uniform-on-R+ priors. Hidden
activations are tanh or sigmoid depending on the problem.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Var, sigmoid as _vsigmoid, tanh as _vtanh
from .dynamics import ParamEntry, ParameterVector
from .errors import DivergedGradient, PretrainFailed, ShapeError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_ACTIVATIONS = ("tanh", "sigmoid", "abs", "identity")


@dataclass(frozen=True)
class NetConfig:
    """Architecture and optimizer settings.

    depth counts hidden layers; batch_size None means the full series is
    the input window (the setting used throughout).
    """

    depth: int = 2
    width: int = 20
    activation: str = "tanh"
    learning_rate: float = 0.002
    batch_size: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ValueError("depth and width must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.activation not in ("tanh", "sigmoid"):
            raise ValueError("hidden activation must be tanh or sigmoid")


class MlpState:
    """Weights, biases, activations and Adam moments of the network."""

    __slots__ = ("layer_sizes", "weights", "biases", "activations",
                 "m_w", "v_w", "m_b", "v_b", "step_count", "output_template")

    def __init__(self, layer_sizes, weights, biases, activations,
                 output_template):
        if activations[-1] != "abs":
            raise ValueError("final activation must be abs (positive outputs)")
        for a in activations:
            if a not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.layer_sizes = list(layer_sizes)
        self.weights = weights
        self.biases = biases
        self.activations = list(activations)
        self.m_w = [np.zeros_like(w) for w in weights]
        self.v_w = [np.zeros_like(w) for w in weights]
        self.m_b = [np.zeros_like(b) for b in biases]
        self.v_b = [np.zeros_like(b) for b in biases]
        self.step_count = 0
        self.output_template = output_template

    @property
    def input_dim(self):
        return self.layer_sizes[0]

    @property
    def output_dim(self):
        return self.layer_sizes[-1]

    def copy(self):
        dup = MlpState(self.layer_sizes,
                       [w.copy() for w in self.weights],
                       [b.copy() for b in self.biases],
                       self.activations, self.output_template)
        dup.m_w = [m.copy() for m in self.m_w]
        dup.v_w = [v.copy() for v in self.v_w]
        dup.m_b = [m.copy() for m in self.m_b]
        dup.v_b = [v.copy() for v in self.v_b]
        dup.step_count = self.step_count
        return dup


def build_network(config, input_dim, output_template):
    """Fresh network with uniform +-1/sqrt(fan_in) weights.

    output_template is a ParameterVector defining the names (and piecewise
    structure) of the calibrated parameters; the output width is its flat
    length.
    """
    rng = np.random.default_rng(config.seed)
    out_dim = len(output_template.flat_names())
    sizes = [int(input_dim)] + [config.width] * config.depth + [out_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    activations = [config.activation] * config.depth + ["abs"]
    return MlpState(sizes, weights, biases, activations, output_template)


def _sigmoid_array(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward_values(net, x):
    """Raw positive output vector for a flat input window."""
    x = np.asarray(x, dtype=float)
    if x.shape != (net.input_dim,):
        raise ShapeError(f"expected input of length {net.input_dim}, "
                         f"got {x.shape}")
    h = x
    for w, b, act in zip(net.weights, net.biases, net.activations):
        z = w @ h + b
        if act == "tanh":
            h = np.tanh(z)
        elif act == "sigmoid":
            h = _sigmoid_array(z)
        elif act == "abs":
            h = np.abs(z)
        else:
            h = z
    return h


def forward(net, x):
    """Parameter estimate for a flat input window, as a ParameterVector."""
    return net.output_template.with_flat_values(forward_values(net, x))


class MlpBinding:
    """Tape locations of a network's weights for one forward/backward cycle."""

    __slots__ = ("blocks",)

    def __init__(self, blocks):
        self.blocks = blocks

    def extract(self, grad_map):
        """Per-layer (dW, db) gradient arrays from a GradientMap."""
        grads = []
        for w_start, b_start, shape in self.blocks:
            rows, cols = shape
            gw = grad_map.block(w_start, rows * cols).reshape(rows, cols)
            gb = grad_map.block(b_start, rows)
            grads.append((gw, gb))
        return grads


def forward_ad(tape, net, x):
    """Record the forward pass on a tape; returns (output Vars, binding)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (net.input_dim,):
        raise ShapeError(f"expected input of length {net.input_dim}, "
                         f"got {x.shape}")
    blocks = []
    h = None
    for li, (w, b, act) in enumerate(zip(net.weights, net.biases,
                                         net.activations)):
        w_start = tape.leaf_block(w)
        b_start = tape.leaf_block(b)
        blocks.append((w_start, b_start, w.shape))
        if li == 0:
            z = tape.linear_block(w_start, w, x, b_start, b)
        else:
            z = tape.bilinear_block(w_start, w, h, b_start, b)
        if act == "tanh":
            h = [_vtanh(v) for v in z]
        elif act == "sigmoid":
            h = [_vsigmoid(v) for v in z]
        elif act == "abs":
            h = [abs(v) for v in z]
        else:
            h = z
    return h, MlpBinding(blocks)


def adam_step(net, grads, lr):
    """One Adam update (bias-corrected, beta1=0.9, beta2=0.999, eps=1e-8).

    grads is the per-layer list of (dW, db) arrays as produced by
    MlpBinding.extract. The network is updated in place and returned.
    """
    for gw, gb in grads:
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise DivergedGradient("non-finite gradient in Adam update")
    net.step_count += 1
    t = net.step_count
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for li, (gw, gb) in enumerate(grads):
        for g, val, m, v in ((gw, net.weights[li], net.m_w[li], net.v_w[li]),
                             (gb, net.biases[li], net.m_b[li], net.v_b[li])):
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            val -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return net


def pretrain_to(net, target, x, tol=1e-3, max_iters=10000, lr=None,
                patience=400):
    """Train the network to emit `target` on input `x` before calibration.

    Minimizes the Euclidean distance between output and target; the
    learning rate is halved whenever the residual stalls for `patience`
    iterations. Raises PretrainFailed with the best residual if the
    iteration cap is hit. Only weights, biases and moments change.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    flat = (np.asarray(target.flat_values(), dtype=float)
            if isinstance(target, ParameterVector)
            else np.asarray(target, dtype=float))
    if flat.shape != (net.output_dim,):
        raise ShapeError("target length does not match the output layer")
    if np.any(flat < 0):
        raise ValueError("pretraining targets must be nonnegative")
    step = float(lr) if lr is not None else 0.01
    ones = np.ones(flat.size)
    best = np.inf
    since_best = 0
    for it in range(max_iters):
        tape = Tape()
        out, binding = forward_ad(tape, net, x)
        sq = tape.weighted_sse(out, flat, ones)
        if sq.value == 0.0:
            return net
        dist = sq ** 0.5
        if dist.value < tol:
            return net
        if dist.value < best - 1e-15:
            best = dist.value
            since_best = 0
        else:
            since_best += 1
            if since_best >= patience:
                step *= 0.5
                since_best = 0
        grads = binding.extract(tape.backward(dist))
        adam_step(net, grads, step)
    raise PretrainFailed(best, max_iters)


# --- weight snapshots --------------------------------------------------------

SNAPSHOT_FORMAT = "epical-mlp/1"


def save_weights(net, path):
    """Write a versioned JSON snapshot (sizes, activations, row-major weights)."""
    record = {
        "format": SNAPSHOT_FORMAT,
        "layer_sizes": net.layer_sizes,
        "activations": net.activations,
        "output_structure": [
            {"name": e.name, "values": [float(v) for v in e.values],
             "breakpoints": list(e.breakpoints)}
            for e in net.output_template.entries
        ],
        "weights": [w.ravel().tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "step_count": net.step_count,
    }
    with open(path, "w") as fh:
        json.dump(record, fh)


def load_weights(path):
    with open(path) as fh:
        record = json.load(fh)
    if record.get("format") != SNAPSHOT_FORMAT:
        raise ValueError(f"unsupported snapshot format {record.get('format')!r}")
    sizes = record["layer_sizes"]
    template = ParameterVector([
        ParamEntry(e["name"], tuple(e["values"]), tuple(e["breakpoints"]))
        for e in record["output_structure"]
    ])
    weights = [np.array(w).reshape(o, i) for w, i, o in
               zip(record["weights"], sizes[:-1], sizes[1:])]
    biases = [np.array(b) for b in record["biases"]]
    net = MlpState(sizes, weights, biases, record["activations"], template)
    net.step_count = int(record.get("step_count", 0))
    return net
