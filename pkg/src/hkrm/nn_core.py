"""Minimal dense kernel: stacked ReLU MLPs, analytic backprop, SGD with
momentum and weight decay, and finite-difference gradient checks.

Matrices are plain float64 numpy arrays, row-major, shape (rows, cols).
Batches run along rows: an MLP maps an (n, in_dim) input to (n, out_dim).
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

FINAL_ACTIVATIONS = ("linear", "sigmoid")


class ShapeError(ValueError):
    """Raised when array dimensions do not chain."""


class NumericError(ArithmeticError):
    """Raised on non-finite losses or gradients."""


def derive_seed(root, *names):
    """Derive a child seed from a root seed and a path of names.

    seed = first 8 bytes (little endian) of sha256("<root>/<name1>/<name2>...").
    Adding a new component name never shifts the streams of existing ones.
    """
    key = "/".join([str(int(root))] + [str(n) for n in names])
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class MlpStack:
    """Stack of affine layers with ReLU between them.

    ``layers`` is a list of (weight, bias) with weight of shape (in, out).
    The final layer is followed by ``final_activation`` (linear or sigmoid).
    """

    def __init__(self, layers, final_activation="linear"):
        if not layers:
            raise ShapeError("MlpStack needs at least one layer")
        if final_activation not in FINAL_ACTIVATIONS:
            raise ValueError(f"unknown final activation {final_activation!r}")
        checked = []
        for k, (w, b) in enumerate(layers):
            w = np.array(w, dtype=np.float64)
            b = np.array(b, dtype=np.float64).reshape(-1)
            if w.ndim != 2 or b.shape[0] != w.shape[1]:
                raise ShapeError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if checked and checked[-1][0].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {k}: input dim {w.shape[0]} != previous output dim {checked[-1][0].shape[1]}"
                )
            checked.append((w, b))
        self.layers = checked
        self.final_activation = final_activation

    @classmethod
    def init(cls, in_dim, dims, seed, final_activation="linear"):
        """He-uniform weights, zero biases; layer k uses seed derive_seed(seed, k)."""
        layers = []
        fan_in = in_dim
        for k, out in enumerate(dims):
            rng = np.random.default_rng(derive_seed(seed, k))
            bound = np.sqrt(6.0 / fan_in)
            layers.append((rng.uniform(-bound, bound, size=(fan_in, out)), np.zeros(out)))
            fan_in = out
        return cls(layers, final_activation)

    @classmethod
    def zeros(cls, in_dim, dims, final_activation="linear"):
        layers = []
        fan_in = in_dim
        for out in dims:
            layers.append((np.zeros((fan_in, out)), np.zeros(out)))
            fan_in = out
        return cls(layers, final_activation)

    @property
    def in_dim(self):
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self):
        return self.layers[-1][0].shape[1]

    @property
    def dims(self):
        return [w.shape[1] for w, _ in self.layers]

    def parameters(self):
        """Named views of the parameter arrays (mutating them mutates the MLP)."""
        params = {}
        for k, (w, b) in enumerate(self.layers):
            params[f"layer{k}.weight"] = w
            params[f"layer{k}.bias"] = b
        return params

    def num_parameters(self):
        return sum(p.size for p in self.parameters().values())

    def copy(self):
        return MlpStack([(w.copy(), b.copy()) for w, b in self.layers], self.final_activation)

    def __call__(self, x):
        return mlp_forward(self, x)[0]


def mlp_forward(mlp, x):
    """Run the stack on a batch. Returns (output, cache) for mlp_backward."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != mlp.in_dim:
        raise ShapeError(f"input has {x.shape[-1] if x.ndim else 0} columns, MLP expects {mlp.in_dim}")
    inputs = []
    pre = []
    h = x
    last = len(mlp.layers) - 1
    for k, (w, b) in enumerate(mlp.layers):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        if k < last:
            h = relu(z)
        elif mlp.final_activation == "sigmoid":
            h = sigmoid(z)
        else:
            h = z
    return h, {"inputs": inputs, "pre": pre, "output": h}


def mlp_backward(mlp, cache, upstream_grad):
    """Backpropagate dL/d(output). Returns (param_grads, input_grad).

    ``param_grads`` uses the same names as ``mlp.parameters()``.
    ReLU subgradient at 0 is 0.
    """
    g = np.asarray(upstream_grad, dtype=np.float64)
    out = cache["output"]
    if g.shape != out.shape:
        raise ShapeError(f"upstream gradient {g.shape} does not match output {out.shape}")
    if mlp.final_activation == "sigmoid":
        g = g * out * (1.0 - out)
    grads = {}
    for k in range(len(mlp.layers) - 1, -1, -1):
        w, _ = mlp.layers[k]
        h = cache["inputs"][k]
        grads[f"layer{k}.weight"] = h.T @ g
        grads[f"layer{k}.bias"] = g.sum(axis=0)
        g = g @ w.T
        if k > 0:
            g = g * (cache["pre"][k - 1] > 0.0)
    ordered = {name: grads[name] for name in mlp.parameters()}
    return ordered, g


def max_relative_error(analytic, numeric):
    """max |a - n| / max(|a|, |n|, 1e-8), elementwise over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom))


def numeric_gradients(loss, params, h=1e-5):
    """Central finite differences of ``loss()`` w.r.t. each array in ``params``.

    Arrays are perturbed in place and restored bitwise afterwards.
    """
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            lp = loss()
            flat[idx] = orig - h
            lm = loss()
            flat[idx] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError(f"non-finite loss while perturbing {name}[{idx}]")
            gflat[idx] = (lp - lm) / (2.0 * h)
        out[name] = g
    return out


def check_gradients(loss_and_grads, params, h=1e-5):
    """Compare analytic and central-difference gradients.

    ``loss_and_grads()`` returns (loss, {name: grad}) evaluated at the current
    values of ``params``. Returns the max relative error over every entry.
    """
    loss0, analytic = loss_and_grads()
    if not np.isfinite(loss0):
        raise NumericError("loss is not finite")
    numeric = numeric_gradients(lambda: loss_and_grads()[0], params, h)
    return max(max_relative_error(analytic[name], numeric[name]) for name in params)


def grad_check(mlp, loss_fn, x, h=1e-5, include_input=False):
    """Max relative gradient error of an MLP under ``loss_fn``.

    ``loss_fn(output)`` returns (scalar loss, dloss/doutput).
    """
    x = np.array(x, dtype=np.float64)
    params = dict(mlp.parameters())
    if include_input:
        params["input"] = x

    def loss_and_grads():
        out, cache = mlp_forward(mlp, x)
        loss, g = loss_fn(out)
        grads, gin = mlp_backward(mlp, cache, g)
        if include_input:
            grads["input"] = gin
        return float(loss), grads

    return check_gradients(loss_and_grads, params, h)


@dataclass
class SgdState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate >= 0.0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not self.weight_decay >= 0.0:
            raise ValueError("weight_decay must be nonnegative")


def sgd_step(params, grads, state):
    """In-place SGD update over a dict of named arrays.

    v <- momentum * v - lr * (grad + weight_decay * param)
    param <- param + v
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericError(f"non-finite gradient for {name}: {bad} of {np.size(g)} entries")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
            state.velocity[name] = v
        v *= state.momentum
        v -= state.learning_rate * (g + state.weight_decay * p)
        p += v
    return params
