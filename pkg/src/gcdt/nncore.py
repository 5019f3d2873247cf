"""Small dense-network substrate with hand-written backpropagation.

Everything here works on numpy arrays and batches along the leading axis,
so ``x`` may be a single vector of shape ``(in_dim,)`` or a matrix of shape
``(batch, in_dim)``.  Gradients are exact; there is no graph autodiff, just
the chain rule applied layer by layer.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh", "identity")
CHECKPOINT_VERSION = 1


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z, a, kind):
    # derivative expressed through the pre-activation z and output a
    if kind == "relu":
        return (z > 0.0).astype(z.dtype)
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass
class DenseNet:
    """A chain of affine layers, each followed by an activation.

    ``weights[i]`` has shape ``(fan_in, fan_out)`` so a batched forward pass
    is ``x @ W + b``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("weights, biases and activations must have equal length")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(
                    f"layer {i}: fan_in {w.shape[0]} != previous fan_out {self.weights[i - 1].shape[1]}"
                )

    @classmethod
    def create(cls, sizes, activations, rng) -> DenseNet:
        """He-style uniform init: U(-sqrt(6/fan_in), sqrt(6/fan_in)), zero biases."""
        if len(sizes) - 1 != len(activations):
            raise ValueError("need one activation per layer")
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, list(activations))

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> DenseNet:
        return DenseNet(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )

    def _check(self, x):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input dimension {self.in_dim}, got {x.shape[-1]}")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        self._check(x)
        for w, b, act in zip(self.weights, self.biases, self.activations):
            x = _activate(x @ w + b, act)
        return x

    def forward_cached(self, x):
        """Forward pass that also returns what :meth:`backprop` needs."""
        x = np.asarray(x, dtype=float)
        self._check(x)
        cache = []
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = x @ w + b
            a = _activate(z, act)
            cache.append((x, z, a))
            x = a
        return x, cache

    def backprop(self, cache, upstream, tape=None):
        """Accumulate parameter gradients into ``tape``; return the input gradient."""
        if tape is None:
            tape = GradientTape.zeros_like(self)
        grad = np.asarray(upstream, dtype=float)
        for i in reversed(range(len(self.weights))):
            x, z, a = cache[i]
            dz = grad * _activation_grad(z, a, self.activations[i])
            if x.ndim == 1:
                tape.weights[i] += np.outer(x, dz)
                tape.biases[i] += dz
            else:
                tape.weights[i] += x.T @ dz
                tape.biases[i] += dz.sum(axis=0)
            grad = dz @ self.weights[i].T
        return grad


@dataclass
class GradientTape:
    """Gradient accumulators shaped exactly like one DenseNet's parameters."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, net: DenseNet) -> GradientTape:
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])

    def zero(self):
        for g in self.parameters():
            g.fill(0.0)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def scale(self, factor):
        for g in self.parameters():
            g *= factor


def forward(net: DenseNet, x):
    return net(x)


def backward(net: DenseNet, x, upstream_grad):
    """Recompute the forward pass and return ``(tape, input_grad)``."""
    _, cache = net.forward_cached(x)
    tape = GradientTape.zeros_like(net)
    dx = net.backprop(cache, upstream_grad, tape)
    return tape, dx


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def entropy(p, axis=-1):
    p = np.asarray(p, dtype=float)
    return -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=axis)


def _check_distribution(target, tol=1e-9):
    target = np.asarray(target, dtype=float)
    if np.any(target < 0) or np.any(np.abs(target.sum(axis=-1) - 1.0) > tol):
        raise ValueError("target must be a probability distribution (non-negative, sums to 1)")
    return target


def loss_mse(pred, target):
    """Squared error ``(pred - target)**2``.

    The returned gradient is taken with respect to ``pred``: for pred=0,
    target=1 the value is 1 and the gradient is -2.
    """
    diff = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    return diff * diff, 2.0 * diff


def loss_cross_entropy(pred_logits, target_dist):
    """``-sum(target * log_softmax(pred_logits))`` and its gradient w.r.t. the logits."""
    target = _check_distribution(target_dist)
    logp = log_softmax(pred_logits)
    value = -np.sum(target * logp, axis=-1)
    return value, np.exp(logp) - target


def loss_kl(target_dist, pred_logits):
    """KL(target || softmax(pred_logits)) and its gradient w.r.t. the logits."""
    target = _check_distribution(target_dist)
    logp = log_softmax(pred_logits)
    safe = np.where(target > 0, target, 1.0)
    value = np.sum(np.where(target > 0, target * (np.log(safe) - logp), 0.0), axis=-1)
    return value, np.exp(logp) - target


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


def l2_penalty(nets) -> float:
    return float(sum(np.sum(p * p) for net in nets for p in net.parameters()))


@dataclass
class Optimizer:
    """SGD with momentum plus the ``c * ||theta||^2`` weight penalty.

    The penalty gradient ``2 c theta`` is added inside :meth:`step` unless
    the caller says the tapes already contain it (``add_l2=False``).
    """

    learning_rate: float = 0.01
    momentum: float = 0.9
    l2_coefficient: float = 1e-4
    max_grad_norm: float | None = None
    _velocity: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.l2_coefficient < 0:
            raise ValueError("l2_coefficient must be non-negative")

    def step(self, nets, tapes, add_l2=True):
        c = self.l2_coefficient if add_l2 else 0.0
        grads = []
        for net, tape in zip(nets, tapes):
            for p, g in zip(net.parameters(), tape.parameters()):
                grads.append(g + 2.0 * c * p if c else g)
        if self.max_grad_norm is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.max_grad_norm:
                grads = [g * (self.max_grad_norm / norm) for g in grads]
        i = 0
        for net in nets:
            for p in net.parameters():
                v = self._velocity.get(id(p))
                if v is None:
                    v = self._velocity[id(p)] = np.zeros_like(p)
                v *= self.momentum
                v += grads[i]
                p -= self.learning_rate * v
                i += 1


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def nets_to_arrays(named_nets: dict[str, DenseNet]) -> dict[str, np.ndarray]:
    arrays = {"__version__": np.array(CHECKPOINT_VERSION)}
    for name, net in named_nets.items():
        arrays[f"{name}/activations"] = np.array(net.activations)
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            arrays[f"{name}/W{i}"] = w
            arrays[f"{name}/b{i}"] = b
    return arrays


def nets_from_arrays(arrays) -> dict[str, DenseNet]:
    version = int(arrays["__version__"])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    names = sorted({k.split("/")[0] for k in arrays if "/" in k and k.endswith("/activations")})
    nets = {}
    for name in names:
        acts = [str(a) for a in arrays[f"{name}/activations"]]
        weights = [np.array(arrays[f"{name}/W{i}"]) for i in range(len(acts))]
        biases = [np.array(arrays[f"{name}/b{i}"]) for i in range(len(acts))]
        nets[name] = DenseNet(weights, biases, acts)
    return nets


def save_nets(path, named_nets: dict[str, DenseNet], **extra):
    """Write networks (and any extra arrays) as an uncompressed npz archive."""
    arrays = nets_to_arrays(named_nets)
    for key, value in extra.items():
        arrays[f"__extra__{key}"] = np.asarray(value)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_nets(path):
    """Inverse of :func:`save_nets`; returns ``(nets, extra)``."""
    with np.load(path, allow_pickle=False) as data:
        arrays = {k: data[k] for k in data.files}
    extra = {k[len("__extra__"):]: v for k, v in arrays.items() if k.startswith("__extra__")}
    return nets_from_arrays(arrays), extra
