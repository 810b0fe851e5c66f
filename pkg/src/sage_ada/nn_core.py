"""Small dense networks with hand-written reverse-mode gradients.

Everything runs in float64. A :class:`DenseNet` caches the activations of its
last forward pass; :meth:`DenseNet.backward` consumes that cache and
accumulates parameter gradients into a :class:`GradientTape`.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractViolation, NumericError

ACTIVATIONS = ("relu", "tanh", "sigmoid", "softmax", "identity")


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _softmax(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _activate(a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "tanh":
        return np.tanh(a)
    if kind == "sigmoid":
        return _sigmoid(a)
    if kind == "softmax":
        return _softmax(a)
    return a


def _activation_backward(pre: np.ndarray, out: np.ndarray, up: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return up * (pre > 0)
    if kind == "tanh":
        return up * (1.0 - out * out)
    if kind == "sigmoid":
        return up * out * (1.0 - out)
    if kind == "softmax":
        # Jacobian-vector product of softmax, row-wise.
        return out * (up - np.sum(up * out, axis=-1, keepdims=True))
    return up


@dataclass
class Layer:
    weight: np.ndarray  # (fan_in, fan_out), applied as x @ weight
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ContractViolation(
                f"layer shapes disagree: weight {self.weight.shape}, bias {self.bias.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {self.activation!r}")

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]


class GradientTape:
    """Gradient accumulators mirroring the parameters of one network."""

    def __init__(self, net: "DenseNet"):
        self.grads = [[np.zeros_like(l.weight), np.zeros_like(l.bias)] for l in net.layers]
        self.input_grad = np.zeros(net.input_dim)

    def zero(self) -> None:
        for gw, gb in self.grads:
            gw.fill(0.0)
            gb.fill(0.0)
        self.input_grad = np.zeros_like(self.input_grad)

    def scale(self, factor: float) -> None:
        for gw, gb in self.grads:
            gw *= factor
            gb *= factor

    def is_finite(self) -> bool:
        return all(np.isfinite(gw).all() and np.isfinite(gb).all() for gw, gb in self.grads)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in self.grads])

    def matches(self, net: "DenseNet") -> bool:
        return len(self.grads) == len(net.layers) and all(
            gw.shape == l.weight.shape and gb.shape == l.bias.shape
            for (gw, gb), l in zip(self.grads, net.layers)
        )


class DenseNet:
    """A chain of affine layers, each followed by an activation."""

    def __init__(self, layers: Sequence[Layer]):
        if not layers:
            raise ContractViolation("a network needs at least one layer")
        for k in range(len(layers) - 1):
            if layers[k].fan_out != layers[k + 1].fan_in:
                raise ContractViolation(
                    f"layer {k} outputs {layers[k].fan_out} but layer {k + 1} expects {layers[k + 1].fan_in}"
                )
        self.layers = list(layers)
        self._cache: list[tuple[np.ndarray, np.ndarray, np.ndarray]] | None = None
        self._squeeze = False

    @classmethod
    def build(
        cls, dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator
    ) -> "DenseNet":
        """Glorot-uniform weights, zero biases. ``dims`` has one more entry than ``activations``."""
        if len(dims) != len(activations) + 1:
            raise ContractViolation("need len(dims) == len(activations) + 1")
        layers = []
        for fan_in, fan_out, act in zip(dims[:-1], dims[1:], activations):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            layers.append(Layer(w, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].fan_out

    @property
    def n_params(self) -> int:
        return sum(l.weight.size + l.bias.size for l in self.layers)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out.extend([l.weight, l.bias])
        return out

    def copy(self) -> "DenseNet":
        return DenseNet([copy.deepcopy(l) for l in self.layers])

    def load_state(self, other: "DenseNet") -> None:
        for mine, theirs in zip(self.layers, other.layers):
            mine.weight[...] = theirs.weight
            mine.bias[...] = theirs.bias

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Evaluate the network on one sample (1-D) or a batch (rows), caching activations."""
        x = np.asarray(x, dtype=np.float64)
        self._squeeze = x.ndim == 1
        h = x[None, :] if self._squeeze else x
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise ContractViolation(f"expected input dim {self.input_dim}, got shape {x.shape}")
        cache = []
        for k, layer in enumerate(self.layers):
            with np.errstate(over="ignore", invalid="ignore"):
                pre = h @ layer.weight + layer.bias
                out = _activate(pre, layer.activation)
            if not np.isfinite(out).all():
                self._cache = None
                raise NumericError(f"non-finite activation at layer {k}")
            cache.append((h, pre, out))
            h = out
        self._cache = cache
        return h[0] if self._squeeze else h

    def backward(self, upstream: np.ndarray, tape: GradientTape | None = None) -> np.ndarray:
        """Propagate ``upstream`` (dL/d output) back through the cached forward pass.

        Parameter gradients are *added* into ``tape`` when one is given; the
        gradient with respect to the input is returned either way.
        """
        if self._cache is None:
            raise ContractViolation("backward called without a cached forward pass")
        g = np.asarray(upstream, dtype=np.float64)
        g = g[None, :] if self._squeeze else g
        if g.shape != self._cache[-1][2].shape:
            raise ContractViolation(
                f"upstream shape {g.shape} does not match output {self._cache[-1][2].shape}"
            )
        if tape is not None and not tape.matches(self):
            raise ContractViolation("tape shapes do not mirror the network")
        for k in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[k]
            h_in, pre, out = self._cache[k]
            g = _activation_backward(pre, out, g, layer.activation)
            if tape is not None:
                tape.grads[k][0] += h_in.T @ g
                tape.grads[k][1] += g.sum(axis=0)
            g = g @ layer.weight.T
        dx = g[0] if self._squeeze else g
        if tape is not None:
            tape.input_grad = dx
        return dx


def grl_lambda(p: float, steepness: float = 10.0) -> float:
    """Adversarial weight ramp ``2 / (1 + exp(-steepness * p)) - 1`` for progress ``p`` in [0, 1]."""
    if not 0.0 <= p <= 1.0:
        raise ContractViolation(f"progress must lie in [0, 1], got {p}")
    return 2.0 / (1.0 + math.exp(-steepness * p)) - 1.0


def sgd_step(net: DenseNet, tape: GradientTape, lr: float) -> DenseNet:
    """In-place ``theta -= lr * grad``; clears the tape. Refuses non-finite gradients."""
    if lr < 0:
        raise ContractViolation("learning rate must be non-negative")
    if not tape.matches(net):
        raise ContractViolation("tape shapes do not mirror the network")
    if not tape.is_finite():
        raise NumericError("non-finite gradient; step refused")
    for layer, (gw, gb) in zip(net.layers, tape.grads):
        layer.weight -= lr * gw
        layer.bias -= lr * gb
    tape.zero()
    return net


@dataclass
class ModelBundle:
    """Feature extractor, classifier head, class-level and binary discriminators."""

    phi: DenseNet
    f: DenseNet
    disc: DenseNet
    d_bin: DenseNet
    meta: dict = field(default_factory=dict)

    @classmethod
    def build(
        cls,
        input_dim: int,
        n_classes: int,
        rng: np.random.Generator,
        hidden: int = 64,
        rep_dim: int = 16,
    ) -> "ModelBundle":
        phi = DenseNet.build([input_dim, hidden, hidden, rep_dim], ["relu", "relu", "relu"], rng)
        f = DenseNet.build([rep_dim, n_classes], ["softmax"], rng)
        disc = DenseNet.build([rep_dim, hidden, n_classes], ["relu", "sigmoid"], rng)
        d_bin = DenseNet.build([rep_dim, hidden, 1], ["relu", "sigmoid"], rng)
        return cls(phi, f, disc, d_bin)

    def nets(self) -> dict[str, DenseNet]:
        return {"phi": self.phi, "f": self.f, "disc": self.disc, "d_bin": self.d_bin}

    def copy(self) -> "ModelBundle":
        return ModelBundle(self.phi.copy(), self.f.copy(), self.disc.copy(), self.d_bin.copy(), dict(self.meta))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.f.forward(self.phi.forward(x))


# Checkpoint format (text, one token stream per line):
#   sage-ada-checkpoint 1
#   net <name> <n_layers>
#   layer <fan_in> <fan_out> <activation>
#   <fan_in * fan_out weights, row-major, repr floats>
#   <fan_out biases>


def save_checkpoint(nets: dict[str, DenseNet], path: str | Path) -> None:
    lines = ["sage-ada-checkpoint 1"]
    for name, net in nets.items():
        lines.append(f"net {name} {len(net.layers)}")
        for l in net.layers:
            lines.append(f"layer {l.fan_in} {l.fan_out} {l.activation}")
            lines.append(" ".join(repr(float(v)) for v in l.weight.ravel()))
            lines.append(" ".join(repr(float(v)) for v in l.bias))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> dict[str, DenseNet]:
    it: Iterable[str] = iter(Path(path).read_text().splitlines())
    header = next(it)
    if header.strip() != "sage-ada-checkpoint 1":
        raise ContractViolation(f"not a checkpoint: {header!r}")
    nets = {}
    for line in it:
        if not line.strip():
            continue
        tag, name, n_layers = line.split()
        if tag != "net":
            raise ContractViolation(f"malformed checkpoint line {line!r}")
        layers = []
        for _ in range(int(n_layers)):
            _, fi, fo, act = next(it).split()
            w = np.array([float(v) for v in next(it).split()]).reshape(int(fi), int(fo))
            b = np.array([float(v) for v in next(it).split()])
            layers.append(Layer(w, b, act))
        nets[name] = DenseNet(layers)
    return nets
