"""Classifiers with input gradients, and toy-scale ERM / PGD adversarial training.

Conventions:

* ``predict`` is the argmax of ``logits``; ties resolve to the lowest index.
* A half-space classifier has logits ``(w.x + b, 0)``, so class 0 is the
  side where ``w.x + b > 0`` (and the boundary itself).
* Losses: ``"cross-entropy"`` and ``"cw-margin"`` (``logit_y - max_{j != y} logit_j``,
  positive while ``x`` is classified as ``y``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .container import ModelFormatError, read_container, require, write_container
from .gaussian import RngStream
from .genmodel import ConditionalModel, layers_from_schema, layers_to_arrays, sample_dataset

log = logging.getLogger(__name__)

CLASSIFIER_MAGIC = b"IRCF1"
LOSS_KINDS = ("cross-entropy", "cw-margin")


class Classifier:
    num_classes: int
    input_dim: int

    def logits(self, x) -> np.ndarray:
        raise NotImplementedError

    def logits_backward(self, x, grad_logits) -> np.ndarray:
        """Pull a (B, K) logit cotangent back to a (B, n) input gradient."""
        raise NotImplementedError

    def _as_batch(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.input_dim or x.ndim not in (1, 2):
            raise ValueError(f"input has shape {x.shape}, classifier expects last dim {self.input_dim}")
        return x

    def predict(self, x):
        x = self._as_batch(x)
        out = np.argmax(self.logits(x), axis=-1)
        return int(out) if x.ndim == 1 else out


class HalfspaceClassifier(Classifier):
    def __init__(self, w, b: float = 0.0):
        w = np.array(w, dtype=float).reshape(-1)
        if not np.linalg.norm(w) > 0:
            raise ValueError("half-space normal must be non-zero")
        w.setflags(write=False)
        self.w, self.b = w, float(b)
        self.num_classes, self.input_dim = 2, w.shape[0]

    def logits(self, x):
        x = self._as_batch(x)
        s = x @ self.w + self.b
        return np.stack([s, np.zeros_like(s)], axis=-1)

    def logits_backward(self, x, grad_logits):
        return np.asarray(grad_logits)[..., :1] * self.w

    def margin(self, x):
        """Signed l2 distance to the boundary, positive on the class-0 side."""
        return (self._as_batch(x) @ self.w + self.b) / np.linalg.norm(self.w)


class ConstantClassifier(Classifier):
    def __init__(self, label: int, num_classes: int, input_dim: int):
        if not 0 <= label < num_classes:
            raise ValueError("constant label out of range")
        self.label, self.num_classes, self.input_dim = int(label), int(num_classes), int(input_dim)

    def logits(self, x):
        x = self._as_batch(x)
        out = np.zeros(x.shape[:-1] + (self.num_classes,))
        out[..., self.label] = 1.0
        return out

    def logits_backward(self, x, grad_logits):
        return np.zeros(np.shape(grad_logits)[:-1] + (self.input_dim,))


class NetworkClassifier(Classifier):
    """Affine + activation stack ending in ``K`` logits."""

    def __init__(self, layers: Sequence[nn.Affine]):
        layers = tuple(layers)
        nn.check_chain(layers)
        self.layers = layers
        self.num_classes, self.input_dim = layers[-1].out_dim, layers[0].in_dim

    def logits(self, x):
        x = self._as_batch(x)
        out = nn.forward(self.layers, np.atleast_2d(x))
        return out[0] if x.ndim == 1 else out

    def logits_backward(self, x, grad_logits):
        x = self._as_batch(x)
        _, cache = nn.forward_cached(self.layers, np.atleast_2d(x))
        g = nn.backward(self.layers, cache, np.atleast_2d(grad_logits))
        return g[0] if x.ndim == 1 else g

    def same_as(self, other) -> bool:
        return isinstance(other, NetworkClassifier) and len(self.layers) == len(other.layers) and all(
            a.same_as(b) for a, b in zip(self.layers, other.layers)
        )


# ---------------------------------------------------------------------------
# losses

def loss_and_logit_grad(logits, y, kind: str):
    """Per-row loss and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(logits)
    y = np.atleast_1d(np.asarray(y, dtype=int))
    rows = np.arange(logits.shape[0])
    if kind == "cross-entropy":
        shifted = logits - logits.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        z = expd.sum(axis=1)
        loss = np.log(z) - shifted[rows, y]
        grad = expd / z[:, None]
        grad[rows, y] -= 1.0
        return loss, grad
    if kind == "cw-margin":
        other = logits.copy()
        other[rows, y] = -np.inf
        j = np.argmax(other, axis=1)
        loss = logits[rows, y] - logits[rows, j]
        grad = np.zeros_like(logits)
        grad[rows, y] = 1.0
        grad[rows, j] -= 1.0
        return loss, grad
    raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {kind!r}")


def loss_value(f: Classifier, x, target, loss_kind: str = "cross-entropy"):
    x = f._as_batch(x)
    loss, _ = loss_and_logit_grad(f.logits(np.atleast_2d(x)), target, loss_kind)
    return float(loss[0]) if x.ndim == 1 else loss


def grad_input(f: Classifier, x, target, loss_kind: str = "cross-entropy") -> np.ndarray:
    """Gradient of the chosen loss w.r.t. the input; batched over rows of ``x``."""
    x = f._as_batch(x)
    x2 = np.atleast_2d(x)
    _, gl = loss_and_logit_grad(f.logits(x2), np.broadcast_to(target, x2.shape[:1]), loss_kind)
    g = f.logits_backward(x2, gl)
    return g[0] if x.ndim == 1 else g


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    epochs: int = 20
    batch_size: int = 64       # 0 means full batch
    train_size: int = 2000
    method: str = "erm"        # "erm" or "adv-train"
    eps_train: float = 0.5
    pgd_step: float = 0.1
    pgd_steps: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("erm", "adv-train"):
            raise ValueError("method must be 'erm' or 'adv-train'")
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 0 or self.train_size < 1:
            raise ValueError("training sizes and step must be positive")
        if self.method == "adv-train" and (self.eps_train <= 0 or self.pgd_step <= 0 or self.pgd_steps < 1):
            raise ValueError("adversarial training needs positive eps, PGD step and step count")


@dataclass(frozen=True)
class Architecture:
    """``hidden=()`` gives a single affine map to the logits."""

    hidden: tuple[int, ...] = ()
    activation: str = "relu"

    @classmethod
    def parse(cls, text: str) -> "Architecture":
        """``"linear"`` or ``"mlp:16,16:tanh"``."""
        if text in ("", "linear"):
            return cls()
        parts = text.split(":")
        if parts[0] != "mlp" or len(parts) not in (2, 3):
            raise ValueError(f"cannot parse architecture {text!r}")
        hidden = tuple(int(h) for h in parts[1].split(",") if h)
        return cls(hidden, parts[2] if len(parts) == 3 else "relu")


def init_network(arch: Architecture, input_dim: int, num_classes: int, seed: int) -> NetworkClassifier:
    gen = RngStream(seed, stream=0x21).generator()
    sizes = (input_dim, *arch.hidden, num_classes)
    layers = nn.random_stack(sizes, arch.activation, gen)
    # start the output layer small so early training is near-linear
    last = layers[-1]
    layers[-1] = nn.Affine(last.weight * 0.1, np.zeros(last.out_dim), last.activation)
    return NetworkClassifier(layers)


class TrainingDiverged(FloatingPointError):
    pass


def train(arch: Architecture, model: ConditionalModel, cfg: TrainConfig, history: list | None = None) -> NetworkClassifier:
    """Minibatch SGD on cross-entropy over samples drawn from ``model``.

    With ``method="adv-train"`` each minibatch is replaced by its PGD
    adversarial counterpart (cross-entropy, no early exit) before the update.
    Per-epoch mean training losses are appended to ``history`` when given.
    """
    net = init_network(arch, model.out_dim, model.num_classes, cfg.seed)
    if cfg.epochs == 0:
        return net
    data = sample_dataset(model, cfg.train_size, RngStream(cfg.seed, stream=0x22))
    weights = [np.array(l.weight) for l in net.layers]
    biases = [np.array(l.bias) for l in net.layers]
    acts = [l.activation for l in net.layers]
    n = len(data)
    bs = n if cfg.batch_size == 0 else min(cfg.batch_size, n)

    pgd_cfg = None
    if cfg.method == "adv-train":
        from .attacks import PgdConfig, pgd_l2_batch

        pgd_cfg = PgdConfig(cfg.eps_train, cfg.pgd_step, cfg.pgd_steps, "cross-entropy")

    for epoch in range(cfg.epochs):
        order = RngStream(cfg.seed, 0x23, (epoch,)).generator().permutation(n) if bs < n else np.arange(n)
        total = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            xb, yb = data.x[idx], data.labels[idx]
            layers = [nn.Affine(w, b, a) for w, b, a in zip(weights, biases, acts)]
            if pgd_cfg is not None:
                xb = pgd_l2_batch(NetworkClassifier(layers), xb, yb, pgd_cfg, early_stop=False).x_adv
            out, cache = nn.forward_cached(layers, xb)
            loss, gl = loss_and_logit_grad(out, yb, "cross-entropy")
            if not np.all(np.isfinite(loss)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
            _, grads = nn.backward(layers, cache, gl / len(idx), param_grads=True)
            for k, (gw, gb) in enumerate(grads):
                weights[k] -= cfg.lr * gw
                biases[k] -= cfg.lr * gb
            total += float(loss.sum())
        if history is not None:
            history.append(total / n)
        log.debug("epoch %d loss %.6f", epoch, total / n)
    return NetworkClassifier([nn.Affine(w, b, a) for w, b, a in zip(weights, biases, acts)])


def training_loss(f: Classifier, model: ConditionalModel, cfg: TrainConfig) -> float:
    """Mean cross-entropy of ``f`` on the exact training sample ``train`` would draw."""
    data = sample_dataset(model, cfg.train_size, RngStream(cfg.seed, stream=0x22))
    loss, _ = loss_and_logit_grad(f.logits(data.x), data.labels, "cross-entropy")
    return float(loss.mean())


# ---------------------------------------------------------------------------
# serialization (shares the weight container with generators)

def save_classifier(f: Classifier, path) -> None:
    if isinstance(f, HalfspaceClassifier):
        header = {"type": "halfspace", "input_dim": f.input_dim, "num_classes": 2, "b": f.b}
        arrays = [f.w]
    elif isinstance(f, ConstantClassifier):
        header = {"type": "constant", "input_dim": f.input_dim, "num_classes": f.num_classes, "label": f.label}
        arrays = []
    elif isinstance(f, NetworkClassifier):
        header = {
            "type": "network", "input_dim": f.input_dim, "num_classes": f.num_classes,
            "layers": [{"in": l.in_dim, "out": l.out_dim, "activation": l.activation} for l in f.layers],
        }
        arrays = layers_to_arrays(f.layers)
    else:
        raise TypeError(f"cannot serialize {type(f).__name__}")
    write_container(path, CLASSIFIER_MAGIC, header, arrays)


def load_classifier(path) -> Classifier:
    header, arrays = read_container(path, CLASSIFIER_MAGIC)
    kind = require(header, "type", str)
    n = require(header, "input_dim", int)
    K = require(header, "num_classes", int)
    if kind == "halfspace":
        if len(arrays) != 1 or arrays[0].shape != (n,):
            raise ModelFormatError("arrays", "half-space needs one normal vector of length input_dim")
        return HalfspaceClassifier(arrays[0], require(header, "b", (int, float)))
    if kind == "constant":
        return ConstantClassifier(require(header, "label", int), K, n)
    if kind == "network":
        layers, cursor = layers_from_schema(require(header, "layers", list), arrays, 0, "layers")
        if cursor != len(arrays):
            raise ModelFormatError("arrays", "unused arrays in weight blob")
        f = NetworkClassifier(layers)
        if f.input_dim != n or f.num_classes != K:
            raise ModelFormatError("layers", "dimensions disagree with header")
        return f
    raise ModelFormatError("type", f"unknown classifier type {kind!r}")
