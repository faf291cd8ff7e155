"""Generators g: R^d -> R^n, conditional models {(g_i, p_i)}, and synthetic families."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn
from .container import ModelFormatError, read_container, require, write_container
from .gaussian import RngStream, as_generator

MODEL_MAGIC = b"IRGM1"
PRIOR_TOL = 1e-12


class Generator:
    """A stack of affine layers mapping latent vectors to images.

    ``kind`` is ``"linear"`` for a single identity-activation layer (built with
    :meth:`linear`) and ``"layered"`` otherwise.
    """

    def __init__(self, layers: Sequence[nn.Affine], kind: str | None = None):
        layers = tuple(layers)
        nn.check_chain(layers)
        self.layers = layers
        if kind is None:
            kind = "linear" if len(layers) == 1 and layers[0].activation == "identity" else "layered"
        if kind == "linear" and (len(layers) != 1 or layers[0].activation != "identity"):
            raise ValueError("a linear generator is a single identity-activation layer")
        self.kind = kind

    @classmethod
    def linear(cls, A, b=None) -> "Generator":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if b is None:
            b = np.zeros(A.shape[0])
        return cls([nn.Affine(A, b, "identity")], kind="linear")

    @property
    def latent_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def _check_latent(self, z):
        z = np.asarray(z, dtype=float)
        if z.ndim not in (1, 2) or z.shape[-1] != self.latent_dim:
            raise ValueError(f"latent vector has shape {z.shape}, generator expects last dim {self.latent_dim}")
        return z

    def forward(self, z) -> np.ndarray:
        z = self._check_latent(z)
        out = nn.forward(self.layers, np.atleast_2d(z))
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("generator produced non-finite output")
        return out[0] if z.ndim == 1 else out

    def vjp(self, z, u) -> np.ndarray:
        """J(z)^T u for the Jacobian J of :meth:`forward` at ``z`` (batched over rows)."""
        z = self._check_latent(z)
        u = np.asarray(u, dtype=float)
        if u.shape[-1] != self.out_dim or u.ndim != z.ndim or (z.ndim == 2 and u.shape[0] != z.shape[0]):
            raise ValueError(f"cotangent shape {u.shape} does not match output dim {self.out_dim}")
        _, cache = nn.forward_cached(self.layers, np.atleast_2d(z))
        for i, (_, pre, post) in enumerate(cache):
            if not (np.all(np.isfinite(pre)) and np.all(np.isfinite(post))):
                raise FloatingPointError(f"non-finite intermediate value at layer {i}")
        g = nn.backward(self.layers, cache, np.atleast_2d(u))
        return g[0] if z.ndim == 1 else g

    def forward_vjp(self, z, cotangent_fn):
        """Forward pass, then pull back ``cotangent_fn(x)`` without recomputing."""
        z2 = np.atleast_2d(self._check_latent(z))
        x, cache = nn.forward_cached(self.layers, z2)
        u = cotangent_fn(x)
        return x, nn.backward(self.layers, cache, u)

    def jacobian(self, z) -> np.ndarray:
        eye = np.eye(self.out_dim)
        z = self._check_latent(z)
        return np.stack([self.vjp(z, e) for e in eye])

    def same_as(self, other: "Generator") -> bool:
        return (
            self.kind == other.kind
            and len(self.layers) == len(other.layers)
            and all(a.same_as(b) for a, b in zip(self.layers, other.layers))
        )

    def __repr__(self):
        sizes = [self.latent_dim] + [l.out_dim for l in self.layers]
        return f"Generator(kind={self.kind!r}, sizes={sizes})"


def forward(g: Generator, z) -> np.ndarray:
    return g.forward(z)


def vjp_latent(g: Generator, z, u) -> np.ndarray:
    return g.vjp(z, u)


@dataclass(frozen=True, eq=False)
class ConditionalModel:
    """Mixture ``sum_i p_i * (g_i)_* N(0, I_d)``; class ``i`` is generated by ``generators[i]``."""

    generators: tuple[Generator, ...]
    priors: np.ndarray

    def __post_init__(self):
        gens = tuple(self.generators)
        if not gens:
            raise ValueError("a conditional model needs at least one class")
        priors = np.array(self.priors, dtype=float).reshape(-1)
        if priors.shape[0] != len(gens):
            raise ValueError(f"{priors.shape[0]} priors given for {len(gens)} generators")
        validate_priors(priors)
        d, n = gens[0].latent_dim, gens[0].out_dim
        for i, g in enumerate(gens):
            if g.latent_dim != d or g.out_dim != n:
                raise ValueError(f"generator {i} has dims ({g.latent_dim}, {g.out_dim}), expected ({d}, {n})")
        priors.setflags(write=False)
        object.__setattr__(self, "generators", gens)
        object.__setattr__(self, "priors", priors)

    @classmethod
    def single(cls, g: Generator) -> "ConditionalModel":
        return cls((g,), np.ones(1))

    @property
    def num_classes(self) -> int:
        return len(self.generators)

    @property
    def latent_dim(self) -> int:
        return self.generators[0].latent_dim

    @property
    def out_dim(self) -> int:
        return self.generators[0].out_dim

    def same_as(self, other: "ConditionalModel") -> bool:
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.priors, other.priors)
            and all(a.same_as(b) for a, b in zip(self.generators, other.generators))
        )


def validate_priors(priors) -> None:
    priors = np.asarray(priors, dtype=float)
    if np.any(~np.isfinite(priors)) or np.any(priors < 0):
        raise ValueError("priors must be finite and non-negative")
    if abs(priors.sum() - 1.0) > PRIOR_TOL:
        raise ValueError(f"priors do not sum to 1 (sum = {priors.sum()!r})")


@dataclass(frozen=True)
class LabeledSample:
    x: np.ndarray
    label: int
    z: np.ndarray


@dataclass(frozen=True)
class Dataset:
    """A batch of labelled samples; row ``k`` satisfies ``x[k] = g_{labels[k]}(z[k])``."""

    x: np.ndarray
    labels: np.ndarray
    z: np.ndarray

    def __len__(self):
        return self.labels.shape[0]

    def sample(self, k: int) -> LabeledSample:
        return LabeledSample(self.x[k], int(self.labels[k]), self.z[k])


def sample_conditional(m: ConditionalModel, rng) -> LabeledSample:
    gen = as_generator(rng)
    label = int(gen.choice(m.num_classes, p=m.priors))
    z = gen.standard_normal(m.latent_dim)
    return LabeledSample(m.generators[label].forward(z), label, z)


def sample_dataset(m: ConditionalModel, n: int, rng) -> Dataset:
    """Draw ``n`` labelled samples: labels first, then all latents, then per-class images."""
    gen = as_generator(rng)
    labels = gen.choice(m.num_classes, size=int(n), p=m.priors)
    z = gen.standard_normal((int(n), m.latent_dim))
    x = np.empty((int(n), m.out_dim))
    for i, g in enumerate(m.generators):
        rows = labels == i
        if rows.any():
            x[rows] = g.forward(z[rows])
    return Dataset(x, labels, z)


# ---------------------------------------------------------------------------
# synthetic families

def _shifted_identity(c: float = 1.0, d: int = 2) -> ConditionalModel:
    eye = np.eye(d)
    shift = np.zeros(d)
    shift[0] = c
    return ConditionalModel(
        (Generator.linear(eye, -shift), Generator.linear(eye, shift)), np.array([0.5, 0.5])
    )


def _scaled_identity(c: float = 2.0, d: int = 2, K: int = 1) -> ConditionalModel:
    gens = tuple(Generator.linear(c * np.eye(d)) for _ in range(K))
    return ConditionalModel(gens, np.full(K, 1.0 / K))


def _linear_random(d: int = 2, n: int = 3, K: int = 2, seed: int = 0, scale: float = 1.0) -> ConditionalModel:
    gen = RngStream(seed, stream=0x11).generator()
    gens = []
    for _ in range(K):
        A = gen.standard_normal((n, d)) * scale
        b = gen.standard_normal(n)
        gens.append(Generator.linear(A, b))
    return ConditionalModel(tuple(gens), np.full(K, 1.0 / K))


def _mlp_random(sizes=(2, 16, 8), activation: str = "tanh", K: int = 2, seed: int = 0,
                scale: float = 1.0) -> ConditionalModel:
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < 2:
        raise ValueError("mlp-random needs at least input and output sizes")
    gen = RngStream(seed, stream=0x12).generator()
    gens = tuple(Generator(nn.random_stack(sizes, activation, gen, scale=scale)) for _ in range(K))
    return ConditionalModel(gens, np.full(K, 1.0 / K))


SYNTHETIC_FAMILIES = {
    "shifted-identity": _shifted_identity,
    "scaled-identity": _scaled_identity,
    "linear-random": _linear_random,
    "mlp-random": _mlp_random,
}


def make_synthetic(family: str, **params) -> ConditionalModel:
    """Build one of the desk-scale model families; deterministic in ``seed``.

    >>> make_synthetic("scaled-identity", c=2.0, d=3).generators[0].forward([1.0, 0.0, -1.0])
    array([ 2.,  0., -2.])
    """
    try:
        factory = SYNTHETIC_FAMILIES[family]
    except KeyError:
        raise ValueError(f"unknown synthetic family {family!r}; choose from {sorted(SYNTHETIC_FAMILIES)}") from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise ValueError(f"invalid parameters for {family}: {exc}") from None


_SPEC_RE = re.compile(r"^\s*([a-z][a-z-]*)\s*(?:\((.*)\))?\s*$")


def _parse_value(text: str):
    text = text.strip()
    if ":" in text:
        return tuple(_parse_value(t) for t in text.split(":"))
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def parse_model_spec(spec: str) -> tuple[str, dict]:
    """Parse ``"mlp-random(sizes=2:16:8, activation=tanh, seed=3)"``.

    Tuple-valued parameters use ``:`` as separator so the spec stays a single
    comma-separated argument list.
    """
    m = _SPEC_RE.match(spec)
    if not m:
        raise ValueError(f"cannot parse model spec {spec!r}")
    family, args = m.group(1), m.group(2)
    params = {}
    if args and args.strip():
        for item in args.split(","):
            if "=" not in item:
                raise ValueError(f"model spec argument {item.strip()!r} is not key=value")
            key, value = item.split("=", 1)
            params[key.strip()] = _parse_value(value)
    return family, params


def model_from_spec(spec: str) -> ConditionalModel:
    family, params = parse_model_spec(spec)
    return make_synthetic(family, **params)


# ---------------------------------------------------------------------------
# serialization

def _layers_schema(layers):
    return [{"in": l.in_dim, "out": l.out_dim, "activation": l.activation} for l in layers]


def layers_to_arrays(layers) -> list[np.ndarray]:
    out = []
    for l in layers:
        out.extend([l.weight, l.bias])
    return out


def layers_from_schema(schema, arrays, cursor: int, where: str):
    if not isinstance(schema, list) or not schema:
        raise ModelFormatError(where, "layer schema must be a non-empty list")
    layers = []
    for j, entry in enumerate(schema):
        field = f"{where}[{j}]"
        if not isinstance(entry, dict):
            raise ModelFormatError(field, "layer entry must be an object")
        fin, fout = require(entry, "in", int), require(entry, "out", int)
        act = require(entry, "activation", str)
        if cursor + 2 > len(arrays):
            raise ModelFormatError("arrays", f"too few arrays for {field}")
        w, b = arrays[cursor], arrays[cursor + 1]
        if w.shape != (fout, fin) or b.shape != (fout,):
            raise ModelFormatError(field, f"array shapes {w.shape}/{b.shape} disagree with declared ({fout}, {fin})")
        try:
            layers.append(nn.Affine(w, b, act))
        except ValueError as exc:
            raise ModelFormatError(field, str(exc)) from None
        cursor += 2
    try:
        nn.check_chain(layers)
    except ValueError as exc:
        raise ModelFormatError(where, str(exc)) from None
    return layers, cursor


def save_model(m: ConditionalModel, path) -> None:
    header = {
        "type": "conditional-model",
        "latent_dim": m.latent_dim,
        "out_dim": m.out_dim,
        "num_classes": m.num_classes,
        "priors": [float(p) for p in m.priors],
        "classes": [{"kind": g.kind, "layers": _layers_schema(g.layers)} for g in m.generators],
    }
    arrays = []
    for g in m.generators:
        arrays.extend(layers_to_arrays(g.layers))
    write_container(path, MODEL_MAGIC, header, arrays)


def load_model(path) -> ConditionalModel:
    header, arrays = read_container(path, MODEL_MAGIC)
    d = require(header, "latent_dim", int)
    n = require(header, "out_dim", int)
    K = require(header, "num_classes", int)
    priors = require(header, "priors", list)
    classes = require(header, "classes", list)
    if len(priors) != K:
        raise ModelFormatError("priors", f"{len(priors)} priors for {K} classes")
    if len(classes) != K:
        raise ModelFormatError("classes", f"{len(classes)} class entries for {K} classes")
    try:
        validate_priors(np.array(priors, dtype=float))
    except (ValueError, TypeError) as exc:
        raise ModelFormatError("priors", str(exc)) from None
    gens = []
    cursor = 0
    for i, entry in enumerate(classes):
        if not isinstance(entry, dict):
            raise ModelFormatError(f"classes[{i}]", "class entry must be an object")
        kind = require(entry, "kind", str)
        layers, cursor = layers_from_schema(require(entry, "layers", list), arrays, cursor, f"classes[{i}].layers")
        try:
            g = Generator(layers, kind=kind)
        except ValueError as exc:
            raise ModelFormatError(f"classes[{i}].kind", str(exc)) from None
        if g.latent_dim != d or g.out_dim != n:
            raise ModelFormatError(f"classes[{i}]", "dimensions disagree with header")
        gens.append(g)
    if cursor != len(arrays):
        raise ModelFormatError("arrays", "unused arrays in weight blob")
    return ConditionalModel(tuple(gens), np.array(priors, dtype=float))


def load_model_or_spec(text: str) -> ConditionalModel:
    """A path to an IRGM1 file, or a synthetic family spec."""
    from pathlib import Path

    p = Path(text)
    if p.suffix and p.exists():
        return load_model(p)
    return model_from_spec(text)
