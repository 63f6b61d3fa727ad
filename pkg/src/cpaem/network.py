"""Continuous piecewise-affine generator networks.

A network is a stack of dense layers ``h = W u + v`` followed by a pointwise
activation from {relu, leaky_relu, abs, identity}; the last layer is always
identity.  On every cell of its latent partition the network is a single affine
map ``z -> A z + b`` and the cell is identified by the sign pattern of the
hidden pre-activations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import total_ordering
from typing import Sequence

import numpy as np

from .errors import DegenerateNetworkError, InputError

ACTIVATIONS = ("relu", "leaky_relu", "abs", "identity")


def _frozen(a, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=float, copy=True)
    if arr.ndim != ndim:
        raise InputError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"
    eta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "weight", _frozen(self.weight, 2))
        object.__setattr__(self, "bias", _frozen(self.bias, 1))
        if self.activation not in ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")
        if self.activation == "leaky_relu":
            if not 0.0 < self.eta < 1.0:
                raise InputError(f"leaky_relu slope must lie in (0, 1), got {self.eta}")
        else:
            object.__setattr__(self, "eta", 0.0)
        if self.weight.shape[0] != self.bias.shape[0]:
            raise InputError("weight rows and bias length differ")
        if not (np.all(np.isfinite(self.weight)) and np.all(np.isfinite(self.bias))):
            raise InputError("layer parameters must be finite")

    @property
    def width(self) -> int:
        return self.weight.shape[0]

    @property
    def piecewise(self) -> bool:
        return self.activation != "identity"

    def negative_slope(self) -> float:
        """Derivative of the activation for a negative pre-activation."""
        return {"relu": 0.0, "leaky_relu": self.eta, "abs": -1.0, "identity": 1.0}[self.activation]

    def activate(self, h: np.ndarray) -> np.ndarray:
        if self.activation == "relu":
            return np.where(h >= 0, h, 0.0)
        if self.activation == "leaky_relu":
            return np.where(h >= 0, h, self.eta * h)
        if self.activation == "abs":
            return np.abs(h)
        return h


@total_ordering
@dataclass(frozen=True)
class ActivationCode:
    """Per-hidden-layer sign vectors; identity hidden layers carry an empty vector."""

    signs: tuple

    def __post_init__(self):
        object.__setattr__(self, "signs", tuple(tuple(int(s) for s in q) for q in self.signs))

    def __lt__(self, other: "ActivationCode") -> bool:
        return self.flat < other.flat

    @property
    def flat(self) -> tuple:
        return tuple(s for q in self.signs for s in q)

    def key(self) -> bytes:
        return np.asarray(self.flat, dtype=np.int8).tobytes()

    def flip(self, layer: int, unit: int) -> "ActivationCode":
        """Return the code with unit ``unit`` of hidden layer ``layer`` (1-based) negated."""
        signs = [list(q) for q in self.signs]
        signs[layer - 1][unit] = -signs[layer - 1][unit]
        return ActivationCode(tuple(tuple(q) for q in signs))

    def to_list(self) -> list:
        return [list(q) for q in self.signs]

    def __repr__(self) -> str:
        body = "|".join("".join("+" if s > 0 else "-" for s in q) for q in self.signs)
        return f"ActivationCode({body})"


@dataclass(frozen=True)
class AffineMap:
    slope: np.ndarray
    offset: np.ndarray

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return self.slope @ z + self.offset


@dataclass(frozen=True)
class GenerativeNetwork:
    layers: tuple
    allow_degenerate: bool = field(default=False, compare=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise InputError("a network needs at least one layer")
        object.__setattr__(self, "layers", layers)
        for i in range(1, len(layers)):
            if layers[i].weight.shape[1] != layers[i - 1].width:
                raise InputError(
                    f"layer {i + 1} expects input width {layers[i].weight.shape[1]}, "
                    f"layer {i} has width {layers[i - 1].width}"
                )
        if layers[-1].activation != "identity":
            raise InputError("the output layer must use the identity activation")
        if not self.allow_degenerate:
            for ell, layer in enumerate(layers[:-1], start=1):
                if not layer.piecewise:
                    continue
                dead = np.flatnonzero(~np.any(layer.weight != 0, axis=1))
                if dead.size:
                    raise DegenerateNetworkError(
                        f"layer {ell} has identically zero weight rows {dead.tolist()}"
                    )

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def latent_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].width

    @property
    def hidden_widths(self) -> tuple:
        """Code widths per hidden layer (0 for identity hidden layers)."""
        return tuple(l.width if l.piecewise else 0 for l in self.layers[:-1])

    @property
    def n_hidden_units(self) -> int:
        return sum(self.hidden_widths)

    def replace_layer(self, ell: int, weight=None, bias=None) -> "GenerativeNetwork":
        """Copy of the network with layer ``ell`` (1-based) parameters replaced."""
        layers = list(self.layers)
        old = layers[ell - 1]
        layers[ell - 1] = Layer(
            old.weight if weight is None else weight,
            old.bias if bias is None else bias,
            old.activation,
            old.eta,
        )
        return GenerativeNetwork(tuple(layers), allow_degenerate=True)

    def parameters(self) -> np.ndarray:
        return np.concatenate([np.r_[l.weight.ravel(), l.bias] for l in self.layers])

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        out = {"latent_dim": self.latent_dim, "layers": []}
        for layer in self.layers:
            entry = {
                "weight": layer.weight.tolist(),
                "bias": layer.bias.tolist(),
                "activation": layer.activation,
            }
            if layer.activation == "leaky_relu":
                entry["eta"] = layer.eta
            out["layers"].append(entry)
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "GenerativeNetwork":
        try:
            layers = tuple(
                Layer(
                    np.array(entry["weight"], dtype=float).reshape(len(entry["weight"]), -1),
                    entry["bias"],
                    entry.get("activation", "identity"),
                    float(entry.get("eta", 0.0)),
                )
                for entry in doc["layers"]
            )
        except (KeyError, TypeError) as exc:
            raise InputError(f"malformed network document: {exc}") from exc
        net = cls(layers)
        if "latent_dim" in doc and int(doc["latent_dim"]) != net.latent_dim:
            raise InputError("latent_dim does not match the first layer")
        return net


class NoiseModel:
    """Gaussian prior covariance ``sigma_z`` and observation covariance ``sigma_x``."""

    def __init__(self, sigma_x, sigma_z):
        self.sigma_x = _spd(sigma_x, "sigma_x")
        self.sigma_z = _spd(sigma_z, "sigma_z")
        self.chol_x = np.linalg.cholesky(self.sigma_x)
        self.chol_z = np.linalg.cholesky(self.sigma_z)
        self.prec_x = _inv_spd(self.chol_x)
        self.prec_z = _inv_spd(self.chol_z)
        self.logdet_x = 2.0 * float(np.sum(np.log(np.diag(self.chol_x))))
        self.logdet_z = 2.0 * float(np.sum(np.log(np.diag(self.chol_z))))

    @classmethod
    def isotropic(cls, sigma2_x: float, dim_x: int, sigma2_z: float = 1.0, dim_z: int = 1):
        return cls(sigma2_x * np.eye(dim_x), sigma2_z * np.eye(dim_z))

    def replace(self, sigma_x=None, sigma_z=None) -> "NoiseModel":
        return NoiseModel(
            self.sigma_x if sigma_x is None else sigma_x,
            self.sigma_z if sigma_z is None else sigma_z,
        )

    def to_dict(self) -> dict:
        return {"sigma_x": self.sigma_x.tolist(), "sigma_z": self.sigma_z.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "NoiseModel":
        return cls(np.array(doc["sigma_x"], dtype=float), np.array(doc["sigma_z"], dtype=float))

    def fingerprint(self) -> bytes:
        return self.sigma_x.tobytes() + self.sigma_z.tobytes()


def _spd(m, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.array(m, dtype=float))
    if arr.shape[0] != arr.shape[1]:
        raise InputError(f"{name} must be square")
    if not np.allclose(arr, arr.T, rtol=0, atol=1e-12 * max(1.0, np.abs(arr).max())):
        raise InputError(f"{name} must be symmetric")
    arr = 0.5 * (arr + arr.T)
    try:
        np.linalg.cholesky(arr)
    except np.linalg.LinAlgError as exc:
        raise InputError(f"{name} is not positive definite") from exc
    arr.setflags(write=False)
    return arr


def _inv_spd(chol: np.ndarray) -> np.ndarray:
    linv = np.linalg.inv(chol)
    inv = linv.T @ linv
    inv = 0.5 * (inv + inv.T)
    inv.setflags(write=False)
    return inv


# -- evaluation ---------------------------------------------------------------

def _as_latent(net: GenerativeNetwork, z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape[-1:] != (net.latent_dim,) or z.ndim > 2:
        raise InputError(f"latent input must have trailing dimension {net.latent_dim}")
    if not np.all(np.isfinite(z)):
        raise InputError("latent input must be finite")
    return z


def forward(net: GenerativeNetwork, z) -> np.ndarray:
    """Evaluate ``g(z)``; ``z`` may be a single vector or an ``(n, S)`` batch."""
    u = _as_latent(net, z)
    for layer in net.layers:
        u = layer.activate(u @ layer.weight.T + layer.bias)
    return u


def pre_activations(net: GenerativeNetwork, z) -> list:
    """Hidden pre-activations ``h^1..h^{L-1}`` for a vector or batch."""
    u = _as_latent(net, z)
    out = []
    for layer in net.layers[:-1]:
        h = u @ layer.weight.T + layer.bias
        out.append(h)
        u = layer.activate(h)
    return out


def activation_signs(net: GenerativeNetwork, z) -> np.ndarray:
    """Flattened sign pattern as int8, shape ``(n, H)`` for a batch. sign(0) = +1."""
    hs = [
        h for h, layer in zip(pre_activations(net, np.atleast_2d(z)), net.layers) if layer.piecewise
    ]
    if not hs:
        return np.zeros((np.atleast_2d(z).shape[0], 0), dtype=np.int8)
    return np.where(np.concatenate(hs, axis=1) >= 0, 1, -1).astype(np.int8)


def activation_code(net: GenerativeNetwork, z) -> ActivationCode:
    z = _as_latent(net, z)
    if z.ndim != 1:
        raise InputError("activation_code takes a single latent vector")
    hs = pre_activations(net, z)
    return ActivationCode(
        tuple(
            tuple(1 if v >= 0 else -1 for v in h) if layer.piecewise else ()
            for h, layer in zip(hs, net.layers)
        )
    )


def code_from_flat(net: GenerativeNetwork, flat: Sequence[int]) -> ActivationCode:
    signs, pos = [], 0
    for w in net.hidden_widths:
        signs.append(tuple(int(s) for s in flat[pos : pos + w]))
        pos += w
    return ActivationCode(tuple(signs))


def _check_code(net: GenerativeNetwork, code: ActivationCode) -> None:
    widths = tuple(len(q) for q in code.signs)
    if widths != net.hidden_widths:
        raise InputError(f"code widths {widths} do not match network {net.hidden_widths}")


def slope_diagonals(net: GenerativeNetwork, code: ActivationCode) -> list:
    """Activation-derivative diagonals ``D^1..D^{L-1}`` as 1-d arrays."""
    _check_code(net, code)
    diags = []
    for q, layer in zip(code.signs, net.layers[:-1]):
        if not layer.piecewise:
            diags.append(np.ones(layer.width))
        else:
            q = np.asarray(q)
            diags.append(np.where(q > 0, 1.0, layer.negative_slope()))
    return diags


def partial_affine(net: GenerativeNetwork, code: ActivationCode, ell: int):
    """Up-to-layer map ``(A^{1->ell}, b^{1->ell})`` with ``h^ell(z) = A z + b`` on the region."""
    if not 1 <= ell <= net.depth:
        raise InputError(f"layer index {ell} out of range 1..{net.depth}")
    diags = slope_diagonals(net, code)
    a = net.layers[0].weight.copy()
    b = net.layers[0].bias.copy()
    for i in range(1, ell):
        layer = net.layers[i]
        a = layer.weight @ (diags[i - 1][:, None] * a)
        b = layer.weight @ (diags[i - 1] * b) + layer.bias
    return a, b


def all_partial_affine(net: GenerativeNetwork, code: ActivationCode):
    """Lists of ``A^{1->ell}`` and ``b^{1->ell}`` for ell = 1..L."""
    diags = slope_diagonals(net, code)
    a = net.layers[0].weight.copy()
    b = net.layers[0].bias.copy()
    mats, vecs = [a], [b]
    for i in range(1, net.depth):
        layer = net.layers[i]
        a = layer.weight @ (diags[i - 1][:, None] * a)
        b = layer.weight @ (diags[i - 1] * b) + layer.bias
        mats.append(a)
        vecs.append(b)
    return mats, vecs


def per_region_affine(net: GenerativeNetwork, code: ActivationCode) -> AffineMap:
    a, b = partial_affine(net, code, net.depth)
    return AffineMap(a, b)


def backprop_affine(net: GenerativeNetwork, code: ActivationCode, ell: int) -> np.ndarray:
    """``A^{ell+1->L} = W^L D^{L-1} ... D^{ell+1} W^{ell+1}``; identity when ell = L."""
    if not 1 <= ell <= net.depth:
        raise InputError(f"layer index {ell} out of range 1..{net.depth}")
    diags = slope_diagonals(net, code)
    m = np.eye(net.output_dim)
    for i in range(net.depth - 1, ell - 1, -1):
        # walking down: m <- m W^{i+1} D^{i}
        m = m @ net.layers[i].weight
        if i - 1 >= ell:
            m = m * diags[i - 1][None, :]
    return m


def output_jacobians(net: GenerativeNetwork, code: ActivationCode) -> list:
    """``M_ell = A^{ell+1->L} D^ell`` for ell = 1..L (``D^L`` = identity)."""
    diags = slope_diagonals(net, code) + [np.ones(net.output_dim)]
    out = [None] * net.depth
    m = np.eye(net.output_dim)
    for ell in range(net.depth, 0, -1):
        out[ell - 1] = m * diags[ell - 1][None, :]
        m = out[ell - 1] @ net.layers[ell - 1].weight
    return out


# -- construction helpers -----------------------------------------------------

def parse_architecture(spec: str):
    """Parse ``"1-8-2 relu"`` or ``"1-4-4-2 leaky_relu:0.2"`` into dims and activation."""
    parts = spec.split()
    if not parts:
        raise InputError("empty architecture")
    try:
        dims = [int(d) for d in parts[0].split("-")]
    except ValueError as exc:
        raise InputError(f"bad dimension list {parts[0]!r}") from exc
    if len(dims) < 2 or min(dims) < 1:
        raise InputError("architecture needs at least latent and output dims, all positive")
    act, eta = "relu", 0.0
    if len(parts) > 1:
        act, _, slope = parts[1].partition(":")
        if slope:
            eta = float(slope)
        elif act == "leaky_relu":
            eta = 0.1
    if act not in ACTIVATIONS:
        raise InputError(f"unknown activation {act!r}")
    return dims, act, eta


def random_network(dims: Sequence[int], activation: str = "relu", eta: float = 0.1,
                   rng=None, bias_std: float = 0.1) -> GenerativeNetwork:
    """Weights i.i.d. N(0, 1/fan_in), biases i.i.d. N(0, bias_std^2)."""
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.Generator(np.random.Philox(rng))
    layers = []
    for i in range(1, len(dims)):
        act = activation if i < len(dims) - 1 else "identity"
        w = rng.normal(0.0, 1.0 / math.sqrt(dims[i - 1]), size=(dims[i], dims[i - 1]))
        v = rng.normal(0.0, bias_std, size=dims[i])
        layers.append(Layer(w, v, act, eta if act == "leaky_relu" else 0.0))
    return GenerativeNetwork(tuple(layers))


def linear_network(weight, bias) -> GenerativeNetwork:
    return GenerativeNetwork((Layer(np.atleast_2d(weight), np.atleast_1d(bias)),))


# -- JSON ---------------------------------------------------------------------

def _fmt(x: float) -> str:
    if not math.isfinite(x):
        raise InputError("cannot serialize non-finite value")
    return format(x, ".17g")


def dumps_json(obj, indent: int | None = None) -> str:
    """JSON with every float written to 17 significant digits."""

    def enc(o, level):
        pad = "" if indent is None else "\n" + " " * (indent * (level + 1))
        end = "" if indent is None else "\n" + " " * (indent * level)
        sep = "," if indent is None else ","
        if isinstance(o, dict):
            if not o:
                return "{}"
            items = [pad + json.dumps(str(k)) + ": " + enc(v, level + 1) for k, v in o.items()]
            return "{" + sep.join(items) + end + "}"
        if isinstance(o, (list, tuple)):
            if not o:
                return "[]"
            if all(not isinstance(v, (list, tuple, dict)) for v in o):
                return "[" + ", ".join(enc(v, level + 1) for v in o) + "]"
            items = [pad + enc(v, level + 1) for v in o]
            return "[" + sep.join(items) + end + "]"
        if isinstance(o, np.ndarray):
            return enc(o.tolist(), level)
        if isinstance(o, (bool, np.bool_)):
            return "true" if o else "false"
        if isinstance(o, (int, np.integer)):
            return str(int(o))
        if isinstance(o, (float, np.floating)):
            return _fmt(float(o))
        if o is None:
            return "null"
        return json.dumps(o)

    return enc(obj, 0)


def save_model(path, net: GenerativeNetwork, noise: NoiseModel | None = None) -> None:
    doc = net.to_dict()
    if noise is not None:
        doc["noise"] = noise.to_dict()
    with open(path, "w", newline="\n") as fh:
        fh.write(dumps_json(doc, indent=1) + "\n")


def load_model(path):
    """Return ``(net, noise)``; ``noise`` is None when the file carries none."""
    with open(path) as fh:
        doc = json.load(fh)
    net = GenerativeNetwork.from_dict(doc)
    noise = NoiseModel.from_dict(doc["noise"]) if "noise" in doc else None
    return net, noise
