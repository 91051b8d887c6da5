"""Dense layers and feed-forward networks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .autodiff import Var, as_var, linear, relu

ACTIVATIONS = ("relu", "identity")


@dataclass
class DenseLayer:
    weight: np.ndarray  # (d_out, d_in)
    bias: Optional[np.ndarray]  # (d_out,) or None for a bias-free map
    activation: str = "relu"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ValueError("weight must be a matrix")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.weight.shape[0],):
                raise ValueError(f"bias shape {self.bias.shape} does not match d_out {self.weight.shape[0]}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator, activation="relu", bias=True):
        limit = np.sqrt(6.0 / (d_in + d_out))
        w = rng.uniform(-limit, limit, size=(d_out, d_in))
        return cls(w, np.zeros(d_out) if bias else None, activation)

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def parameters(self, prefix: str) -> dict[str, np.ndarray]:
        params = {f"{prefix}weight": self.weight}
        if self.bias is not None:
            params[f"{prefix}bias"] = self.bias
        return params

    def apply(self, x: Var, bound: Mapping[str, Var], prefix: str) -> Var:
        b = bound[f"{prefix}bias"] if self.bias is not None else None
        h = linear(x, bound[f"{prefix}weight"], b)
        return relu(h) if self.activation == "relu" else h


@dataclass
class Network:
    """A chain of dense layers; an empty chain is the identity map."""

    layers: list[DenseLayer] = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.d_out != b.d_in:
                raise ValueError(f"layer dims do not chain: {a.d_out} -> {b.d_in}")

    @classmethod
    def mlp(cls, sizes: list[int], rng: np.random.Generator, out_activation="identity"):
        """Layers ``sizes[0] -> ... -> sizes[-1]``; relu on hidden layers."""
        layers = []
        for i, (d_in, d_out) in enumerate(zip(sizes, sizes[1:])):
            last = i == len(sizes) - 2
            layers.append(DenseLayer.init(d_in, d_out, rng, out_activation if last else "relu"))
        return cls(layers)

    @property
    def d_in(self) -> Optional[int]:
        return self.layers[0].d_in if self.layers else None

    @property
    def d_out(self) -> Optional[int]:
        return self.layers[-1].d_out if self.layers else None

    def parameters(self, prefix: str = "") -> dict[str, np.ndarray]:
        params: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers):
            params.update(layer.parameters(f"{prefix}{i}."))
        return params

    def apply(self, x: Var, bound: Mapping[str, Var], prefix: str = "") -> Var:
        for i, layer in enumerate(self.layers):
            x = layer.apply(x, bound, f"{prefix}{i}.")
        return x


def constants(params: Mapping[str, np.ndarray]) -> dict[str, Var]:
    return {k: Var(v) for k, v in params.items()}


def forward(net: Network, x) -> np.ndarray:
    """Evaluate ``net`` on a vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    if net.layers and x.shape[-1] != net.d_in:
        raise ValueError(f"input dim {x.shape[-1]} does not match network d_in {net.d_in}")
    single = x.ndim == 1
    out = net.apply(as_var(np.atleast_2d(x)), constants(net.parameters()))
    return out.data[0] if single else out.data
