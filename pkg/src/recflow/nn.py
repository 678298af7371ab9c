"""Dense layers and MLPs on top of the gradient tape.

Row convention: activations are (batch, features) matrices; per-timestep
vectors are (1, features) rows.
"""

from __future__ import annotations

import numpy as np

from .diffcore import Parameter
from .diffcore import tape as tp

ACTIVATIONS = {
    "identity": lambda x: x,
    "relu": tp.relu,
    "sigmoid": tp.sigmoid,
    "softplus": tp.softplus,
    "tanh": tp.tanh,
}


def activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        known = ", ".join(sorted(ACTIVATIONS))
        raise ValueError(f"unknown activation {name!r}; known: {known}") from None


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Dense:
    """Affine map x @ W + b with optional activation."""

    def __init__(self, name: str, in_width: int, out_width: int,
                 rng: np.random.Generator, act: str = "identity"):
        self.name = name
        self.in_width = in_width
        self.out_width = out_width
        self.act = act
        self.weight = Parameter(f"{name}.weight",
                                fan_in_uniform(rng, (in_width, out_width), in_width))
        self.bias = Parameter(f"{name}.bias",
                              fan_in_uniform(rng, (out_width,), in_width))

    def __call__(self, x: tp.Tensor) -> tp.Tensor:
        if x.value.shape[-1] != self.in_width:
            raise ValueError(
                f"{self.name}: input width {x.value.shape[-1]} != {self.in_width}")
        out = tp.add(tp.matmul(x, self.weight), self.bias)
        return activation(self.act)(out)

    def parameters(self) -> dict[str, Parameter]:
        return {self.weight.name: self.weight, self.bias.name: self.bias}


class MLP:
    """Stack of Dense layers; hidden layers share one activation."""

    def __init__(self, name: str, in_width: int, hidden: tuple[int, ...],
                 out_width: int, rng: np.random.Generator,
                 act: str = "tanh", out_act: str = "identity"):
        self.name = name
        self.layers: list[Dense] = []
        prev = in_width
        for i, width in enumerate(hidden):
            self.layers.append(Dense(f"{name}.l{i}", prev, width, rng, act=act))
            prev = width
        self.layers.append(Dense(f"{name}.out", prev, out_width, rng, act=out_act))

    def __call__(self, x: tp.Tensor) -> tp.Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for layer in self.layers:
            out.update(layer.parameters())
        return out
