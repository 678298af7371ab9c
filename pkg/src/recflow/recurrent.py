"""Sequence backbone: LSTM transition, histogram feature extractor,
conditional prior / posterior networks, reparameterized latent sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import tape as tp
from .diffcore.tape import Parameter, Tensor
from .nn import MLP, Dense, fan_in_uniform


@dataclass
class LstmState:
    h: Tensor  # (1, H)
    c: Tensor  # (1, H)


@dataclass
class GaussianParams:
    mu: Tensor     # (1, Z)
    sigma: Tensor  # (1, Z), strictly positive


@dataclass
class LatentSample:
    z: Tensor
    source: str           # "prior" | "posterior"
    noise: np.ndarray


class LstmCell:
    """Single-layer LSTM with the standard gate equations.

    Gate pre-activations come from one fused affine map on [input, h];
    slices order the gates as (input, forget, output, candidate).
    """

    def __init__(self, name: str, in_width: int, hidden_width: int,
                 rng: np.random.Generator):
        self.in_width = in_width
        self.hidden_width = hidden_width
        fan_in = in_width + hidden_width
        self.weight = Parameter(f"{name}.weight",
                                fan_in_uniform(rng, (fan_in, 4 * hidden_width), fan_in))
        self.bias = Parameter(f"{name}.bias",
                              fan_in_uniform(rng, (4 * hidden_width,), fan_in))

    def step(self, features: Tensor, state: LstmState) -> LstmState:
        if features.value.shape[-1] != self.in_width:
            raise ValueError(
                f"lstm input width {features.value.shape[-1]} != {self.in_width}")
        H = self.hidden_width
        stacked = tp.concat([features, state.h], axis=1)
        gates = tp.add(tp.matmul(stacked, self.weight), self.bias)
        i = tp.sigmoid(tp.slice_(gates, (slice(None), slice(0, H))))
        f = tp.sigmoid(tp.slice_(gates, (slice(None), slice(H, 2 * H))))
        o = tp.sigmoid(tp.slice_(gates, (slice(None), slice(2 * H, 3 * H))))
        g = tp.tanh(tp.slice_(gates, (slice(None), slice(3 * H, 4 * H))))
        c = tp.add(tp.mul(f, state.c), tp.mul(i, g))
        h = tp.mul(o, tp.tanh(c))
        return LstmState(h=h, c=c)

    def parameters(self) -> dict[str, Parameter]:
        return {self.weight.name: self.weight, self.bias.name: self.bias}


class FeatureExtractor:
    """Feedforward map from a flattened histogram frame to features.

    All layers are activated, so the feature vector itself passes through
    the chosen nonlinearity.
    """

    def __init__(self, name: str, in_width: int, widths: tuple[int, ...],
                 rng: np.random.Generator, act: str = "relu"):
        self.in_width = in_width
        self.out_width = widths[-1]
        self.layers: list[Dense] = []
        prev = in_width
        for i, width in enumerate(widths):
            self.layers.append(Dense(f"{name}.l{i}", prev, width, rng, act=act))
            prev = width

    def __call__(self, frame: Tensor | np.ndarray) -> Tensor:
        x = frame if isinstance(frame, Tensor) else Tensor(frame)
        if x.value.ndim == 1:
            x = Tensor(x.value.reshape(1, -1))
        for layer in self.layers:
            x = layer(x)
        return x

    def parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for layer in self.layers:
            out.update(layer.parameters())
        return out


class GaussianParamNet:
    """MLP emitting a diagonal Gaussian's mean and softplus scale.

    Serves both the conditional prior (inputs z_prev ++ h) and the
    posterior encoder (inputs z_prev ++ h ++ frame features).
    """

    def __init__(self, name: str, in_width: int, hidden: tuple[int, ...],
                 out_width: int, rng: np.random.Generator, act: str = "tanh"):
        self.out_width = out_width
        self.net = MLP(name, in_width, hidden, 2 * out_width, rng, act=act)

    def __call__(self, *parts: Tensor) -> GaussianParams:
        x = parts[0] if len(parts) == 1 else tp.concat(list(parts), axis=1)
        out = self.net(x)
        Z = self.out_width
        mu = tp.slice_(out, (slice(None), slice(0, Z)))
        sigma = tp.softplus(tp.slice_(out, (slice(None), slice(Z, 2 * Z))))
        return GaussianParams(mu=mu, sigma=sigma)

    def parameters(self) -> dict[str, Parameter]:
        return self.net.parameters()


def reparam_sample(params: GaussianParams, noise: np.ndarray,
                   source: str = "posterior") -> LatentSample:
    """z = mu + sigma * noise; gradients flow into mu and sigma."""
    noise = np.asarray(noise, dtype=np.float64).reshape(params.mu.value.shape)
    z = tp.add(params.mu, tp.mul(params.sigma, noise))
    return LatentSample(z=z, source=source, noise=noise)
