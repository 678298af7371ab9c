"""Conditional normalizing flow over 2-D coordinates.

The generative transformation runs base -> layers (forward order); density
evaluation runs the reversed layers' inverses and accumulates their
log-determinants.  Layers come in triplets [coupling, normalization,
permutation], listed in sampling order.

Context conventions: `ctx` is a (1, C) row when one conditioning state
covers all points, or an (N, C) matrix with one row per point.
"""

from __future__ import annotations

import numpy as np

from .diffcore import tape as tp
from .diffcore.tape import Parameter, Tensor
from .nn import MLP

LOG_2PI = float(np.log(2.0 * np.pi))


class FlowError(RuntimeError):
    """Non-finite intermediate inside a flow stack."""

    def __init__(self, layer_index: int, direction: str):
        super().__init__(f"non-finite values after layer {layer_index} ({direction})")
        self.layer_index = layer_index
        self.direction = direction


def diag_gaussian_log_prob(x, mu, sigma) -> Tensor:
    """Row-wise log N(x; mu, diag(sigma^2)); shapes broadcast over rows."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    width = x.value.shape[-1]
    z = tp.div(tp.sub(x, mu), sigma)
    quad = tp.sum_(tp.square(z), axis=1)
    logs = tp.sum_(tp.log(sigma), axis=1)
    return tp.sub(tp.affine(quad, scale=-0.5, shift=-0.5 * width * LOG_2PI), logs)


def _rows(t) -> int:
    return (t.value if isinstance(t, Tensor) else np.asarray(t)).shape[0]


def _per_point_ctx(ctx: Tensor, n: int) -> Tensor:
    if ctx.value.shape[0] == n:
        return ctx
    if ctx.value.shape[0] == 1:
        return tp.broadcast_rows(ctx, n)
    raise ValueError(f"context rows {ctx.value.shape[0]} incompatible with batch {n}")


class ConditionalBase:
    """Diagonal Gaussian whose mean and scale come from a context network."""

    def __init__(self, name: str, ctx_width: int, hidden: tuple[int, ...],
                 rng: np.random.Generator, dim: int = 2, act: str = "tanh"):
        self.dim = dim
        self.net = MLP(name, ctx_width, hidden, 2 * dim, rng, act=act)

    def params_for(self, ctx: Tensor) -> tuple[Tensor, Tensor]:
        out = self.net(ctx)
        mu = tp.slice_(out, (slice(None), slice(0, self.dim)))
        sigma = tp.softplus(tp.slice_(out, (slice(None), slice(self.dim, 2 * self.dim))))
        return mu, sigma

    def log_prob(self, x, ctx: Tensor) -> Tensor:
        mu, sigma = self.params_for(ctx)
        return diag_gaussian_log_prob(x, mu, sigma)

    def sample(self, ctx: Tensor, noise: np.ndarray) -> Tensor:
        mu, sigma = self.params_for(ctx)
        return tp.add(mu, tp.mul(sigma, np.asarray(noise, dtype=np.float64)))

    def parameters(self) -> dict[str, Parameter]:
        return self.net.parameters()


class FixedBase:
    """Constant-parameter diagonal Gaussian base (testing and references)."""

    def __init__(self, mu=(0.0, 0.0), sigma=(1.0, 1.0)):
        self.mu = np.asarray(mu, dtype=np.float64).reshape(1, -1)
        self.sigma = np.asarray(sigma, dtype=np.float64).reshape(1, -1)
        self.dim = self.mu.shape[1]

    def params_for(self, ctx) -> tuple[Tensor, Tensor]:
        return Tensor(self.mu), Tensor(self.sigma)

    def log_prob(self, x, ctx) -> Tensor:
        return diag_gaussian_log_prob(x, self.mu, self.sigma)

    def sample(self, ctx, noise: np.ndarray) -> Tensor:
        return Tensor(self.mu + self.sigma * np.asarray(noise, dtype=np.float64))

    def parameters(self) -> dict[str, Parameter]:
        return {}


class ConditionalCoupling:
    """Affine coupling over D=2 with split point d=1.

    Sampling direction: x2 = (b2 - t) * exp(-s); density direction inverts
    it, with s and t functions of (unchanged coordinate, context).  Scale
    outputs pass through a soft clamp before exponentiation.
    """

    transformed = 1  # number of transformed dimensions (D - d)

    def __init__(self, name: str, ctx_width: int, hidden: tuple[int, ...],
                 rng: np.random.Generator, act: str = "tanh", clamp: float = 5.0):
        self.clamp = float(clamp)
        self.scale_net = MLP(f"{name}.s", 1 + ctx_width, hidden, 1, rng, act=act)
        self.translate_net = MLP(f"{name}.t", 1 + ctx_width, hidden, 1, rng, act=act)

    def _scale_translate(self, kept: Tensor, ctx: Tensor) -> tuple[Tensor, Tensor]:
        inp = tp.concat([kept, ctx], axis=1)
        s = self.scale_net(inp)
        if self.clamp > 0.0:
            s = tp.affine(tp.tanh(tp.affine(s, scale=1.0 / self.clamp)), scale=self.clamp)
        return s, self.translate_net(inp)

    def forward(self, b, ctx: Tensor, training: bool = False,
                update_stats: bool = False) -> tuple[Tensor, Tensor]:
        b = b if isinstance(b, Tensor) else Tensor(b)
        b1 = tp.slice_(b, (slice(None), slice(0, 1)))
        b2 = tp.slice_(b, (slice(None), slice(1, 2)))
        s, t = self._scale_translate(b1, ctx)
        x2 = tp.mul(tp.sub(b2, t), tp.exp(tp.neg(s)))
        log_det = tp.affine(tp.sum_(s, axis=1), scale=-1.0)
        return tp.concat([b1, x2], axis=1), log_det

    def inverse(self, x, ctx: Tensor, training: bool = False,
                update_stats: bool = False) -> tuple[Tensor, Tensor]:
        x = x if isinstance(x, Tensor) else Tensor(x)
        x1 = tp.slice_(x, (slice(None), slice(0, 1)))
        x2 = tp.slice_(x, (slice(None), slice(1, 2)))
        s, t = self._scale_translate(x1, ctx)
        b2 = tp.add(tp.mul(x2, tp.exp(s)), t)
        log_det = tp.sum_(s, axis=1)
        return tp.concat([x1, b2], axis=1), log_det

    def parameters(self) -> dict[str, Parameter]:
        out = self.scale_net.parameters()
        out.update(self.translate_net.parameters())
        return out


class FlowNorm:
    """Normalization layer inside the flow.

    The density-direction pass standardizes its input; in training mode it
    uses batch statistics (biased variance) and optionally updates running
    statistics, in evaluation mode it uses the running statistics only.
    The sampling direction always de-standardizes with running statistics.
    """

    def __init__(self, dim: int = 2, epsilon: float = 1e-5, momentum: float = 0.1):
        if epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if not (0.0 < momentum < 1.0):
            raise ValueError("momentum must lie in (0, 1)")
        self.dim = dim
        self.epsilon = float(epsilon)
        self.momentum = float(momentum)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)

    def normalize(self, v, training: bool = False,
                  update_stats: bool = False) -> tuple[Tensor, Tensor]:
        v = v if isinstance(v, Tensor) else Tensor(v)
        n = v.value.shape[0]
        if training:
            if n < 2:
                raise ValueError("training-mode normalization needs a batch of >= 2")
            mean = tp.affine(tp.sum_(v, axis=0, keepdims=True), scale=1.0 / n)
            centered = tp.sub(v, mean)
            var = tp.affine(tp.sum_(tp.square(centered), axis=0, keepdims=True),
                            scale=1.0 / n)
            var_eps = tp.affine(var, shift=self.epsilon)
            out = tp.mul(centered, tp.exp(tp.affine(tp.log(var_eps), scale=-0.5)))
            log_det = tp.affine(tp.sum_(tp.log(var_eps)), scale=-0.5)
            if update_stats:
                m = self.momentum
                self.running_mean = (1.0 - m) * self.running_mean + m * mean.value.ravel()
                self.running_var = (1.0 - m) * self.running_var + m * var.value.ravel()
            return out, log_det
        scale = 1.0 / np.sqrt(self.running_var + self.epsilon)
        out = tp.mul(tp.sub(v, self.running_mean.reshape(1, -1)), scale.reshape(1, -1))
        log_det = Tensor(-0.5 * float(np.sum(np.log(self.running_var + self.epsilon))))
        return out, log_det

    def denormalize(self, v) -> tuple[Tensor, Tensor]:
        v = v if isinstance(v, Tensor) else Tensor(v)
        scale = np.sqrt(self.running_var + self.epsilon)
        out = tp.add(tp.mul(v, scale.reshape(1, -1)), self.running_mean.reshape(1, -1))
        log_det = Tensor(0.5 * float(np.sum(np.log(self.running_var + self.epsilon))))
        return out, log_det

    # stack-facing wrappers: normalization is the density-direction op
    def inverse(self, v, ctx=None, training: bool = False,
                update_stats: bool = False) -> tuple[Tensor, Tensor]:
        return self.normalize(v, training=training, update_stats=update_stats)

    def forward(self, v, ctx=None, training: bool = False,
                update_stats: bool = False) -> tuple[Tensor, Tensor]:
        return self.denormalize(v)

    def parameters(self) -> dict[str, Parameter]:
        return {}

    def state(self) -> dict:
        return {"running_mean": self.running_mean.tolist(),
                "running_var": self.running_var.tolist()}

    def load_state(self, state: dict):
        self.running_mean = np.asarray(state["running_mean"], dtype=np.float64)
        self.running_var = np.asarray(state["running_var"], dtype=np.float64)


class Swap:
    """Deterministic coordinate swap for D=2; self-inverse, log-det 0."""

    def _apply(self, v) -> tuple[Tensor, Tensor]:
        v = v if isinstance(v, Tensor) else Tensor(v)
        first = tp.slice_(v, (slice(None), slice(0, 1)))
        second = tp.slice_(v, (slice(None), slice(1, 2)))
        return tp.concat([second, first], axis=1), Tensor(0.0)

    def forward(self, v, ctx=None, training: bool = False,
                update_stats: bool = False) -> tuple[Tensor, Tensor]:
        return self._apply(v)

    def inverse(self, v, ctx=None, training: bool = False,
                update_stats: bool = False) -> tuple[Tensor, Tensor]:
        return self._apply(v)

    def parameters(self) -> dict[str, Parameter]:
        return {}


class FlowStack:
    """Composed conditional flow: base distribution plus ordered layers."""

    def __init__(self, base, layers: list):
        self.base = base
        self.layers = list(layers)

    @classmethod
    def build(cls, name: str, ctx_width: int, depth: int,
              coupling_hidden: tuple[int, ...], base_hidden: tuple[int, ...],
              rng: np.random.Generator, act: str = "tanh", clamp: float = 5.0,
              epsilon: float = 1e-5, momentum: float = 0.1) -> "FlowStack":
        base = ConditionalBase(f"{name}.base", ctx_width, base_hidden, rng, act=act)
        layers: list = []
        for i in range(depth):
            layers.append(ConditionalCoupling(f"{name}.c{i}", ctx_width,
                                              coupling_hidden, rng, act=act,
                                              clamp=clamp))
            layers.append(FlowNorm(epsilon=epsilon, momentum=momentum))
            layers.append(Swap())
        return cls(base, layers)

    def _check(self, v: Tensor, idx: int, direction: str):
        if not np.all(np.isfinite(v.value)):
            raise FlowError(idx, direction)

    def inverse_transform(self, x, ctx: Tensor, training: bool = False,
                          update_stats: bool = False) -> tuple[Tensor, Tensor]:
        """Map data to base space, accumulating inverse log-determinants."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        ctx_pts = _per_point_ctx(ctx, x.value.shape[0]) if self.layers else ctx
        v = x
        total = None
        for idx in range(len(self.layers) - 1, -1, -1):
            v, ld = self.layers[idx].inverse(v, ctx_pts, training=training,
                                             update_stats=update_stats)
            self._check(v, idx, "inverse")
            total = ld if total is None else tp.add(total, ld)
        if total is None:
            total = Tensor(0.0)
        return v, total

    def forward_transform(self, b, ctx: Tensor) -> tuple[Tensor, Tensor]:
        """Map base-space vectors to data space (evaluation-mode layers)."""
        b = b if isinstance(b, Tensor) else Tensor(b)
        ctx_pts = _per_point_ctx(ctx, b.value.shape[0]) if self.layers else ctx
        v = b
        total = None
        for idx, layer in enumerate(self.layers):
            v, ld = layer.forward(v, ctx_pts)
            self._check(v, idx, "forward")
            total = ld if total is None else tp.add(total, ld)
        if total is None:
            total = Tensor(0.0)
        return v, total

    def log_prob(self, x, ctx: Tensor, training: bool = False,
                 update_stats: bool = False) -> Tensor:
        b, log_det = self.inverse_transform(x, ctx, training=training,
                                            update_stats=update_stats)
        return tp.add(self.base.log_prob(b, ctx), log_det)

    def sample(self, ctx: Tensor, noise: np.ndarray) -> Tensor:
        b = self.base.sample(ctx, noise)
        x, _ = self.forward_transform(b, ctx)
        return x

    def parameters(self) -> dict[str, Parameter]:
        out = dict(self.base.parameters())
        for layer in self.layers:
            out.update(layer.parameters())
        return out

    def norm_layers(self) -> list[FlowNorm]:
        return [layer for layer in self.layers if isinstance(layer, FlowNorm)]
