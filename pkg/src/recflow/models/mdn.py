"""Mixture density emission: Gaussian mixtures with diagonal or full
(Cholesky-parameterized) covariances over 2-D points."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..diffcore import tape as tp
from ..diffcore.tape import Parameter, Tensor
from ..flows import LOG_2PI
from ..nn import MLP


@dataclass
class MdnParams:
    """Per-row mixture parameters; every field is a (rows, K) tensor."""

    kind: str                    # "diag" | "full"
    log_weights: Tensor          # normalized: logsumexp over K is 0
    mu_x: Tensor
    mu_y: Tensor
    sigma_x: Tensor | None = None
    sigma_y: Tensor | None = None
    l11: Tensor | None = None    # Cholesky factor entries, diagonal positive
    l21: Tensor | None = None
    l22: Tensor | None = None

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights.value)


class MdnHead:
    """Context-conditioned mixture parameters via an MLP with sliced heads."""

    def __init__(self, name: str, ctx_width: int, hidden: tuple[int, ...],
                 mixtures: int, kind: str, rng: np.random.Generator,
                 act: str = "tanh"):
        if kind not in ("diag", "full"):
            raise ValueError("mdn kind must be 'diag' or 'full'")
        self.kind = kind
        self.mixtures = mixtures
        per = 5 if kind == "diag" else 6
        self.net = MLP(name, ctx_width, hidden, per * mixtures, rng, act=act)

    def _block(self, out: Tensor, i: int) -> Tensor:
        K = self.mixtures
        return tp.slice_(out, (slice(None), slice(i * K, (i + 1) * K)))

    def params(self, ctx: Tensor) -> MdnParams:
        out = self.net(ctx)
        logits = self._block(out, 0)
        log_w = tp.sub(logits, tp.logsumexp(logits, axis=1, keepdims=True))
        mu_x = self._block(out, 1)
        mu_y = self._block(out, 2)
        if self.kind == "diag":
            return MdnParams(kind="diag", log_weights=log_w, mu_x=mu_x, mu_y=mu_y,
                             sigma_x=tp.softplus(self._block(out, 3)),
                             sigma_y=tp.softplus(self._block(out, 4)))
        return MdnParams(kind="full", log_weights=log_w, mu_x=mu_x, mu_y=mu_y,
                         l11=tp.softplus(self._block(out, 3)),
                         l21=self._block(out, 4),
                         l22=tp.softplus(self._block(out, 5)))

    def parameters(self) -> dict[str, Parameter]:
        return self.net.parameters()


def mdn_log_prob(points: np.ndarray, params: MdnParams) -> Tensor:
    """Per-point mixture log-density via log-sum-exp over components.

    `points` is (N, 2); parameter rows broadcast against it (one shared row
    or one row per point)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    px = points[:, :1]
    py = points[:, 1:2]
    dx = tp.sub(px, params.mu_x)
    dy = tp.sub(py, params.mu_y)
    if params.kind == "diag":
        zx = tp.div(dx, params.sigma_x)
        zy = tp.div(dy, params.sigma_y)
        log_scale = tp.add(tp.log(params.sigma_x), tp.log(params.sigma_y))
    else:
        # forward substitution with the lower-triangular Cholesky factor
        y1 = tp.div(dx, params.l11)
        zy = tp.div(tp.sub(dy, tp.mul(params.l21, y1)), params.l22)
        zx = y1
        log_scale = tp.add(tp.log(params.l11), tp.log(params.l22))
    quad = tp.add(tp.square(zx), tp.square(zy))
    comp = tp.sub(tp.affine(quad, scale=-0.5, shift=-LOG_2PI), log_scale)
    return tp.logsumexp(tp.add(comp, params.log_weights), axis=1)


def mdn_sample(params: MdnParams, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw n points from a single-row parameter set (no gradients)."""
    w = params.weights.ravel()
    w = w / w.sum()
    which = rng.choice(w.size, size=n, p=w)
    eps = rng.standard_normal((n, 2))
    mu = np.stack([params.mu_x.value.ravel()[which],
                   params.mu_y.value.ravel()[which]], axis=1)
    if params.kind == "diag":
        sd = np.stack([params.sigma_x.value.ravel()[which],
                       params.sigma_y.value.ravel()[which]], axis=1)
        return mu + sd * eps
    l11 = params.l11.value.ravel()[which]
    l21 = params.l21.value.ravel()[which]
    l22 = params.l22.value.ravel()[which]
    out = np.empty((n, 2))
    out[:, 0] = mu[:, 0] + l11 * eps[:, 0]
    out[:, 1] = mu[:, 1] + l21 * eps[:, 0] + l22 * eps[:, 1]
    return out
