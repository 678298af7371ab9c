"""Model assembly: recurrent transition, latent chain, and emission heads
combined into the step-wise training objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..diffcore import tape as tp
from ..diffcore.checkpoint import load_checkpoint, save_checkpoint
from ..diffcore.tape import Parameter, Tensor
from ..flows import FlowStack
from ..recurrent import (
    FeatureExtractor,
    GaussianParamNet,
    GaussianParams,
    LstmCell,
    LstmState,
    reparam_sample,
)
from .config import ModelConfig
from .mdn import MdnHead, mdn_log_prob, mdn_sample


@dataclass
class ModelState:
    lstm: LstmState
    z: Tensor | None = None

    def detached(self) -> "ModelState":
        lstm = LstmState(h=Tensor(self.lstm.h.value.copy()),
                         c=Tensor(self.lstm.c.value.copy()))
        z = Tensor(self.z.value.copy()) if self.z is not None else None
        return ModelState(lstm=lstm, z=z)


@dataclass
class StepData:
    """One time step: observed points x_t, its histogram frame, and the
    input frame u_t (normally the previous step's histogram)."""

    points: np.ndarray          # (n, 2), possibly empty
    frame: np.ndarray           # (k*k,) flattened histogram of x_t
    u: np.ndarray               # (k*k,) flattened input frame


@dataclass
class ElboReport:
    recon: list[float] = field(default_factory=list)   # per-step totals
    kl: list[float] = field(default_factory=list)      # per-step values
    beta: float = 1.0

    @property
    def recon_total(self) -> float:
        return float(sum(self.recon))

    @property
    def kl_total(self) -> float:
        return float(sum(self.kl))

    @property
    def objective(self) -> float:
        return self.recon_total - self.beta * self.kl_total


def kl_diag_gaussians(q: GaussianParams, p: GaussianParams) -> Tensor:
    """Closed-form KL(q || p) between diagonal Gaussians, summed over dims."""
    if q.mu.value.shape != p.mu.value.shape:
        raise ValueError("KL requires equal widths")
    d = tp.sub(q.mu, p.mu)
    ratio = tp.mul(tp.add(tp.square(q.sigma), tp.square(d)),
                   tp.reciprocal(tp.square(p.sigma)))
    per_dim = tp.add(tp.sub(tp.log(p.sigma), tp.log(q.sigma)),
                     tp.affine(ratio, scale=0.5, shift=-0.5))
    return tp.sum_(per_dim)


def steps_for(dataset, indices) -> list[StepData]:
    """Build step inputs for absolute bin indices: u_t is the previous
    bin's histogram; the first bin of the series gets a zero frame."""
    frames_flat = dataset.frames_flat()
    zero = np.zeros(frames_flat.shape[1])
    steps = []
    for i in indices:
        u = frames_flat[i - 1] if i > 0 else zero
        steps.append(StepData(points=np.asarray(dataset.points[i], dtype=np.float64),
                              frame=frames_flat[i], u=u))
    return steps


def _selector(counts: list[int]) -> np.ndarray:
    """0/1 matrix mapping stacked step rows to per-point rows."""
    total = sum(counts)
    sel = np.zeros((total, len(counts)))
    offset = 0
    for j, n in enumerate(counts):
        sel[offset:offset + n, j] = 1.0
        offset += n
    return sel


class SequenceModel:
    """A trainable sequence density model over 2-D point sets.

    The transition is an LSTM over extracted input-frame features, with an
    optional stochastic latent chain (conditional prior + amortized
    posterior).  The emission is a conditional flow or a mixture density
    head, conditioned on the latent and/or deterministic state.
    """

    def __init__(self, config: ModelConfig, k: int,
                 rng: np.random.Generator | None = None):
        self.config = config
        self.k = int(k)
        self.frame_scale = float(self.k * self.k)
        if rng is None:
            rng = np.random.default_rng(config.seed)
        H = config.lstm_width
        Z = config.latent_width
        frame_width = self.k * self.k
        act = config.hidden_activation

        self.extractor = FeatureExtractor("extractor", frame_width,
                                          config.extractor_widths, rng,
                                          act=config.extractor_activation)
        self.lstm = LstmCell("lstm", self.extractor.out_width, H, rng)
        self.h0 = Parameter("init.h", np.zeros((1, H)))
        self.c0 = Parameter("init.c", np.zeros((1, H)))

        if config.stochastic:
            self.enc_extractor = FeatureExtractor("encoder.extractor", frame_width,
                                                  config.extractor_widths, rng,
                                                  act=config.extractor_activation)
            self.prior_net = GaussianParamNet("prior", Z + H, config.prior_hidden,
                                              Z, rng, act=act)
            self.posterior_net = GaussianParamNet(
                "posterior", Z + H + self.enc_extractor.out_width,
                config.posterior_hidden, Z, rng, act=act)
            self.z0 = Parameter("init.z", np.zeros((1, Z)))
            ctx_width = Z + H
        else:
            self.enc_extractor = None
            self.prior_net = None
            self.posterior_net = None
            self.z0 = None
            ctx_width = H
        self.ctx_width = ctx_width

        if config.emission == "flow":
            self.flow = FlowStack.build("flow", ctx_width, config.flow_depth,
                                        config.coupling_hidden, config.base_hidden,
                                        rng, act=act, clamp=config.scale_clamp,
                                        epsilon=config.norm_epsilon,
                                        momentum=config.norm_momentum)
            self.mdn = None
        else:
            kind = config.emission.split("-", 1)[1]
            self.flow = None
            self.mdn = MdnHead("mdn", ctx_width, config.mdn_hidden,
                               config.mixtures, kind, rng, act=act)
        self._check_unique_names()

    @property
    def model_id(self) -> str:
        return self.config.name

    def _check_unique_names(self):
        names = list(self.parameters())
        if len(names) != len(set(names)):
            raise RuntimeError("duplicate parameter names in model")

    def parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        out.update(self.extractor.parameters())
        out.update(self.lstm.parameters())
        out[self.h0.name] = self.h0
        out[self.c0.name] = self.c0
        if self.config.stochastic:
            out.update(self.enc_extractor.parameters())
            out.update(self.prior_net.parameters())
            out.update(self.posterior_net.parameters())
            out[self.z0.name] = self.z0
        if self.flow is not None:
            out.update(self.flow.parameters())
        if self.mdn is not None:
            out.update(self.mdn.parameters())
        return out

    # ----- persistence ----------------------------------------------------

    def norm_state(self) -> list[dict]:
        if self.flow is None:
            return []
        return [layer.state() for layer in self.flow.norm_layers()]

    def load_norm_state(self, states: list[dict]):
        if self.flow is None:
            return
        layers = self.flow.norm_layers()
        if len(states) != len(layers):
            raise ValueError("normalization state count mismatch")
        for layer, state in zip(layers, states):
            layer.load_state(state)

    def save(self, path, optimizer=None, extra_meta: dict | None = None):
        meta = {"config": self.config.to_dict(), "k": self.k,
                "norm_state": self.norm_state()}
        meta.update(extra_meta or {})
        save_checkpoint(path, self.parameters(), optimizer, meta)

    @classmethod
    def from_checkpoint(cls, path) -> tuple["SequenceModel", dict]:
        ckpt = load_checkpoint(path)
        config = ModelConfig.from_dict(ckpt.meta["config"])
        model = cls(config, k=int(ckpt.meta["k"]))
        ckpt.restore_into(model.parameters())
        model.load_norm_state(ckpt.meta.get("norm_state", []))
        return model, ckpt.meta

    # ----- transitions and conditionals ------------------------------------

    def initial_state(self) -> ModelState:
        return ModelState(lstm=LstmState(h=self.h0, c=self.c0), z=self.z0)

    def input_features(self, u_frames: np.ndarray) -> Tensor:
        """Extract features for a (T, k*k) stack of input frames.

        Normalized histograms carry O(1/k^2) cell values; frames are
        rescaled by k^2 so extractor inputs are O(1)."""
        return self.extractor(Tensor(np.atleast_2d(u_frames) * self.frame_scale))

    def frame_features(self, frames: np.ndarray) -> Tensor:
        return self.enc_extractor(Tensor(np.atleast_2d(frames) * self.frame_scale))

    def advance(self, state: ModelState, u_flat: np.ndarray) -> ModelState:
        feats = self.input_features(np.asarray(u_flat).reshape(1, -1))
        return self.advance_with_features(state, feats)

    def advance_with_features(self, state: ModelState, feats_row: Tensor) -> ModelState:
        lstm = self.lstm.step(feats_row, state.lstm)
        return ModelState(lstm=lstm, z=state.z)

    def prior_params(self, state: ModelState) -> GaussianParams:
        return self.prior_net(state.z, state.lstm.h)

    def posterior_params(self, state: ModelState, x_feats_row: Tensor) -> GaussianParams:
        return self.posterior_net(state.z, state.lstm.h, x_feats_row)

    def emission_ctx(self, state: ModelState) -> Tensor:
        if self.config.stochastic:
            return tp.concat([state.z, state.lstm.h], axis=1)
        return state.lstm.h

    # ----- emission --------------------------------------------------------

    def emission_log_prob(self, points: np.ndarray, ctx: Tensor,
                          training: bool = False,
                          update_stats: bool = False) -> Tensor:
        if self.flow is not None:
            return self.flow.log_prob(points, ctx, training=training,
                                      update_stats=update_stats)
        return mdn_log_prob(points, self.mdn.params(ctx))

    def emission_sample(self, ctx: Tensor, n: int,
                        rng: np.random.Generator) -> np.ndarray:
        if n == 0:
            return np.zeros((0, 2))
        if self.flow is not None:
            return self.flow.sample(ctx, rng.standard_normal((n, 2))).value
        return mdn_sample(self.mdn.params(ctx), n, rng)

    # ----- objective --------------------------------------------------------

    def window_elbo(self, steps: list[StepData], state: ModelState, beta: float,
                    noises: np.ndarray | None = None,
                    rng: np.random.Generator | None = None,
                    training: bool = False, update_stats: bool = False
                    ) -> tuple[Tensor, ElboReport, ModelState]:
        """Accumulate the step-wise objective over a window of steps.

        Returns (objective tensor, report, final state).  The objective is
        sum(recon) - beta * sum(KL); empty bins skip reconstruction but the
        recurrent state still advances.
        """
        if not 0.0 <= beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        T = len(steps)
        Z = self.config.latent_width
        if self.config.stochastic and noises is None:
            if rng is None:
                raise ValueError("stochastic transition needs noises or rng")
            noises = rng.standard_normal((T, Z))

        u_stack = np.stack([s.u for s in steps])
        u_feats = self.input_features(u_stack)
        if self.config.stochastic:
            x_stack = np.stack([s.frame for s in steps])
            x_feats = self.frame_features(x_stack)

        ctx_rows: list[Tensor] = []
        kls: list[Tensor] = []
        for t in range(T):
            feats_row = tp.slice_(u_feats, (slice(t, t + 1), slice(None)))
            state = self.advance_with_features(state, feats_row)
            if self.config.stochastic:
                prior = self.prior_params(state)
                x_row = tp.slice_(x_feats, (slice(t, t + 1), slice(None)))
                post = self.posterior_params(state, x_row)
                sample = reparam_sample(post, noises[t], source="posterior")
                state = ModelState(lstm=state.lstm, z=sample.z)
                kls.append(kl_diag_gaussians(post, prior))
            ctx_rows.append(self.emission_ctx(state))

        report = ElboReport(beta=float(beta))
        nonempty = [t for t in range(T) if steps[t].points.shape[0] > 0]
        if nonempty:
            counts = [int(steps[t].points.shape[0]) for t in nonempty]
            pts = np.concatenate([steps[t].points for t in nonempty])
            ctx_stack = (ctx_rows[nonempty[0]] if len(nonempty) == 1
                         else tp.concat([ctx_rows[t] for t in nonempty], axis=0))
            ctx_pts = tp.matmul(_selector(counts), ctx_stack)
            ll = self.emission_log_prob(pts, ctx_pts, training=training,
                                        update_stats=update_stats)
            recon_total = tp.sum_(ll)
            offsets = np.concatenate([[0], np.cumsum(counts)])
            segment = {t: (offsets[j], offsets[j + 1])
                       for j, t in enumerate(nonempty)}
        else:
            recon_total = Tensor(0.0)
            segment = {}

        for t in range(T):
            if t in segment:
                lo, hi = segment[t]
                report.recon.append(float(np.sum(ll.value[lo:hi])))
            else:
                report.recon.append(0.0)
            report.kl.append(float(kls[t].value) if kls else 0.0)

        if kls:
            kl_total = kls[0]
            for term in kls[1:]:
                kl_total = tp.add(kl_total, term)
            objective = tp.sub(recon_total, tp.affine(kl_total, scale=float(beta)))
        else:
            objective = recon_total
        return objective, report, state

    def step_elbo(self, step: StepData, state: ModelState, beta: float,
                  noise: np.ndarray | None = None,
                  rng: np.random.Generator | None = None,
                  training: bool = False, update_stats: bool = False
                  ) -> tuple[Tensor, ElboReport, ModelState]:
        """Single-step objective contribution; see window_elbo."""
        noises = None
        if noise is not None:
            noises = np.asarray(noise, dtype=np.float64).reshape(1, -1)
        return self.window_elbo([step], state, beta, noises=noises, rng=rng,
                                training=training, update_stats=update_stats)
