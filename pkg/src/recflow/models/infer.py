"""Evaluation of trained sequence models: exact and importance-sampled
log-likelihood, one-step predictive densities, autoregressive rollout."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..diffcore.tape import Tensor
from ..geodata import Dataset, histogram_frame
from ..recurrent import LstmState
from ..rng import generator
from .core import ModelState, SequenceModel

LOG_2PI = float(np.log(2.0 * np.pi))


def _gauss_logpdf(x: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Row-wise diagonal-Gaussian log-density (plain numpy)."""
    z = (x - mu) / sigma
    return (-0.5 * x.shape[-1] * LOG_2PI
            - np.sum(np.log(sigma), axis=-1)
            - 0.5 * np.sum(z * z, axis=-1))


def _logmeanexp(values: np.ndarray, axis=0) -> np.ndarray:
    m = np.max(values, axis=axis, keepdims=True)
    out = np.log(np.mean(np.exp(values - m), axis=axis)) + np.squeeze(m, axis=axis)
    return out


def _u_frame(dataset: Dataset, t: int, frames_flat: np.ndarray) -> np.ndarray:
    return frames_flat[t - 1] if t > 0 else np.zeros(frames_flat.shape[1])


def state_sequence(model: SequenceModel, dataset: Dataset, upto: int
                   ) -> list[ModelState]:
    """Teacher-forced filtering states; states[p] precedes bin p.

    The latent path follows the posterior mean, which keeps conditioning
    deterministic for evaluation products.
    """
    frames_flat = dataset.frames_flat()
    states = [model.initial_state().detached()]
    state = states[0]
    if upto == 0:
        return states
    u_stack = np.vstack([np.zeros((1, frames_flat.shape[1])),
                         frames_flat[:upto - 1]])
    u_feats = model.input_features(u_stack)
    x_feats = (model.frame_features(frames_flat[:upto])
               if model.config.stochastic else None)
    from ..diffcore import tape as tp
    for t in range(upto):
        row = tp.slice_(u_feats, (slice(t, t + 1), slice(None)))
        state = model.advance_with_features(state, row)
        if model.config.stochastic:
            x_row = tp.slice_(x_feats, (slice(t, t + 1), slice(None)))
            post = model.posterior_params(state, x_row)
            state = ModelState(lstm=state.lstm, z=post.mu)
        states.append(state.detached())
    return states


def warm_state(model: SequenceModel, dataset: Dataset, upto: int) -> ModelState:
    return state_sequence(model, dataset, upto)[-1]


# ---------------------------------------------------------------------------
# Split log-likelihoods.
# ---------------------------------------------------------------------------


@dataclass
class ISResult:
    total: float
    per_point: float
    n_points: int
    samples: int
    seed: int
    split: str


def split_exact_log_likelihood(model: SequenceModel, dataset: Dataset,
                               split: str = "test",
                               state: ModelState | None = None) -> float:
    """Teacher-forced one-step log-likelihood for deterministic models."""
    if model.config.stochastic:
        raise ValueError("exact likelihood requires a deterministic transition")
    lo, hi = dataset.splits[split]
    frames_flat = dataset.frames_flat()
    if state is None:
        state = warm_state(model, dataset, lo)
    total = 0.0
    for t in range(lo, hi):
        state = model.advance(state, _u_frame(dataset, t, frames_flat))
        pts = dataset.points[t]
        if pts.shape[0]:
            ll = model.emission_log_prob(pts, model.emission_ctx(state))
            total += float(np.sum(ll.value))
    return total


def is_log_marginal(model: SequenceModel, dataset: Dataset, samples: int = 30,
                    seed: int = 0, split: str = "test") -> ISResult:
    """Importance-sampled marginal log-likelihood of a split.

    Draws `samples` latent trajectories from the amortized posterior and
    averages importance weights; deterministic models return the exact
    one-step log-likelihood regardless of `samples`.
    """
    if samples < 1:
        raise ValueError("samples must be at least 1")
    lo, hi = dataset.splits[split]
    n_points = dataset.point_count(split)
    if not model.config.stochastic:
        total = split_exact_log_likelihood(model, dataset, split)
        return ISResult(total=total, per_point=total / max(n_points, 1),
                        n_points=n_points, samples=samples, seed=seed, split=split)

    rng = generator(seed, f"is-{split}")
    frames_flat = dataset.frames_flat()
    state = warm_state(model, dataset, lo)
    S = samples
    Z = model.config.latent_width
    z = np.repeat(state.z.value, S, axis=0)
    log_w = np.zeros(S)
    for t in range(lo, hi):
        state = model.advance(state, _u_frame(dataset, t, frames_flat))
        h_rep = np.repeat(state.lstm.h.value, S, axis=0)
        prior = model.prior_net(Tensor(np.concatenate([z, h_rep], axis=1)))
        x_feat = model.frame_features(frames_flat[t]).value
        post = model.posterior_net(Tensor(
            np.concatenate([z, h_rep, np.repeat(x_feat, S, axis=0)], axis=1)))
        eps = rng.standard_normal((S, Z))
        z_new = post.mu.value + post.sigma.value * eps
        log_w += _gauss_logpdf(z_new, prior.mu.value, prior.sigma.value)
        log_w -= _gauss_logpdf(z_new, post.mu.value, post.sigma.value)
        pts = dataset.points[t]
        n = pts.shape[0]
        if n:
            ctx = np.concatenate([z_new, h_rep], axis=1)
            ctx_pts = np.repeat(ctx, n, axis=0)
            tiled = np.tile(pts, (S, 1))
            ll = model.emission_log_prob(tiled, Tensor(ctx_pts)).value.reshape(S, n)
            log_w += ll.sum(axis=1)
        z = z_new
    total = float(_logmeanexp(log_w))
    return ISResult(total=total, per_point=total / max(n_points, 1),
                    n_points=n_points, samples=samples, seed=seed, split=split)


def elbo_estimate(model: SequenceModel, dataset: Dataset, split: str = "test",
                  draws: int = 1, seed: int = 0) -> tuple[float, list[float]]:
    """Monte-Carlo estimate of the split ELBO (beta = 1) from fresh
    posterior samples; returns (mean, per-draw values)."""
    from .core import steps_for
    lo, hi = dataset.splits[split]
    steps = steps_for(dataset, range(lo, hi))
    state = warm_state(model, dataset, lo)
    rng = generator(seed, f"elbo-{split}")
    values = []
    for _ in range(max(draws, 1)):
        noises = (rng.standard_normal((len(steps), model.config.latent_width))
                  if model.config.stochastic else None)
        obj, _, _ = model.window_elbo(steps, state.detached(), 1.0, noises=noises,
                                      training=False, update_stats=False)
        values.append(float(obj.value))
    return float(np.mean(values)), values


# ---------------------------------------------------------------------------
# Predictive densities and rollout.
# ---------------------------------------------------------------------------


def prior_draw(model: SequenceModel, state: ModelState,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sample z from the conditional prior at an advanced state."""
    prior = model.prior_params(state)
    mu, sigma = prior.mu.value, prior.sigma.value
    z = mu + sigma * rng.standard_normal(mu.shape)
    return z, mu, sigma


def _per_sample_log_densities(model: SequenceModel, state: ModelState,
                              points: np.ndarray, samples: int,
                              rng: np.random.Generator | None) -> np.ndarray:
    """(samples, n_points) emission log-densities under fresh prior draws."""
    prior = model.prior_params(state)
    mu, sigma = prior.mu.value, prior.sigma.value
    h = state.lstm.h.value
    lls = np.empty((samples, points.shape[0]))
    for s in range(samples):
        z = mu + sigma * rng.standard_normal(mu.shape)
        ctx = Tensor(np.concatenate([z, h], axis=1))
        lls[s] = model.emission_log_prob(points, ctx).value
    return lls


def predictive_log_density(model: SequenceModel, state: ModelState,
                           points: np.ndarray, samples: int,
                           rng: np.random.Generator | None) -> np.ndarray:
    """Per-point one-step predictive log-density at an advanced state.

    Stochastic models marginalize the latent with `samples` fresh prior
    draws; deterministic models are exact.  Used for density grids, where
    each query point is marginal.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if not model.config.stochastic:
        return model.emission_log_prob(points, model.emission_ctx(state)).value
    lls = _per_sample_log_densities(model, state, points, samples, rng)
    return _logmeanexp(lls, axis=0)


def predictive_bin_log_likelihood(model: SequenceModel, state: ModelState,
                                  points: np.ndarray, samples: int,
                                  rng: np.random.Generator | None) -> float:
    """Joint predictive log-likelihood of a bin's point set.

    The latent is shared by all points of a step, so the set is scored
    jointly: log (1/S) sum_s prod_i p(x_i | z_s, h).  Deterministic models
    reduce to the plain sum."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if points.shape[0] == 0:
        return 0.0
    if not model.config.stochastic:
        ll = model.emission_log_prob(points, model.emission_ctx(state)).value
        return float(np.sum(ll))
    lls = _per_sample_log_densities(model, state, points, samples, rng)
    return float(_logmeanexp(lls.sum(axis=1), axis=0))


def grid_centers(m: int) -> np.ndarray:
    """Centers of an m x m grid over the unit square, x-major order."""
    c = (np.arange(m) + 0.5) / m
    xx, yy = np.meshgrid(c, c, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def expected_frame(model: SequenceModel, state: ModelState, k: int) -> np.ndarray:
    """Deterministic predictive histogram: emission density at cell
    centers, normalized to sum 1.  Used as rollout feedback for models
    without latent sampling."""
    centers = grid_centers(k)
    ll = model.emission_log_prob(centers, model.emission_ctx(state)).value
    ll = ll - ll.max()
    dens = np.exp(ll)
    return dens / dens.sum()


@dataclass
class RolloutStep:
    index: int
    frame: np.ndarray                 # (k, k) fed-back histogram
    points: np.ndarray                # kept sampled points
    outside_count: int
    z: np.ndarray | None = None
    prior_mu: np.ndarray | None = None
    prior_sigma: np.ndarray | None = None


@dataclass
class RolloutTrace:
    start_bin: int
    horizon: int
    points_per_step: int
    seed: int
    k: int
    steps: list[RolloutStep] = field(default_factory=list)

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        frames = np.stack([s.frame for s in self.steps])
        sizes = [s.points.shape[0] for s in self.steps]
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        flat = (np.concatenate([s.points for s in self.steps])
                if sum(sizes) else np.zeros((0, 2)))
        np.savez(directory / "rollout.npz", frames=frames, points=flat,
                 offsets=offsets)
        manifest = {
            "start_bin": self.start_bin,
            "horizon": self.horizon,
            "points_per_step": self.points_per_step,
            "seed": self.seed,
            "k": self.k,
            "outside_counts": [s.outside_count for s in self.steps],
        }
        (directory / "rollout.json").write_text(json.dumps(manifest, indent=2,
                                                           sort_keys=True))


def default_points_per_step(dataset: Dataset) -> int:
    counts = [p.shape[0] for p in dataset.split_points("train") if p.shape[0] > 0]
    return max(int(round(np.mean(counts))), 1) if counts else 1


def rollout(model: SequenceModel, dataset: Dataset, horizon: int,
            points_per_step: int = 0, seed: int = 0,
            start_bin: int | None = None) -> RolloutTrace:
    """Autoregressive generation: each step samples the latent from its
    prior, samples emission points, and feeds their histogram back as the
    next input frame."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    lo = dataset.splits["test"][0] if start_bin is None else int(start_bin)
    pps = points_per_step or default_points_per_step(dataset)
    frames_flat = dataset.frames_flat()
    state = warm_state(model, dataset, lo)
    rng = generator(seed, "rollout")
    trace = RolloutTrace(start_bin=lo, horizon=horizon, points_per_step=pps,
                         seed=seed, k=dataset.k)
    u = _u_frame(dataset, lo, frames_flat)
    for j in range(horizon):
        state = model.advance(state, u)
        step = RolloutStep(index=lo + j, frame=None, points=None, outside_count=0)
        if model.config.stochastic:
            z, mu, sigma = prior_draw(model, state, rng)
            state = ModelState(lstm=state.lstm, z=Tensor(z))
            step.z, step.prior_mu, step.prior_sigma = z.ravel(), mu.ravel(), sigma.ravel()
        pts = model.emission_sample(model.emission_ctx(state), pps, rng)
        inside = np.all((pts >= 0.0) & (pts <= 1.0), axis=1)
        kept = pts[inside]
        step.outside_count = int(pts.shape[0] - kept.shape[0])
        step.points = kept
        frame = histogram_frame(kept, dataset.k)
        step.frame = frame
        trace.steps.append(step)
        u = frame.ravel()
    return trace


def _sample_rows(model: SequenceModel, ctx_rows: np.ndarray, n: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Draw n emission points per context row; returns (rows, n, 2)."""
    S = ctx_rows.shape[0]
    if model.flow is not None:
        ctx_rep = np.repeat(ctx_rows, n, axis=0)
        noise = rng.standard_normal((S * n, 2))
        pts = model.flow.sample(Tensor(ctx_rep), noise).value
        return pts.reshape(S, n, 2)
    out = np.empty((S, n, 2))
    from .mdn import mdn_sample
    for s in range(S):
        params = model.mdn.params(Tensor(ctx_rows[s:s + 1]))
        out[s] = mdn_sample(params, n, rng)
    return out


def _unroll_scores(model: SequenceModel, dataset: Dataset, start: int,
                   n_steps: int, score_at: dict[int, np.ndarray], samples: int,
                   points_per_step: int, rng: np.random.Generator,
                   states: list[ModelState]) -> dict[int, float]:
    """Unroll an ensemble from the teacher-forced state before bin `start`,
    scoring requested bins under the per-step predictive density.

    Stochastic models propagate `samples` particles, each with fresh prior
    latent draws and its own fed-back sampled histogram; a scored bin's
    point set is evaluated jointly per particle and averaged in density.
    Deterministic models unroll a single trajectory fed back with the
    expected (density-derived) frame, so their rollout is noise-free.
    """
    frames_flat = dataset.frames_flat()
    state0 = states[start]
    S = samples if model.config.stochastic else 1
    k = dataset.k
    h = np.repeat(state0.lstm.h.value, S, axis=0)
    c = np.repeat(state0.lstm.c.value, S, axis=0)
    z = (np.repeat(state0.z.value, S, axis=0)
         if model.config.stochastic else None)
    u = np.repeat(_u_frame(dataset, start, frames_flat)[None, :], S, axis=0)
    out: dict[int, float] = {}
    for j in range(n_steps):
        t_abs = start + j
        feats = model.input_features(u)
        lstm = model.lstm.step(feats, LstmState(h=Tensor(h), c=Tensor(c)))
        h, c = lstm.h.value, lstm.c.value
        if model.config.stochastic:
            prior = model.prior_net(Tensor(z), Tensor(h))
            z = prior.mu.value + prior.sigma.value * rng.standard_normal(z.shape)
            ctx = np.concatenate([z, h], axis=1)
        else:
            ctx = h
        if t_abs in score_at:
            pts = score_at[t_abs]
            n = pts.shape[0]
            if n:
                ctx_pts = np.repeat(ctx, n, axis=0)
                ll = model.emission_log_prob(np.tile(pts, (S, 1)),
                                             Tensor(ctx_pts)).value.reshape(S, n)
                out[t_abs] = float(_logmeanexp(ll.sum(axis=1), axis=0))
            else:
                out[t_abs] = 0.0
        if j == n_steps - 1:
            break
        if model.config.stochastic:
            sampled = _sample_rows(model, ctx, points_per_step, rng)
            u = np.empty((S, k * k))
            for s in range(S):
                pts_s = sampled[s]
                inside = np.all((pts_s >= 0.0) & (pts_s <= 1.0), axis=1)
                u[s] = histogram_frame(pts_s[inside], k).ravel()
        else:
            state = ModelState(lstm=LstmState(h=Tensor(h), c=Tensor(c)), z=None)
            u = expected_frame(model, state, k)[None, :]
    return out


def rollout_scores(model: SequenceModel, dataset: Dataset, horizon,
                   samples: int, points_per_step: int,
                   rng: np.random.Generator, states: list[ModelState],
                   split: str = "test") -> tuple[float, float, dict[int, float]]:
    """Test-point log-likelihood under `horizon`-step-ahead rollouts.

    For an integer horizon n, every split bin is scored after unrolling n
    steps from the teacher-forced state n bins earlier.  "full" unrolls
    once across the whole split from its start.
    """
    lo, hi = dataset.splits[split]
    per_bin: dict[int, float] = {}
    if horizon == "full":
        score_at = {t: dataset.points[t] for t in range(lo, hi)}
        per_bin = _unroll_scores(model, dataset, lo, hi - lo, score_at, samples,
                                 points_per_step, rng, states)
    else:
        n = int(horizon)
        if n < 1:
            raise ValueError("horizon must be at least 1")
        for t_abs in range(lo, hi):
            start = t_abs - n + 1
            if start < 0:
                continue
            scores = _unroll_scores(model, dataset, start, n,
                                    {t_abs: dataset.points[t_abs]}, samples,
                                    points_per_step, rng, states)
            per_bin.update(scores)
    total = float(sum(per_bin.values()))
    n_points = int(sum(dataset.points[t].shape[0] for t in per_bin))
    return total, total / max(n_points, 1), per_bin
