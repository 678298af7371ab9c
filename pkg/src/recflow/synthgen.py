"""Synthetic spatio-temporal point processes with closed-form densities.

Each process is a finite-state Markov chain over latent regimes; every
regime owns a 2-D Gaussian mixture whose support lies inside the unit
square (component means at least four standard deviations from every
border).  Bin counts are Poisson.  The realized regime path makes the
exact per-bin density available as a test oracle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import multivariate_normal

from .geodata import (
    ORACLE_NAME,
    HistogramSequence,
    SplitConfig,
    TimeBin,
    UNIT_BOX,
    histogram_frame,
    save_dataset,
)

_MASS_TOL = 1e-6


@dataclass(frozen=True)
class Component:
    mean: tuple[float, float]
    cov: tuple[tuple[float, float], tuple[float, float]]

    def cov_matrix(self) -> np.ndarray:
        return np.asarray(self.cov, dtype=np.float64)

    def chol(self) -> np.ndarray:
        return np.linalg.cholesky(self.cov_matrix())

    def mass_in_unit_square(self) -> float:
        mvn = multivariate_normal(mean=np.asarray(self.mean), cov=self.cov_matrix())
        f = mvn.cdf
        return float(f([1.0, 1.0]) - f([0.0, 1.0]) - f([1.0, 0.0]) + f([0.0, 0.0]))


@dataclass(frozen=True)
class RegimeMixture:
    weights: tuple[float, ...]
    components: tuple[Component, ...]

    def validate(self):
        w = np.asarray(self.weights)
        if abs(float(w.sum()) - 1.0) > 1e-9 or np.any(w <= 0):
            raise ValueError("mixture weights must be positive and sum to 1")
        if len(self.weights) != len(self.components):
            raise ValueError("weights/components length mismatch")
        for comp in self.components:
            cov = comp.cov_matrix()
            if np.any(np.linalg.eigvalsh(cov) <= 0):
                raise ValueError("component covariance is not positive definite")
            if 1.0 - comp.mass_in_unit_square() > _MASS_TOL:
                raise ValueError(
                    f"component at {comp.mean} leaks more than {_MASS_TOL} "
                    "probability mass outside the unit square")

    def log_prob(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        parts = np.empty((points.shape[0], len(self.components)))
        for i, (w, comp) in enumerate(zip(self.weights, self.components)):
            mvn = multivariate_normal(mean=np.asarray(comp.mean), cov=comp.cov_matrix())
            parts[:, i] = math.log(w) + mvn.logpdf(points)
        m = parts.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(parts - m).sum(axis=1, keepdims=True))).ravel()

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n points; draws falling outside the unit square (mass below
        the construction tolerance) are rejected and redrawn."""
        out = np.empty((n, 2))
        filled = 0
        chols = [c.chol() for c in self.components]
        means = [np.asarray(c.mean) for c in self.components]
        while filled < n:
            want = n - filled
            which = rng.choice(len(self.components), size=want, p=self.weights)
            draws = np.empty((want, 2))
            for i in range(len(self.components)):
                mask = which == i
                m = int(mask.sum())
                if m:
                    eps = rng.standard_normal((m, 2))
                    draws[mask] = means[i] + eps @ chols[i].T
            ok = np.all((draws >= 0.0) & (draws <= 1.0), axis=1)
            good = draws[ok]
            out[filled:filled + good.shape[0]] = good
            filled += good.shape[0]
        return out

    def to_dict(self) -> dict:
        return {"weights": list(self.weights),
                "components": [{"mean": list(c.mean),
                                "cov": [list(r) for r in c.cov]}
                               for c in self.components]}

    @classmethod
    def from_dict(cls, d: dict) -> "RegimeMixture":
        comps = tuple(Component(mean=tuple(c["mean"]),
                                cov=tuple(tuple(r) for r in c["cov"]))
                      for c in d["components"])
        return cls(weights=tuple(d["weights"]), components=comps)


@dataclass(frozen=True)
class OracleProcess:
    regimes: tuple[RegimeMixture, ...]
    transition: tuple[tuple[float, ...], ...]   # row-stochastic regime chain
    start: tuple[float, ...]
    points_mean: float                          # Poisson mean per bin

    def __post_init__(self):
        P = np.asarray(self.transition)
        s = np.asarray(self.start)
        R = len(self.regimes)
        if P.shape != (R, R) or not np.allclose(P.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("transition matrix must be row-stochastic over regimes")
        if s.shape != (R,) or abs(float(s.sum()) - 1.0) > 1e-9:
            raise ValueError("start distribution must sum to 1")
        if self.points_mean <= 0:
            raise ValueError("points_mean must be positive")
        for regime in self.regimes:
            regime.validate()

    def to_dict(self) -> dict:
        return {"regimes": [r.to_dict() for r in self.regimes],
                "transition": [list(row) for row in self.transition],
                "start": list(self.start),
                "points_mean": self.points_mean}

    @classmethod
    def from_dict(cls, d: dict) -> "OracleProcess":
        return cls(regimes=tuple(RegimeMixture.from_dict(r) for r in d["regimes"]),
                   transition=tuple(tuple(row) for row in d["transition"]),
                   start=tuple(d["start"]), points_mean=float(d["points_mean"]))


@dataclass
class DensityOracle:
    """Exact per-bin log-density of a realized generation."""

    process: OracleProcess
    regime_path: np.ndarray

    def log_density(self, bin_index: int, points: np.ndarray) -> np.ndarray:
        if not (0 <= bin_index < len(self.regime_path)):
            raise IndexError(f"bin index {bin_index} out of range")
        regime = self.process.regimes[int(self.regime_path[bin_index])]
        return regime.log_prob(points)

    def mixture_at(self, bin_index: int) -> RegimeMixture:
        return self.process.regimes[int(self.regime_path[bin_index])]


@dataclass
class SynthResult:
    bins: list[np.ndarray]
    regime_path: np.ndarray
    oracle: DensityOracle = field(repr=False)


def generate(process: OracleProcess, n_bins: int, seed: int = 0) -> SynthResult:
    """Sample a regime path, then a Poisson number of mixture points per bin."""
    if n_bins < 1:
        raise ValueError("n_bins must be at least 1")
    rng = np.random.default_rng(seed)
    R = len(process.regimes)
    P = np.asarray(process.transition)
    path = np.empty(n_bins, dtype=np.int64)
    path[0] = rng.choice(R, p=np.asarray(process.start))
    for t in range(1, n_bins):
        path[t] = rng.choice(R, p=P[path[t - 1]])
    bins = []
    for t in range(n_bins):
        n = int(rng.poisson(process.points_mean))
        regime = process.regimes[path[t]]
        bins.append(regime.sample(n, rng) if n else np.zeros((0, 2)))
    return SynthResult(bins=bins, regime_path=path,
                       oracle=DensityOracle(process=process, regime_path=path))


def write_dataset(result: SynthResult, directory, k: int,
                  split: SplitConfig = SplitConfig(),
                  bin_width: float = 7200.0) -> None:
    """Emit the standard dataset directory plus the oracle sidecar."""
    bins = [TimeBin(bin_index=i, start_time=i * bin_width, points=pts)
            for i, pts in enumerate(result.bins)]
    frames = np.stack([histogram_frame(pts, k) for pts in result.bins])
    seq = HistogramSequence(k=k, frames=frames, bins=bins)
    save_dataset(directory, seq, split, UNIT_BOX, bin_width,
                 extra_manifest={"source": "synthgen"})
    oracle = {"process": result.oracle.process.to_dict(),
              "regime_path": result.regime_path.tolist()}
    (Path(directory) / ORACLE_NAME).write_text(json.dumps(oracle, indent=2))


def load_oracle(directory) -> DensityOracle:
    path = Path(directory) / ORACLE_NAME
    if not path.exists():
        raise FileNotFoundError(f"no oracle sidecar at {path}")
    d = json.loads(path.read_text())
    return DensityOracle(process=OracleProcess.from_dict(d["process"]),
                         regime_path=np.asarray(d["regime_path"], dtype=np.int64))


# ---------------------------------------------------------------------------
# Benchmark processes.
# ---------------------------------------------------------------------------


def _diag(sx: float, sy: float, rho: float = 0.0) -> tuple:
    cxy = rho * sx * sy
    return ((sx * sx, cxy), (cxy, sy * sy))


def single_gaussian_process(sigma: float = 0.08, points_mean: float = 60.0,
                            center: tuple[float, float] = (0.5, 0.5)) -> OracleProcess:
    """One static Gaussian regime: the simplest recoverable oracle."""
    mix = RegimeMixture(weights=(1.0,),
                        components=(Component(mean=center, cov=_diag(sigma, sigma)),))
    return OracleProcess(regimes=(mix,), transition=((1.0,),), start=(1.0,),
                         points_mean=points_mean)


def two_regime_crescent(points_mean: float = 60.0,
                        persistence: float = 0.85) -> OracleProcess:
    """Two persistent regimes with disjoint crescent-shaped supports.

    Each regime is a 3-component arc of strongly anisotropic Gaussians,
    one arc in the lower-left region, one in the upper-right.
    """
    lower = RegimeMixture(
        weights=(0.4, 0.35, 0.25),
        components=(
            Component(mean=(0.30, 0.42), cov=_diag(0.045, 0.018, 0.70)),
            Component(mean=(0.42, 0.30), cov=_diag(0.045, 0.018, -0.70)),
            Component(mean=(0.26, 0.26), cov=_diag(0.018, 0.045, 0.60)),
        ))
    upper = RegimeMixture(
        weights=(0.35, 0.4, 0.25),
        components=(
            Component(mean=(0.70, 0.58), cov=_diag(0.045, 0.018, 0.70)),
            Component(mean=(0.58, 0.70), cov=_diag(0.045, 0.018, -0.70)),
            Component(mean=(0.74, 0.74), cov=_diag(0.018, 0.045, 0.60)),
        ))
    p = persistence
    return OracleProcess(regimes=(lower, upper),
                         transition=((p, 1.0 - p), (1.0 - p, p)),
                         start=(0.5, 0.5), points_mean=points_mean)


PROCESSES = {
    "single_gaussian": single_gaussian_process,
    "two_regime_crescent": two_regime_crescent,
}


def make_process(kind: str, **kwargs) -> OracleProcess:
    try:
        factory = PROCESSES[kind]
    except KeyError:
        known = ", ".join(sorted(PROCESSES))
        raise ValueError(f"unknown process {kind!r}; known: {known}") from None
    return factory(**kwargs)
