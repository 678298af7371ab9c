"""Shared fixtures: finite-difference oracles, desk-scale model configs,
and session-scoped synthetic datasets/trained models reused across tests."""

from __future__ import annotations

import numpy as np
import pytest

from recflow import geodata, synthgen
from recflow.diffcore import Parameter
from recflow.models import ModelConfig, TrainOptions, train


# ---------------------------------------------------------------------------
# Finite-difference gradient oracle.
# ---------------------------------------------------------------------------


def fd_grads(f, params: dict[str, Parameter], step: float = 1e-5
             ) -> dict[str, np.ndarray]:
    """Central-difference gradients of scalar f() w.r.t. every parameter."""
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p.value)
        flat = p.value.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_hi = f()
            flat[i] = orig - step
            f_lo = f()
            flat[i] = orig
            gflat[i] = (f_hi - f_lo) / (2.0 * step)
        out[name] = g
    return out


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def assert_grads_close(analytic: dict, numeric: dict, rtol: float = 1e-4,
                       floor: float = 1e-6):
    for name in numeric:
        err = max_rel_err(analytic[name], numeric[name], floor=floor)
        assert err <= rtol, f"gradient mismatch for {name}: rel err {err:.2e}"


# ---------------------------------------------------------------------------
# Desk-scale configurations.
# ---------------------------------------------------------------------------


def desk_config(transition: str = "stochastic", emission: str = "flow",
                seed: int = 0, **overrides) -> ModelConfig:
    """Small architecture that trains in seconds on synthetic data."""
    base = dict(
        transition=transition, emission=emission, mixture_count=10,
        latent_width=6, lstm_width=32,
        extractor_widths=(32, 32), extractor_activation="relu",
        prior_hidden=(32,), posterior_hidden=(32,),
        base_hidden=(32,), coupling_hidden=(32,),
        mdn_hidden=(32, 32), flow_depth=4, kl_anneal_epochs=30, seed=seed)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_config(transition: str = "stochastic", emission: str = "flow",
                seed: int = 0, **overrides) -> ModelConfig:
    """Minimal architecture for exhaustive finite-difference checks."""
    base = dict(
        transition=transition, emission=emission, mixture_count=3,
        latent_width=2, lstm_width=3,
        extractor_widths=(4,), extractor_activation="softplus",
        hidden_activation="tanh",
        prior_hidden=(4,), posterior_hidden=(4,),
        base_hidden=(4,), coupling_hidden=(4,),
        mdn_hidden=(4,), flow_depth=2, kl_anneal_epochs=10, seed=seed)
    base.update(overrides)
    return ModelConfig(**base)


def desk_train_options(seed: int = 0, **overrides) -> TrainOptions:
    base = dict(lr=0.003, max_epochs=150, window=8, seed=seed)
    base.update(overrides)
    return TrainOptions(**base)


# ---------------------------------------------------------------------------
# Session-scoped synthetic datasets and trained models.
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def single_gauss_dataset(tmp_path_factory):
    directory = tmp_path_factory.mktemp("single-gauss")
    process = synthgen.single_gaussian_process(sigma=0.08, points_mean=40)
    result = synthgen.generate(process, 64, seed=7)
    synthgen.write_dataset(result, directory, k=8)
    return geodata.load_dataset(directory), synthgen.load_oracle(directory)


@pytest.fixture(scope="session")
def crescent_dataset(tmp_path_factory):
    directory = tmp_path_factory.mktemp("crescent")
    process = synthgen.two_regime_crescent(points_mean=40, persistence=0.85)
    result = synthgen.generate(process, 128, seed=11)
    synthgen.write_dataset(result, directory, k=8)
    return geodata.load_dataset(directory), synthgen.load_oracle(directory)


@pytest.fixture(scope="session")
def trained_rfn(single_gauss_dataset):
    """One RFN trained on the static single-Gaussian oracle."""
    dataset, _ = single_gauss_dataset
    result = train(dataset, desk_config(seed=5), desk_train_options(seed=15))
    assert not result.diverged
    return result


@pytest.fixture(scope="session")
def trained_crescent_rfn(crescent_dataset):
    """One RFN trained on the two-regime crescent benchmark."""
    dataset, _ = crescent_dataset
    result = train(dataset, desk_config(seed=17), desk_train_options(seed=27))
    assert not result.diverged
    return result
