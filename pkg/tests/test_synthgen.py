"""Synthetic oracle processes: generation, exact densities, and the
dataset-directory contract shared with the GPS pipeline."""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from recflow import geodata, synthgen
from recflow.synthgen import (
    Component,
    OracleProcess,
    RegimeMixture,
    generate,
    single_gaussian_process,
    two_regime_crescent,
)


def test_single_gaussian_sample_mean_clt():
    process = single_gaussian_process(sigma=0.05, points_mean=50.0,
                                      center=(0.5, 0.5))
    mix = process.regimes[0]
    pts = mix.sample(10_000, np.random.default_rng(0))
    bound = 4.0 * 0.05 / 100.0
    assert np.all(np.abs(pts.mean(axis=0) - 0.5) < bound)


def test_two_regime_samples_separate_by_regime():
    process = two_regime_crescent(points_mean=80.0, persistence=0.8)
    result = generate(process, 60, seed=3)
    lows, highs = [], []
    for pts, regime in zip(result.bins, result.regime_path):
        if pts.shape[0] < 5:
            continue
        (lows if regime == 0 else highs).append(pts.mean(axis=0))
    lows, highs = np.array(lows), np.array(highs)
    assert lows.shape[0] > 3 and highs.shape[0] > 3
    assert np.all(lows.mean(axis=0) < 0.5)
    assert np.all(highs.mean(axis=0) > 0.5)
    gap = np.linalg.norm(highs.mean(axis=0) - lows.mean(axis=0))
    assert gap > 0.3


def test_generation_is_seed_deterministic():
    process = two_regime_crescent()
    a = generate(process, 20, seed=9)
    b = generate(process, 20, seed=9)
    np.testing.assert_array_equal(a.regime_path, b.regime_path)
    for pa, pb in zip(a.bins, b.bins):
        np.testing.assert_array_equal(pa, pb)


def test_all_generated_points_inside_unit_square():
    process = two_regime_crescent(points_mean=100.0)
    result = generate(process, 40, seed=1)
    for pts in result.bins:
        if pts.shape[0]:
            assert np.all((pts >= 0.0) & (pts <= 1.0))


def test_oracle_matches_closed_form_gaussian():
    sigma = 0.07
    process = single_gaussian_process(sigma=sigma, center=(0.4, 0.6))
    result = generate(process, 3, seed=2)
    pts = np.array([[0.4, 0.6], [0.5, 0.5], [0.3, 0.7]])
    expected = multivariate_normal(mean=[0.4, 0.6],
                                   cov=sigma ** 2 * np.eye(2)).logpdf(pts)
    got = result.oracle.log_density(1, pts)
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_oracle_integrates_to_one_on_fine_grid():
    process = two_regime_crescent()
    result = generate(process, 2, seed=4)
    m = 400
    cell = 1.0 / m
    centers = (np.arange(m) + 0.5) * cell
    xx, yy = np.meshgrid(centers, centers, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    mass = np.sum(np.exp(result.oracle.log_density(0, pts))) * cell * cell
    assert mass == pytest.approx(1.0, abs=1e-3)


def test_oracle_mode_exceeds_tail_density():
    process = single_gaussian_process(sigma=0.05, center=(0.5, 0.5))
    result = generate(process, 1, seed=5)
    at_mode = result.oracle.log_density(0, np.array([[0.5, 0.5]]))[0]
    away = result.oracle.log_density(0, np.array([[0.5 + 0.15, 0.5]]))[0]
    assert at_mode > away


def test_oracle_bin_index_bounds():
    result = generate(single_gaussian_process(), 4, seed=6)
    with pytest.raises(IndexError):
        result.oracle.log_density(4, np.array([[0.5, 0.5]]))


def test_generated_points_beat_uniform_under_oracle():
    process = two_regime_crescent(points_mean=100.0)
    result = generate(process, 20, seed=7)
    rng = np.random.default_rng(8)
    gen_scores, uni_scores = [], []
    for t, pts in enumerate(result.bins):
        if pts.shape[0] == 0:
            continue
        gen_scores.append(result.oracle.log_density(t, pts).mean())
        uni_scores.append(result.oracle.log_density(
            t, rng.random((pts.shape[0], 2))).mean())
    assert np.mean(gen_scores) > np.mean(uni_scores) + 1.0


def test_leaky_component_rejected_at_construction():
    mix = RegimeMixture(weights=(1.0,),
                        components=(Component(mean=(0.05, 0.5),
                                              cov=((0.05 ** 2, 0.0),
                                                   (0.0, 0.05 ** 2))),))
    with pytest.raises(ValueError, match="outside the unit square"):
        OracleProcess(regimes=(mix,), transition=((1.0,),), start=(1.0,),
                      points_mean=10.0)


def test_invalid_transition_matrix_rejected():
    mix = single_gaussian_process().regimes[0]
    with pytest.raises(ValueError, match="row-stochastic"):
        OracleProcess(regimes=(mix, mix), transition=((0.5, 0.4), (0.5, 0.5)),
                      start=(0.5, 0.5), points_mean=10.0)


def test_dataset_emission_matches_geodata_format(tmp_path):
    process = two_regime_crescent(points_mean=30.0)
    result = generate(process, 16, seed=10)
    synthgen.write_dataset(result, tmp_path, k=8)
    ds = geodata.load_dataset(tmp_path)
    assert ds.k == 8 and len(ds) == 16
    assert ds.manifest["source"] == "synthgen"
    for t, pts in enumerate(result.bins):
        np.testing.assert_array_equal(ds.points[t], pts)
        if pts.shape[0]:
            assert abs(ds.frames[t].sum() - 1.0) < 1e-9

    oracle = synthgen.load_oracle(tmp_path)
    np.testing.assert_array_equal(oracle.regime_path, result.regime_path)
    pts = np.array([[0.3, 0.3], [0.7, 0.7]])
    np.testing.assert_allclose(oracle.log_density(5, pts),
                               result.oracle.log_density(5, pts), atol=1e-12)
