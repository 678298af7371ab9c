"""Spatial evaluation products: dense log-density grids, post-hoc
quantization to categorical grids, and consolidated metrics reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .geodata import Dataset
from .models import SequenceModel
from .models.infer import (
    _u_frame,
    grid_centers,
    is_log_marginal,
    predictive_log_density,
    rollout_scores,
    state_sequence,
)
from .rng import generator


@dataclass
class GridEvaluation:
    """Per-cell values on an m x m grid over the unit square.

    `values[i, j]` belongs to the cell with x index i and y index j;
    continuous grids hold log-densities, quantized grids log-probabilities.
    """

    m: int
    values: np.ndarray
    kind: str                      # "log_density" | "categorical"
    conditioning: dict = field(default_factory=dict)
    bbox: dict | None = None

    @property
    def probabilities(self) -> np.ndarray:
        if self.kind != "categorical":
            raise ValueError("probabilities defined for categorical grids only")
        return np.exp(self.values)

    def lonlat_centers(self) -> np.ndarray:
        centers = grid_centers(self.m)
        if self.bbox is None:
            return centers
        from .geodata import BoundingBox
        return BoundingBox.from_dict(self.bbox).denormalize(centers)


def _predictive_grid(model: SequenceModel, dataset: Dataset, at_bin: int,
                     m: int, samples: int, rng) -> np.ndarray:
    """One-step predictive log-density at the m x m cell centers."""
    states = state_sequence(model, dataset, at_bin)
    state = model.advance(states[at_bin],
                          _u_frame(dataset, at_bin, dataset.frames_flat()))
    values = predictive_log_density(model, state, grid_centers(m), samples, rng)
    return values.reshape(m, m)


def grid_heatmap(model: SequenceModel, dataset: Dataset, m: int = 110,
                 samples: int = 30, seed: int = 0,
                 at_bin: int | None = None) -> GridEvaluation:
    """Dense one-step conditional log-density grid for heatmap rendering."""
    if m < 2:
        raise ValueError("grid side must be at least 2")
    t = dataset.splits["test"][0] if at_bin is None else int(at_bin)
    rng = generator(seed, "heatmap")
    values = _predictive_grid(model, dataset, t, m, samples, rng)
    return GridEvaluation(
        m=m, values=values, kind="log_density",
        conditioning={"predict_bin": t, "model_id": model.model_id,
                      "samples": samples, "seed": seed},
        bbox=dataset.bbox.to_dict())


def quantize(model: SequenceModel, dataset: Dataset, grid_side: int = 64,
             samples: int = 30, seed: int = 0,
             at_bin: int | None = None) -> GridEvaluation:
    """Discretize the continuous predictive density to a categorical grid:
    evaluate log-density at pixel centers, then softmax-normalize."""
    t = dataset.splits["test"][0] if at_bin is None else int(at_bin)
    rng = generator(seed, "quantize")
    logits = _predictive_grid(model, dataset, t, grid_side, samples, rng)
    log_probs = logits - _logsumexp_all(logits)
    return GridEvaluation(
        m=grid_side, values=log_probs, kind="categorical",
        conditioning={"predict_bin": t, "model_id": model.model_id,
                      "samples": samples, "seed": seed},
        bbox=dataset.bbox.to_dict())


def _logsumexp_all(values: np.ndarray) -> float:
    m = float(np.max(values))
    return m + float(np.log(np.sum(np.exp(values - m))))


def quantize_log_field(values: np.ndarray) -> np.ndarray:
    """Softmax normalization of an arbitrary log-density field."""
    values = np.asarray(values, dtype=np.float64)
    return values - _logsumexp_all(values)


class CategoricalScore(NamedTuple):
    value: float
    degenerate: bool


def counts_grid(points: np.ndarray, grid_side: int) -> np.ndarray:
    """Integer cell counts with the dataset grid convention."""
    counts = np.zeros((grid_side, grid_side), dtype=np.int64)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0]:
        ix = np.clip(np.floor(pts[:, 0] * grid_side).astype(int), 0, grid_side - 1)
        iy = np.clip(np.floor(pts[:, 1] * grid_side).astype(int), 0, grid_side - 1)
        np.add.at(counts, (ix, iy), 1)
    return counts


def categorical_log_likelihood(grid: GridEvaluation,
                               counts: np.ndarray) -> CategoricalScore:
    """Sum of count-weighted log-probabilities; cells with observations but
    zero probability make the score degenerate (-inf)."""
    counts = np.asarray(counts)
    if grid.kind != "categorical":
        raise ValueError("scoring requires a categorical grid")
    if counts.shape != grid.values.shape:
        raise ValueError(
            f"counts shape {counts.shape} != grid shape {grid.values.shape}")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    occupied = counts > 0
    if not np.any(occupied):
        return CategoricalScore(0.0, False)
    log_p = grid.values[occupied]
    if np.any(np.isneginf(log_p)):
        return CategoricalScore(float("-inf"), True)
    return CategoricalScore(float(np.sum(counts[occupied] * log_p)), False)


# ---------------------------------------------------------------------------
# Grid export.
# ---------------------------------------------------------------------------


def save_grid(grid: GridEvaluation, prefix) -> dict[str, str]:
    """Write <prefix>.txt (delimited values), <prefix>.pgm (min-max scaled
    8-bit graymap, north-up), and <prefix>.json (sidecar manifest)."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    txt_path = prefix.with_suffix(".txt")
    np.savetxt(txt_path, grid.values, delimiter="\t", fmt="%.17g")

    vmin = float(np.min(grid.values))
    vmax = float(np.max(grid.values))
    span = vmax - vmin
    scaled = (np.zeros_like(grid.values) if span == 0.0
              else (grid.values - vmin) / span)
    gray = np.round(255.0 * scaled).astype(int)
    # image rows top-down = y descending; columns = x ascending
    image = gray.T[::-1, :]
    pgm_path = prefix.with_suffix(".pgm")
    lines = ["P2", f"{grid.m} {grid.m}", "255"]
    lines += [" ".join(str(v) for v in row) for row in image]
    pgm_path.write_text("\n".join(lines) + "\n")

    sidecar = {
        "kind": grid.kind,
        "m": grid.m,
        "bbox": grid.bbox,
        "conditioning": grid.conditioning,
        "value_min": vmin,
        "value_max": vmax,
        "txt_layout": "row i = x cell index, column j = y cell index",
        "pgm_layout": "row 0 = highest y; min-max scaled to 0..255",
    }
    json_path = prefix.with_suffix(".json")
    json_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return {"txt": str(txt_path), "pgm": str(pgm_path), "json": str(json_path)}


# ---------------------------------------------------------------------------
# Consolidated evaluation.
# ---------------------------------------------------------------------------


@dataclass
class EvalOptions:
    samples: int = 30
    repetitions: int = 5
    horizons: tuple = (2, 5, 10, "full")
    quant_grid: int = 64
    points_per_step: int = 0       # 0: mean training bin count
    seed: int = 0
    split: str = "test"


@dataclass
class MetricRecord:
    model_id: str
    split: str
    metric: str
    value: float
    stddev: float
    samples: int
    seed: int

    def to_json(self) -> str:
        return json.dumps({
            "model_id": self.model_id, "split": self.split, "metric": self.metric,
            "value": self.value, "stddev": self.stddev, "samples": self.samples,
            "seed": self.seed}, sort_keys=True)


@dataclass
class MetricsReport:
    model_id: str
    records: list[MetricRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def record(self, metric: str) -> MetricRecord:
        matches = [r for r in self.records if r.metric == metric]
        if not matches:
            raise KeyError(f"no metric {metric!r}")
        return matches[0]

    def value(self, metric: str) -> float:
        return self.record(metric).value

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps({"record": "meta", **self.meta}, sort_keys=True)]
        lines += [r.to_json() for r in self.records]
        path.write_text("\n".join(lines) + "\n")


def _summary(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return mean, std


def evaluate_suite(model: SequenceModel, dataset: Dataset,
                   options: EvalOptions = EvalOptions()) -> MetricsReport:
    """One-step IS likelihood, rollout scores per horizon, and quantized
    categorical scores on a split, with repetition standard deviations."""
    from .models.infer import default_points_per_step

    split = options.split
    lo, hi = dataset.splits[split]
    n_points = dataset.point_count(split)
    pps = options.points_per_step or default_points_per_step(dataset)
    states = state_sequence(model, dataset, hi)
    frames_flat = dataset.frames_flat()

    report = MetricsReport(model_id=model.model_id, meta={
        "model_id": model.model_id,
        "split": split,
        "n_points": n_points,
        "bins": hi - lo,
        "samples": options.samples,
        "repetitions": options.repetitions,
        "horizons": [str(h) for h in options.horizons],
        "points_per_step": pps,
        "seed": options.seed,
        "quant_grid": options.quant_grid,
        "log_area_degrees": dataset.bbox.log_area_degrees(),
    })

    R = max(options.repetitions, 1)
    rep_seeds = [int(generator(options.seed, f"eval-rep{r}").integers(2 ** 31))
                 for r in range(R)]

    one_step = [is_log_marginal(model, dataset, samples=options.samples,
                                seed=s, split=split).total for s in rep_seeds]
    mean, std = _summary(one_step)
    report.records.append(MetricRecord(model.model_id, split, "one_step_total",
                                       mean, std, options.samples, options.seed))
    mean_pp, std_pp = _summary([v / max(n_points, 1) for v in one_step])
    report.records.append(MetricRecord(model.model_id, split, "one_step_per_point",
                                       mean_pp, std_pp, options.samples,
                                       options.seed))

    for horizon in options.horizons:
        label = str(horizon)
        totals = []
        per_points = []
        for r, s in enumerate(rep_seeds):
            rng = generator(s, f"rollout-h{label}")
            total, per_point, _ = rollout_scores(model, dataset, horizon,
                                                 options.samples, pps, rng,
                                                 states, split=split)
            totals.append(total)
            per_points.append(per_point)
        mean, std = _summary(totals)
        report.records.append(MetricRecord(model.model_id, split,
                                           f"rollout_h{label}_total", mean, std,
                                           options.samples, options.seed))
        mean_pp, std_pp = _summary(per_points)
        report.records.append(MetricRecord(model.model_id, split,
                                           f"rollout_h{label}_per_point",
                                           mean_pp, std_pp, options.samples,
                                           options.seed))

    quant_totals = []
    for r, s in enumerate(rep_seeds):
        rng = generator(s, "quantized")
        total = 0.0
        for t in range(lo, hi):
            pts = dataset.points[t]
            if pts.shape[0] == 0:
                continue
            state = model.advance(states[t], _u_frame(dataset, t, frames_flat))
            values = predictive_log_density(model, state,
                                            grid_centers(options.quant_grid),
                                            options.samples, rng)
            grid = GridEvaluation(m=options.quant_grid,
                                  values=quantize_log_field(
                                      values.reshape(options.quant_grid,
                                                     options.quant_grid)),
                                  kind="categorical")
            score = categorical_log_likelihood(
                grid, counts_grid(pts, options.quant_grid))
            total += score.value
        quant_totals.append(total)
    mean, std = _summary(quant_totals)
    report.records.append(MetricRecord(model.model_id, split, "quantized_total",
                                       mean, std, options.samples, options.seed))
    mean_pp, std_pp = _summary([v / max(n_points, 1) for v in quant_totals])
    report.records.append(MetricRecord(model.model_id, split,
                                       "quantized_per_point", mean_pp, std_pp,
                                       options.samples, options.seed))
    return report
