"""GPS trip ingestion: parsing, filtering, time binning, normalized k x k
histogram sequences, temporal splits, and the on-disk dataset format.

Grid convention: cell (i, j) covers normalized x in [i/k, (i+1)/k) and
y in [j/k, (j+1)/k); coordinates at exactly 1.0 fall in the last cell.
Frames are indexed frames[t, i, j] with i along x (longitude).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np


class SchemaError(ValueError):
    """Input text does not match the declared column schema."""


class DataError(ValueError):
    """Data fails a pipeline precondition."""


@dataclass
class TripRecord:
    event_time: float          # UTC epoch seconds
    longitude: float
    latitude: float
    duration: float | None = None
    user_id: str | None = None


@dataclass(frozen=True)
class BoundingBox:
    lon_min: float
    lon_max: float
    lat_min: float
    lat_max: float

    def __post_init__(self):
        if not (self.lon_min < self.lon_max and self.lat_min < self.lat_max):
            raise ValueError("bounding box must have positive extent")

    def contains(self, lon: float, lat: float) -> bool:
        return (self.lon_min <= lon <= self.lon_max
                and self.lat_min <= lat <= self.lat_max)

    def normalize(self, lonlat: np.ndarray) -> np.ndarray:
        """Affine map from box coordinates to the unit square."""
        lonlat = np.asarray(lonlat, dtype=np.float64)
        out = np.empty_like(lonlat)
        out[..., 0] = (lonlat[..., 0] - self.lon_min) / (self.lon_max - self.lon_min)
        out[..., 1] = (lonlat[..., 1] - self.lat_min) / (self.lat_max - self.lat_min)
        return out

    def denormalize(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64)
        out = np.empty_like(xy)
        out[..., 0] = self.lon_min + xy[..., 0] * (self.lon_max - self.lon_min)
        out[..., 1] = self.lat_min + xy[..., 1] * (self.lat_max - self.lat_min)
        return out

    def log_area_degrees(self) -> float:
        """Log Jacobian constant for converting unit-square densities to
        per-degree densities; reported in metadata, never added silently."""
        return math.log((self.lon_max - self.lon_min) * (self.lat_max - self.lat_min))

    def to_dict(self) -> dict:
        return {"lon_min": self.lon_min, "lon_max": self.lon_max,
                "lat_min": self.lat_min, "lat_max": self.lat_max}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundingBox":
        return cls(d["lon_min"], d["lon_max"], d["lat_min"], d["lat_max"])


UNIT_BOX = BoundingBox(0.0, 1.0, 0.0, 1.0)


@dataclass
class TimeBin:
    bin_index: int
    start_time: float
    points: np.ndarray  # (n, 2) normalized coordinates in [0, 1]^2


@dataclass
class HistogramSequence:
    k: int
    frames: np.ndarray        # (T, k, k), each non-empty frame sums to 1
    bins: list[TimeBin]

    @property
    def empty(self) -> np.ndarray:
        return np.array([b.points.shape[0] == 0 for b in self.bins])

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class ColumnSchema:
    time: str = "time"
    longitude: str = "longitude"
    latitude: str = "latitude"
    duration: str | None = None
    user: str | None = None


@dataclass
class ParseReport:
    parsed: int = 0
    malformed: int = 0


def _parse_time(text: str) -> float:
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    iso = text.replace("Z", "+00:00").replace("z", "+00:00")
    dt = datetime.fromisoformat(iso)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def parse_trips(source, schema: ColumnSchema = ColumnSchema(),
                delimiter: str = ",") -> tuple[list[TripRecord], ParseReport]:
    """Read delimited text with a header row into trip records.

    Malformed rows are skipped and counted; a missing mandatory column is
    an error naming that column.
    """
    if isinstance(source, (str, Path)):
        stream = open(source, "r", newline="")
        close = True
    else:
        stream = source
        close = False
    try:
        reader = csv.DictReader(stream, delimiter=delimiter)
        header = reader.fieldnames or []
        for col in (schema.time, schema.longitude, schema.latitude):
            if col not in header:
                raise SchemaError(f"missing mandatory column {col!r}")
        for col in (schema.duration, schema.user):
            if col is not None and col not in header:
                raise SchemaError(f"missing configured column {col!r}")
        records: list[TripRecord] = []
        report = ParseReport()
        for row in reader:
            try:
                t = _parse_time(row[schema.time])
                lon = float(row[schema.longitude])
                lat = float(row[schema.latitude])
                if not (-180.0 <= lon <= 180.0 and -90.0 <= lat <= 90.0):
                    raise ValueError("coordinates out of range")
                duration = None
                if schema.duration is not None:
                    duration = float(row[schema.duration])
                    if duration < 0:
                        raise ValueError("negative duration")
                user = row[schema.user].strip() if schema.user is not None else None
            except (ValueError, TypeError, KeyError):
                report.malformed += 1
                continue
            records.append(TripRecord(event_time=t, longitude=lon, latitude=lat,
                                      duration=duration, user_id=user))
            report.parsed += 1
        return records, report
    finally:
        if close:
            stream.close()


@dataclass
class FilterReport:
    kept: int = 0
    outside_box: int = 0
    duration: int = 0
    deduplicated: int = 0

    @property
    def removed(self) -> int:
        return self.outside_box + self.duration + self.deduplicated


def filter_records(records: list[TripRecord], box: BoundingBox,
                   min_duration: float | None = None,
                   max_duration: float | None = None,
                   dedup_window: float | None = None
                   ) -> tuple[list[TripRecord], FilterReport]:
    """Keep records inside the box, within the duration band, and at most
    one record per user per dedup window (relative to the last kept one)."""
    want_duration = min_duration is not None or max_duration is not None
    report = FilterReport()
    kept: list[TripRecord] = []
    last_kept: dict[str, float] = {}
    ordered = sorted(records, key=lambda r: r.event_time) if dedup_window else records
    for r in ordered:
        if not box.contains(r.longitude, r.latitude):
            report.outside_box += 1
            continue
        if want_duration:
            if r.duration is None:
                raise DataError("duration filtering requested but duration missing")
            if min_duration is not None and r.duration < min_duration:
                report.duration += 1
                continue
            if max_duration is not None and r.duration > max_duration:
                report.duration += 1
                continue
        if dedup_window is not None:
            if r.user_id is None:
                raise DataError("dedup requested but user_id missing")
            last = last_kept.get(r.user_id)
            if last is not None and r.event_time - last < dedup_window:
                report.deduplicated += 1
                continue
            last_kept[r.user_id] = r.event_time
        kept.append(r)
        report.kept += 1
    return kept, report


def histogram_frame(points: np.ndarray, k: int) -> np.ndarray:
    """Normalized k x k histogram of unit-square points; all-zero if empty."""
    frame = np.zeros((k, k))
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        return frame
    ix = np.clip(np.floor(pts[:, 0] * k).astype(int), 0, k - 1)
    iy = np.clip(np.floor(pts[:, 1] * k).astype(int), 0, k - 1)
    np.add.at(frame, (ix, iy), 1.0)
    return frame / pts.shape[0]


def bin_and_normalize(records: list[TripRecord], box: BoundingBox,
                      bin_width: float, k: int,
                      t0: float | None = None) -> HistogramSequence:
    """Map coordinates into the unit square, bin by fixed-width intervals,
    and build normalized histograms plus per-bin point sets."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    if not records:
        raise DataError("no records to bin")
    for r in records:
        if not box.contains(r.longitude, r.latitude):
            raise DataError("record outside bounding box; filter before binning")
    times = np.array([r.event_time for r in records])
    origin = float(times.min()) if t0 is None else float(t0)
    idx = np.floor((times - origin) / bin_width).astype(int)
    if idx.min() < 0:
        raise DataError("record earlier than the configured time origin")
    n_bins = int(idx.max()) + 1
    lonlat = np.array([[r.longitude, r.latitude] for r in records])
    unit = box.normalize(lonlat)
    bins: list[TimeBin] = []
    frames = np.zeros((n_bins, k, k))
    for b in range(n_bins):
        pts = unit[idx == b]
        bins.append(TimeBin(bin_index=b, start_time=origin + b * bin_width,
                            points=pts.copy()))
        frames[b] = histogram_frame(pts, k)
    return HistogramSequence(k=k, frames=frames, bins=bins)


@dataclass(frozen=True)
class SplitConfig:
    train_fraction: float = 0.5
    val_fraction: float = 0.25
    test_fraction: float = 0.25

    def __post_init__(self):
        fr = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(f <= 0 for f in fr):
            raise ValueError("split fractions must be positive")
        if abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")


def split_sizes(total: int, config: SplitConfig) -> tuple[int, int, int]:
    """Floor-rounded train/val sizes; the remainder goes to the test split."""
    n_train = int(math.floor(total * config.train_fraction))
    n_val = int(math.floor(total * config.val_fraction))
    n_test = total - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise DataError(f"sequence of {total} bins leaves an empty split")
    return n_train, n_val, n_test


def split_temporal(sequence: HistogramSequence, config: SplitConfig
                   ) -> tuple[HistogramSequence, HistogramSequence, HistogramSequence]:
    """Contiguous train/val/test partition, earliest bins in train."""
    n_train, n_val, n_test = split_sizes(len(sequence), config)
    out = []
    for lo, hi in ((0, n_train), (n_train, n_train + n_val),
                   (n_train + n_val, len(sequence))):
        out.append(HistogramSequence(k=sequence.k,
                                     frames=sequence.frames[lo:hi].copy(),
                                     bins=sequence.bins[lo:hi]))
    return tuple(out)


# ---------------------------------------------------------------------------
# Dataset directory format shared by real and synthetic pipelines.
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"
ARRAYS_NAME = "arrays.npz"
ORACLE_NAME = "oracle.json"


@dataclass
class Dataset:
    k: int
    frames: np.ndarray                 # (T, k, k)
    points: list[np.ndarray]           # per-bin (n, 2) unit-square points
    start_times: np.ndarray            # (T,)
    bbox: BoundingBox
    bin_width: float
    splits: dict[str, tuple[int, int]]  # name -> [lo, hi)
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def empty(self) -> np.ndarray:
        return np.array([p.shape[0] == 0 for p in self.points])

    def split_range(self, name: str) -> range:
        lo, hi = self.splits[name]
        return range(lo, hi)

    def split_points(self, name: str) -> list[np.ndarray]:
        return [self.points[i] for i in self.split_range(name)]

    def point_count(self, name: str) -> int:
        return int(sum(p.shape[0] for p in self.split_points(name)))

    def frames_flat(self) -> np.ndarray:
        T = self.frames.shape[0]
        return self.frames.reshape(T, -1)


def save_dataset(directory, sequence: HistogramSequence, config: SplitConfig,
                 bbox: BoundingBox, bin_width: float,
                 counts: dict | None = None, extra_manifest: dict | None = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n_train, n_val, n_test = split_sizes(len(sequence), config)
    T = len(sequence)
    splits = {"train": (0, n_train), "val": (n_train, n_train + n_val),
              "test": (n_train + n_val, T)}
    sizes = [b.points.shape[0] for b in sequence.bins]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
    flat = (np.concatenate([b.points.reshape(-1, 2) for b in sequence.bins])
            if sum(sizes) else np.zeros((0, 2)))
    start_times = np.array([b.start_time for b in sequence.bins])
    np.savez(directory / ARRAYS_NAME, frames=sequence.frames,
             points=flat, offsets=offsets, start_times=start_times)
    manifest = {
        "format": "recflow-dataset",
        "version": 1,
        "k": sequence.k,
        "bins": T,
        "bin_width_seconds": bin_width,
        "bbox": bbox.to_dict(),
        "points_total": int(sum(sizes)),
        "splits": {name: list(span) for name, span in splits.items()},
        "grid_convention": "cell (i,j) covers x in [i/k,(i+1)/k), y in [j/k,(j+1)/k); 1.0 maps to the last cell",
        "coordinates": "normalized unit square",
        "log_area_degrees": bbox.log_area_degrees(),
        "counts": counts or {},
    }
    manifest.update(extra_manifest or {})
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    with np.load(directory / ARRAYS_NAME) as archive:
        frames = archive["frames"]
        flat = archive["points"]
        offsets = archive["offsets"]
        start_times = archive["start_times"]
    points = [flat[offsets[i]:offsets[i + 1]] for i in range(len(offsets) - 1)]
    splits = {name: tuple(span) for name, span in manifest["splits"].items()}
    return Dataset(k=int(manifest["k"]), frames=frames, points=points,
                   start_times=start_times,
                   bbox=BoundingBox.from_dict(manifest["bbox"]),
                   bin_width=float(manifest["bin_width_seconds"]),
                   splits=splits, manifest=manifest)
