"""ETH/UCY annotations to normalized (history, future) windows.

obsmat rows: frame, ped_id, pos_x, pos_z, pos_y, v_x, v_z, v_y (whitespace).
tsv rows: frame, ped_id, x, y (tabs); lines starting with '#' are comments.
"""

import logging
from collections import Counter
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from trajdrop.diffcore import Array
from trajdrop.errors import DataError, ParameterError, ParseError
from trajdrop.objects import FEATURE_COUNT, NormalizationStats

AnnotationFormat = Literal["obsmat", "tsv"]
CACHE_FORMAT_TAG = "trajdrop-cache/1"
DEFAULT_DT = 0.4


class RawTrack(BaseModel):
    """Regularly sampled (frame, x, y) positions of one pedestrian."""

    pedestrian_id: int
    samples: List[Tuple[int, float, float]] = Field(..., min_length=1)

    @field_validator("samples")
    @classmethod
    def _regular_frames(cls, samples: List[Tuple[int, float, float]]):
        frames = [s[0] for s in samples]
        gaps = {b - a for a, b in zip(frames, frames[1:])}
        if any(g <= 0 for g in gaps):
            raise ValueError(f"frames must be strictly increasing, got {frames}")
        if len(gaps) > 1:
            raise ValueError(f"frames must be regularly spaced, got gaps {sorted(gaps)}")
        return samples

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def positions(self) -> Array:
        return np.array([(x, y) for _, x, y in self.samples], dtype=np.float64)


class TrajectorySample(BaseModel):
    """One (history, future) window with per-step features (x, y, u, v)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    history: np.ndarray
    future: np.ndarray
    source_id: int
    window_index: int = Field(..., ge=0)


class SampleSet:
    """Stacked windows: histories [n, T, 4], futures [n, F, 4]."""

    def __init__(
        self,
        histories: Array,
        futures: Array,
        source_ids: Array,
        window_indices: Array,
    ):
        if not (len(histories) == len(futures) == len(source_ids) == len(window_indices)):
            raise DataError("sample arrays have different lengths")
        self.histories = np.asarray(histories, dtype=np.float64)
        self.futures = np.asarray(futures, dtype=np.float64)
        self.source_ids = np.asarray(source_ids, dtype=np.int64)
        self.window_indices = np.asarray(window_indices, dtype=np.int64)

    @classmethod
    def from_samples(
        cls, samples: Sequence[TrajectorySample], history_len: int, horizon: int
    ) -> "SampleSet":
        if not samples:
            return cls(
                np.zeros((0, history_len, FEATURE_COUNT)),
                np.zeros((0, horizon, FEATURE_COUNT)),
                np.zeros(0, dtype=np.int64),
                np.zeros(0, dtype=np.int64),
            )
        return cls(
            np.stack([s.history for s in samples]),
            np.stack([s.future for s in samples]),
            np.array([s.source_id for s in samples]),
            np.array([s.window_index for s in samples]),
        )

    def __len__(self) -> int:
        return len(self.histories)

    @property
    def history_len(self) -> int:
        return self.histories.shape[1]

    @property
    def horizon(self) -> int:
        return self.futures.shape[1]

    def subset(self, indices) -> "SampleSet":
        indices = np.asarray(indices, dtype=np.int64)
        return SampleSet(
            self.histories[indices],
            self.futures[indices],
            self.source_ids[indices],
            self.window_indices[indices],
        )

    def normalized(self, stats: NormalizationStats) -> "SampleSet":
        anchors = stats.anchors(self.histories)
        return SampleSet(
            stats.encode(self.histories, anchors),
            stats.encode(self.futures, anchors),
            self.source_ids,
            self.window_indices,
        )


# --------------------------------
# Parsing
# --------------------------------
def _parse_row(path: str, line_no: int, fields: List[str], fmt: AnnotationFormat):
    expected = 8 if fmt == "obsmat" else 4
    if len(fields) != expected:
        raise ParseError(path, line_no, f"expected {expected} columns, got {len(fields)}")
    try:
        values = [float(f) for f in fields]
    except ValueError as e:
        raise ParseError(path, line_no, f"non-numeric value: {e}") from e
    if not np.all(np.isfinite(values)):
        raise ParseError(path, line_no, "non-finite value")
    frame, ped = values[0], values[1]
    if frame != int(frame) or ped != int(ped):
        raise ParseError(path, line_no, f"frame {frame} / id {ped} are not integers")
    if fmt == "obsmat":
        return int(frame), int(ped), values[2], values[4]
    return int(frame), int(ped), values[2], values[3]


def parse_annotations(path: str, format: AnnotationFormat = "obsmat") -> List[RawTrack]:
    """Group annotation rows by pedestrian into frame-sorted tracks.

    A pedestrian whose frame gaps are not the corpus' usual gap is split into
    regularly sampled segments.
    """
    if format not in ("obsmat", "tsv"):
        raise ParameterError(f"unknown annotation format {format!r}")
    try:
        with open(path, "r") as f:
            lines = f.readlines()
    except OSError as e:
        raise ParseError(path, None, f"cannot read file: {e}") from e

    rows_by_id: Dict[int, List[Tuple[int, float, float]]] = {}
    for line_no, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        frame, ped, x, y = _parse_row(path, line_no, stripped.split(), format)
        rows_by_id.setdefault(ped, []).append((frame, x, y))

    gap_counts: Counter = Counter()
    for ped, rows in rows_by_id.items():
        rows.sort(key=lambda r: r[0])
        frames = [r[0] for r in rows]
        if len(set(frames)) != len(frames):
            raise DataError(f"{path}: pedestrian {ped} has duplicated frames")
        gap_counts.update(b - a for a, b in zip(frames, frames[1:]))
    step = gap_counts.most_common(1)[0][0] if gap_counts else 1

    tracks: List[RawTrack] = []
    for ped in sorted(rows_by_id):
        segment: List[Tuple[int, float, float]] = []
        for row in rows_by_id[ped]:
            if segment and row[0] - segment[-1][0] != step:
                logging.warning(
                    f"{path}: pedestrian {ped} gap {row[0] - segment[-1][0]} != {step} frames, splitting track"
                )
                tracks.append(RawTrack(pedestrian_id=ped, samples=segment))
                segment = []
            segment.append(row)
        tracks.append(RawTrack(pedestrian_id=ped, samples=segment))
    logging.info(f"parsed {len(tracks)} tracks from {path}")
    return tracks


# --------------------------------
# Features and windows
# --------------------------------
def derive_velocities(track: RawTrack, dt: float = DEFAULT_DT) -> Optional[Array]:
    """Backward-difference (u, v) per sample; the first copies the second.

    Returns None (and warns) for tracks with a single sample.
    """
    if dt <= 0:
        raise ParameterError(f"dt must be > 0, got {dt}")
    if len(track) < 2:
        logging.warning(f"pedestrian {track.pedestrian_id}: single-sample track skipped")
        return None
    positions = track.positions
    velocities = np.empty_like(positions)
    velocities[1:] = (positions[1:] - positions[:-1]) / dt
    velocities[0] = velocities[1]
    return velocities


def track_features(track: RawTrack, dt: float = DEFAULT_DT) -> Optional[Array]:
    """[n, 4] array of (x, y, u, v)."""
    velocities = derive_velocities(track, dt)
    if velocities is None:
        return None
    return np.concatenate([track.positions, velocities], axis=1)


def sliding_window_augment(
    track: RawTrack,
    history_len: int,
    horizon: int,
    stride: int = 1,
    dt: float = DEFAULT_DT,
) -> List[TrajectorySample]:
    if history_len < 1 or horizon < 1 or stride < 1:
        raise ParameterError(
            f"T, F and stride must be >= 1, got {history_len}, {horizon}, {stride}"
        )
    total = history_len + horizon
    if len(track) < max(total, 2):
        return []
    features = track_features(track, dt)
    samples = []
    for window_index, start in enumerate(range(0, len(track) - total + 1, stride)):
        window = features[start : start + total]
        samples.append(
            TrajectorySample(
                history=window[:history_len].copy(),
                future=window[history_len:].copy(),
                source_id=track.pedestrian_id,
                window_index=window_index,
            )
        )
    return samples


def split_dataset(
    samples: SampleSet, train_fraction: float, seed: int = 0
) -> Tuple[SampleSet, SampleSet]:
    """Split by pedestrian id so no pedestrian lands on both sides."""
    if not 0.0 < train_fraction < 1.0:
        raise ParameterError(f"train fraction must be in (0, 1), got {train_fraction}")
    ids = np.unique(samples.source_ids)
    if len(ids) < 2:
        logging.warning(f"only {len(ids)} pedestrian id(s), everything goes to train")
        return samples, samples.subset([])
    order = np.random.default_rng(seed).permutation(ids)
    n_train = min(max(int(round(train_fraction * len(ids))), 1), len(ids) - 1)
    in_train = np.isin(samples.source_ids, order[:n_train])
    return (
        samples.subset(np.flatnonzero(in_train)),
        samples.subset(np.flatnonzero(~in_train)),
    )


def fit_normalizer(train: SampleSet, relative: bool = True) -> NormalizationStats:
    """Per-feature mean and std over every history and future step.

    With `relative`, positions are measured from each window's last observed
    position before the statistics are taken.
    """
    if len(train) == 0:
        raise DataError("cannot fit normalization on an empty training set")
    frame = NormalizationStats(
        mean=[0.0] * FEATURE_COUNT, std=[1.0] * FEATURE_COUNT, relative=relative
    )
    anchors = frame.anchors(train.histories)
    values = np.concatenate(
        [
            frame.encode(train.histories, anchors).reshape(-1, FEATURE_COUNT),
            frame.encode(train.futures, anchors).reshape(-1, FEATURE_COUNT),
        ]
    )
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    constant = std <= 1e-12
    # Constant features pass through untouched
    mean[constant] = 0.0
    std[constant] = 1.0
    return NormalizationStats(mean=mean.tolist(), std=std.tolist(), relative=relative)


def synthetic_constant_velocity(
    n_tracks: int = 200,
    length: int = 30,
    seed: int = 0,
    dt: float = DEFAULT_DT,
    frame_step: int = 10,
) -> List[RawTrack]:
    """Straight-line walkers with random start, heading and speed."""
    rng = np.random.default_rng(seed)
    tracks = []
    for ped in range(1, n_tracks + 1):
        start = rng.uniform(-10.0, 10.0, size=2)
        heading = rng.uniform(0.0, 2.0 * np.pi)
        speed = rng.uniform(0.5, 1.8)
        velocity = speed * np.array([np.cos(heading), np.sin(heading)])
        samples = [
            (k * frame_step, float(start[0] + velocity[0] * dt * k), float(start[1] + velocity[1] * dt * k))
            for k in range(length)
        ]
        tracks.append(RawTrack(pedestrian_id=ped, samples=samples))
    return tracks


# --------------------------------
# Prepared-dataset cache
# --------------------------------
class SampleBlock(BaseModel):
    histories: List[List[List[float]]]
    futures: List[List[List[float]]]
    source_ids: List[int]
    window_indices: List[int]

    @classmethod
    def from_sample_set(cls, samples: SampleSet) -> "SampleBlock":
        return cls(
            histories=samples.histories.tolist(),
            futures=samples.futures.tolist(),
            source_ids=samples.source_ids.tolist(),
            window_indices=samples.window_indices.tolist(),
        )

    def to_sample_set(self, history_len: int, horizon: int) -> SampleSet:
        n = len(self.source_ids)
        return SampleSet(
            np.array(self.histories, dtype=np.float64).reshape(n, history_len, FEATURE_COUNT),
            np.array(self.futures, dtype=np.float64).reshape(n, horizon, FEATURE_COUNT),
            np.array(self.source_ids, dtype=np.int64),
            np.array(self.window_indices, dtype=np.int64),
        )


class PreparedDataset(BaseModel):
    """Windows in meters plus the training normalization, ready to train."""

    format_tag: Literal["trajdrop-cache/1"] = CACHE_FORMAT_TAG
    source: str = Field(..., description="Annotation file path or synthetic corpus label")
    history_len: int = Field(..., ge=1)
    horizon: int = Field(..., ge=1)
    dt: float = Field(..., gt=0)
    stride: int = Field(1, ge=1)
    train_fraction: float = Field(..., gt=0, lt=1)
    seed: int = Field(..., ge=0)
    track_count: int = Field(..., ge=0)
    stats: NormalizationStats
    train: SampleBlock
    test: SampleBlock

    def train_set(self) -> SampleSet:
        return self.train.to_sample_set(self.history_len, self.horizon)

    def test_set(self) -> SampleSet:
        return self.test.to_sample_set(self.history_len, self.horizon)

    @property
    def horizon_seconds(self) -> float:
        return round(self.horizon * self.dt, 6)

    def summary(self) -> str:
        n_train, n_test = len(self.train.source_ids), len(self.test.source_ids)
        return (
            f"{self.source}: {self.track_count} tracks, {n_train + n_test} sequences "
            f"({n_train} train / {n_test} test), T={self.history_len} F={self.horizon} dt={self.dt}s"
        )


def prepare_dataset(
    tracks: Sequence[RawTrack],
    history_len: int = 8,
    horizon: int = 12,
    dt: float = DEFAULT_DT,
    train_fraction: float = 0.79,
    seed: int = 0,
    stride: int = 1,
    source: str = "memory",
    relative: bool = True,
) -> PreparedDataset:
    """Velocities, windows, track-level split and training normalization."""
    windows: List[TrajectorySample] = []
    for track in tracks:
        windows.extend(sliding_window_augment(track, history_len, horizon, stride, dt))
    if not windows:
        raise DataError(
            f"{source}: no track is long enough for T+F={history_len + horizon} steps"
        )
    samples = SampleSet.from_samples(windows, history_len, horizon)
    train, test = split_dataset(samples, train_fraction, seed)
    stats = fit_normalizer(train, relative=relative)
    return PreparedDataset(
        source=source,
        history_len=history_len,
        horizon=horizon,
        dt=dt,
        stride=stride,
        train_fraction=train_fraction,
        seed=seed,
        track_count=len(tracks),
        stats=stats,
        train=SampleBlock.from_sample_set(train),
        test=SampleBlock.from_sample_set(test),
    )


def save_cache(dataset: PreparedDataset, path: str) -> None:
    with open(path, "w") as f:
        f.write(dataset.model_dump_json())
    logging.info(f"wrote prepared dataset to {path}")


def load_cache(path: str) -> PreparedDataset:
    try:
        with open(path, "r") as f:
            text = f.read()
    except OSError as e:
        raise DataError(f"cannot read prepared dataset {path}: {e}") from e
    try:
        return PreparedDataset.model_validate_json(text)
    except ValidationError as e:
        raise DataError(f"{path} is not a {CACHE_FORMAT_TAG} prepared dataset: {e}") from e
