"""Dataset handling: label/feature file ingestion, sliding-window sequence
construction, class bookkeeping, synthetic corridor generation, and PPM
pixel image I/O."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .geo import EARTH_RADIUS_M, LatLon

LABEL_COLUMNS = ("image_id", "edge_id", "seq_index", "lat", "lon", "rs", "mcb", "cb")


class SchemaError(ValueError):
    """File content violates the documented schema."""


@dataclass(frozen=True)
class ImageRecord:
    """One geo-referenced observation with its three class labels."""

    image_id: str
    edge_id: str
    seq_index: int
    location: LatLon
    labels: tuple[bool, bool, bool]  # (rs, mcb, cb)
    pixels: np.ndarray | None = None  # H x W x 3, values in [0, 1]
    features: np.ndarray | None = None


@dataclass(frozen=True)
class FeatureSequence:
    """A window of consecutive records on one edge; the sequence model's training unit."""

    records: tuple[ImageRecord, ...]
    edge_id: str
    start_seq_index: int

    def feature_matrix(self) -> np.ndarray:
        """Stack the per-record feature vectors, shape (window, feature_dim)."""
        return np.stack([r.features for r in self.records]).astype(np.float64)

    def label_matrix(self) -> np.ndarray:
        """Per-step labels as floats, shape (window, 3)."""
        return np.array([r.labels for r in self.records], dtype=np.float64)


@dataclass(frozen=True)
class ClassDistribution:
    n_images: int
    rs_n: int
    mcb_n: int
    cb_n: int

    def positives(self) -> tuple[int, int, int]:
        return (self.rs_n, self.mcb_n, self.cb_n)


def _parse_label(value: str, name: str, line: int) -> bool:
    if value not in ("0", "1"):
        raise SchemaError(f"line {line}: label {name}={value!r} not in {{0,1}}")
    return value == "1"


def load_labels(path: str) -> list[ImageRecord]:
    """Read the label CSV; returns records sorted by (edge_id, seq_index).

    Schema: image_id,edge_id,seq_index,lat,lon,rs,mcb,cb with 0/1 labels.
    Raises SchemaError naming the offending line on any malformed row,
    duplicate (edge_id, seq_index) key, or out-of-range label.
    """
    records: list[ImageRecord] = []
    seen: dict[tuple[str, int], int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != LABEL_COLUMNS:
            raise SchemaError(
                f"{path}: expected header {','.join(LABEL_COLUMNS)}, got {header}"
            )
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(LABEL_COLUMNS):
                raise SchemaError(
                    f"line {line}: expected {len(LABEL_COLUMNS)} fields, got {len(row)}"
                )
            image_id, edge_id = row[0], row[1]
            try:
                seq_index = int(row[2])
                lat, lon = float(row[3]), float(row[4])
            except ValueError as exc:
                raise SchemaError(f"line {line}: {exc}") from exc
            if seq_index < 0:
                raise SchemaError(f"line {line}: seq_index {seq_index} is negative")
            labels = tuple(
                _parse_label(v, n, line) for v, n in zip(row[5:8], ("rs", "mcb", "cb"))
            )
            key = (edge_id, seq_index)
            if key in seen:
                raise SchemaError(
                    f"line {line}: duplicate (edge_id, seq_index) {key}, first seen on line {seen[key]}"
                )
            seen[key] = line
            records.append(
                ImageRecord(
                    image_id=image_id,
                    edge_id=edge_id,
                    seq_index=seq_index,
                    location=LatLon(lat, lon),
                    labels=labels,  # type: ignore[arg-type]
                )
            )
    records.sort(key=lambda r: (r.edge_id, r.seq_index))
    return records


def attach_features(
    records: Sequence[ImageRecord], path: str, expected_dim: int | None = None
) -> list[ImageRecord]:
    """Attach feature vectors from a JSON-lines file keyed by image_id.

    Every record must receive a vector and every file entry must match a
    record; dimension consistency is enforced across the file (and against
    expected_dim when given).
    """
    by_id = {r.image_id: r for r in records}
    if len(by_id) != len(records):
        raise SchemaError("records contain duplicate image_ids")
    vectors: dict[str, np.ndarray] = {}
    dim = expected_dim
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                image_id = obj["image_id"]
                vec = np.asarray(obj["features"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise SchemaError(f"line {line_no}: {exc}") from exc
            if image_id not in by_id:
                raise SchemaError(f"line {line_no}: unknown image_id {image_id!r}")
            if vec.ndim != 1:
                raise SchemaError(f"line {line_no}: features must be a flat list")
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise SchemaError(
                    f"line {line_no}: feature dimension {vec.shape[0]} != expected {dim}"
                )
            vectors[image_id] = vec
    missing = sorted(set(by_id) - set(vectors))
    if missing:
        raise SchemaError(f"no features for {len(missing)} record(s): {missing}")
    return [replace(r, features=vectors[r.image_id]) for r in records]


def _runs(records: Sequence[ImageRecord]) -> list[tuple[int, int]]:
    """Maximal gapless runs as (start, end) index pairs into records."""
    runs = []
    start = 0
    for i in range(1, len(records) + 1):
        if (
            i == len(records)
            or records[i].edge_id != records[i - 1].edge_id
            or records[i].seq_index != records[i - 1].seq_index + 1
        ):
            runs.append((start, i))
            start = i
    return runs if records else []


def build_sequences(
    records: Sequence[ImageRecord], window: int, stride: int = 1
) -> list[FeatureSequence]:
    """Slide a window over every gapless run; runs shorter than the window yield nothing."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    ordered = sorted(records, key=lambda r: (r.edge_id, r.seq_index))
    if list(ordered) != list(records):
        raise ValueError("records must be sorted by (edge_id, seq_index)")
    sequences: list[FeatureSequence] = []
    for start, end in _runs(records):
        n = end - start
        for offset in range(0, n - window + 1, stride):
            chunk = tuple(records[start + offset : start + offset + window])
            sequences.append(
                FeatureSequence(
                    records=chunk,
                    edge_id=chunk[0].edge_id,
                    start_seq_index=chunk[0].seq_index,
                )
            )
    return sequences


def class_distribution(records: Iterable[ImageRecord]) -> ClassDistribution:
    """Count per-class positives."""
    n = rs = mcb = cb = 0
    for r in records:
        n += 1
        rs += int(r.labels[0])
        mcb += int(r.labels[1])
        cb += int(r.labels[2])
    return ClassDistribution(n_images=n, rs_n=rs, mcb_n=mcb, cb_n=cb)


@dataclass(frozen=True)
class SynthConfig:
    """Configuration for the synthetic corridor generator.

    Per-class label runs follow alternating geometric on/off lengths (in
    points) matching real spatial scales: long rumble-strip runs, short
    metal-crash-barrier runs, medium concrete-barrier runs.
    """

    n_points: int = 2000
    feature_dim: int = 16
    mean_run_on: tuple[float, float, float] = (160.0, 12.0, 80.0)  # rs, mcb, cb
    mean_run_off: tuple[float, float, float] = (40.0, 30.0, 120.0)
    # distance between class-conditional feature means; the short-run class
    # (mcb) defaults to a smaller margin, making it genuinely harder per frame
    separation: float | tuple[float, float, float] = (2.0, 1.2, 2.0)
    noise_sigma: float = 0.7
    corrupt_rate: float = 0.05
    interval_m: float = 20.0
    edge_id: str = "corridor"
    origin: LatLon = LatLon(33.5, -86.5)

    def separations(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.separation, dtype=np.float64), (3,))

    def validate(self) -> None:
        if self.n_points < 1:
            raise ValueError("n_points must be >= 1")
        if self.feature_dim < 3:
            raise ValueError("feature_dim must be >= 3")
        if not (0.0 <= self.corrupt_rate < 1.0):
            raise ValueError("corrupt_rate must be in [0, 1)")
        if min(self.mean_run_on) <= 0 or min(self.mean_run_off) <= 0:
            raise ValueError("mean run lengths must be positive")
        if np.min(self.separations()) <= 0 or self.noise_sigma <= 0:
            raise ValueError("separation and noise_sigma must be positive")


def _run_length_labels(rng: np.random.Generator, n: int, mean_on: float, mean_off: float) -> np.ndarray:
    """Alternating geometric on/off runs, returned as an n-vector of 0/1."""
    labels = np.zeros(n, dtype=bool)
    stationary_on = mean_on / (mean_on + mean_off)
    state = bool(rng.random() < stationary_on)
    pos = 0
    while pos < n:
        mean = mean_on if state else mean_off
        length = int(rng.geometric(1.0 / mean))
        labels[pos : pos + length] = state
        pos += length
        state = not state
    return labels


def synth_corridor(config: SynthConfig, seed: int) -> list[ImageRecord]:
    """Generate a labeled synthetic corridor with feature vectors.

    Feature coordinates 0..2 are informative for (rs, mcb, cb): their mean is
    +separation/2 when the label is on and -separation/2 when off, plus
    Gaussian noise. Remaining coordinates are pure noise. A corrupt_rate
    fraction of records (chosen non-adjacent so frame-level errors stay
    isolated) gets label-uninformative features: the informative coordinates
    are redrawn under coin-flip labels, emulating occlusion. Labels are never
    corrupted. Deterministic given the seed.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    n, dim = config.n_points, config.feature_dim

    labels = np.stack(
        [
            _run_length_labels(rng, n, config.mean_run_on[k], config.mean_run_off[k])
            for k in range(3)
        ],
        axis=1,
    )

    features = rng.normal(0.0, 1.0, size=(n, dim))
    half = config.separations() / 2.0
    informative = np.where(labels, half, -half) + rng.normal(0.0, config.noise_sigma, size=(n, 3))
    features[:, :3] = informative

    n_corrupt = int(round(config.corrupt_rate * n))
    corrupted: list[int] = []
    taken = np.zeros(n, dtype=bool)
    for pos in rng.permutation(n):
        if len(corrupted) == n_corrupt:
            break
        if taken[max(0, pos - 1) : pos + 2].any():
            continue
        taken[pos] = True
        corrupted.append(int(pos))
    for pos in sorted(corrupted):
        coin = rng.random(3) < 0.5
        features[pos, :3] = np.where(coin, half, -half) + rng.normal(
            0.0, config.noise_sigma, size=3
        )
        features[pos, 3:] = rng.normal(0.0, 1.0, size=dim - 3)

    lat0, lon0 = config.origin
    meters_per_deg_lon = EARTH_RADIUS_M * math.cos(math.radians(lat0)) * math.pi / 180.0
    records = []
    for i in range(n):
        lon = lon0 + i * config.interval_m / meters_per_deg_lon
        records.append(
            ImageRecord(
                image_id=f"syn-{i:05d}",
                edge_id=config.edge_id,
                seq_index=i,
                location=LatLon(lat0, lon),
                labels=(bool(labels[i, 0]), bool(labels[i, 1]), bool(labels[i, 2])),
                features=features[i].copy(),
            )
        )
    return records


# --- pixel image I/O (portable binary PPM, P6, maxval 255) ---


def write_ppm(path: str, pixels: np.ndarray) -> None:
    """Write an H x W x 3 float array in [0, 1] as a binary PPM."""
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"pixels must be H x W x 3, got {pixels.shape}")
    h, w = pixels.shape[:2]
    raw = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(raw.tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Read a binary PPM into an H x W x 3 float array in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":  # comment line
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if fields[0] != b"P6":
        raise SchemaError(f"{path}: not a binary PPM (P6), magic {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise SchemaError(f"{path}: only maxval 255 supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    raw = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raw.reshape(h, w, 3).astype(np.float64) / 255.0


def load_pixels(records: Sequence[ImageRecord], manifest_path: str) -> list[ImageRecord]:
    """Attach pixel grids per a manifest CSV mapping image_id -> PPM path.

    Relative paths are resolved against the manifest's directory.
    """
    base = os.path.dirname(os.path.abspath(manifest_path))
    paths: dict[str, str] = {}
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ("image_id", "path"):
            raise SchemaError(f"{manifest_path}: expected header image_id,path, got {header}")
        for row in reader:
            if not row:
                continue
            if len(row) != 2:
                raise SchemaError(f"line {reader.line_num}: expected 2 fields, got {len(row)}")
            paths[row[0]] = row[1]
    missing = sorted(r.image_id for r in records if r.image_id not in paths)
    if missing:
        raise SchemaError(f"manifest lacks paths for {len(missing)} record(s): {missing}")
    out = []
    for r in records:
        p = paths[r.image_id]
        if not os.path.isabs(p):
            p = os.path.join(base, p)
        out.append(replace(r, pixels=read_ppm(p)))
    return out


def write_labels(path: str, records: Sequence[ImageRecord]) -> None:
    """Write records back out in the label CSV schema."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LABEL_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.image_id,
                    r.edge_id,
                    r.seq_index,
                    f"{r.location.lat:.6f}",
                    f"{r.location.lon:.6f}",
                    int(r.labels[0]),
                    int(r.labels[1]),
                    int(r.labels[2]),
                ]
            )


def write_features(path: str, records: Sequence[ImageRecord]) -> None:
    """Write per-record feature vectors as JSON-lines keyed by image_id."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            if r.features is None:
                raise ValueError(f"record {r.image_id} has no features")
            fh.write(
                json.dumps(
                    {"image_id": r.image_id, "features": [float(x) for x in r.features]}
                )
                + "\n"
            )
