"""RSSI fingerprints: normalization, image encoding, dataset I/O and metrics.

RSSI is handled in dBm. Missing access points take the ``MISSING_DBM``
sentinel, and every value is clamped to ``[MISSING_DBM, 0]`` before it is
quantized to an 8-bit pixel.
"""

from __future__ import annotations

import csv
import hashlib
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

MISSING_DBM = -100.0
MAX_DBM = 0.0
UJI_NOT_DETECTED = 100.0

# (building, floor) -> class index, building-major
UJI_FLOORS_PER_BUILDING = (4, 4, 5)
UJI_METADATA = (
    "LONGITUDE",
    "LATITUDE",
    "FLOOR",
    "BUILDINGID",
    "SPACEID",
    "RELATIVEPOSITION",
    "USERID",
    "PHONEID",
    "TIMESTAMP",
)
_UJI_WAP = re.compile(r"^WAP\d+$")
_NATIVE_WAP = re.compile(r"^WAP_(.+)$")


class DatasetError(ValueError):
    """Malformed dataset content, reported with its source location."""


@dataclass(frozen=True)
class FingerprintImage:
    side: int
    pixels: np.ndarray  # (side, side) uint8

    def as_array(self) -> np.ndarray:
        return self.pixels


@dataclass(frozen=True)
class LabeledDataset:
    """RSSI samples with reference-point labels.

    ``rssi`` is (N, W) in dBm, aligned with ``wap_index``. ``coords`` is
    (n_classes, 2) in meters, NaN where a class has no known position.
    """

    rssi: np.ndarray
    labels: np.ndarray
    wap_index: tuple[str, ...]
    n_classes: int
    coords: np.ndarray | None = None
    split: str = "all"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.rssi.ndim != 2 or self.rssi.shape[1] != len(self.wap_index):
            raise DatasetError(
                f"rssi shape {self.rssi.shape} does not match {len(self.wap_index)} WAPs"
            )
        if len(self.labels) != len(self.rssi):
            raise DatasetError("labels and rssi rows differ in length")
        if len(set(self.wap_index)) != len(self.wap_index):
            raise DatasetError("WAP identifiers must be unique")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DatasetError(f"labels outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_side(self) -> int:
        return image_side(len(self.wap_index))

    def images(self) -> np.ndarray:
        """All samples as (N, side, side, 1) float32 pixel images."""
        return encode_batch(self.rssi)

    def subset(self, idx, split: str | None = None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(
            self,
            rssi=self.rssi[idx],
            labels=self.labels[idx],
            split=split or self.split,
        )

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update("\x1f".join(self.wap_index).encode())
        h.update(np.ascontiguousarray(self.rssi, dtype=np.float64).tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype=np.int64).tobytes())
        return h.hexdigest()[:16]


def normalize_rssi(dbm):
    """Map dBm to an integer pixel in [0, 255], rounding half up.

    Works on scalars and arrays. Values outside [-100, 0] are clamped first.
    """
    arr = np.asarray(dbm, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("RSSI values must be finite")
    clamped = np.clip(arr, MISSING_DBM, MAX_DBM)
    pixels = np.floor(255.0 * (clamped - MISSING_DBM) / (MAX_DBM - MISSING_DBM) + 0.5)
    if pixels.ndim == 0:
        return int(pixels)
    return pixels.astype(np.uint8)


def image_side(n: int) -> int:
    """Smallest s with s*s >= n."""
    if n < 1:
        raise ValueError("fingerprint vector must be non-empty")
    return math.isqrt(n - 1) + 1


def encode_image(vector: Sequence[float]) -> FingerprintImage:
    """Row-major pixel image of one RSSI vector, zero-padded to a square."""
    v = np.asarray(vector, dtype=np.float64).ravel()
    side = image_side(v.size)
    flat = np.zeros(side * side, dtype=np.uint8)
    flat[: v.size] = normalize_rssi(v)
    return FingerprintImage(side, flat.reshape(side, side))


def encode_batch(rssi: np.ndarray) -> np.ndarray:
    """Encode (N, W) dBm rows to (N, side, side, 1) float32 pixel values."""
    rssi = np.asarray(rssi, dtype=np.float64)
    n, w = rssi.shape
    side = image_side(w)
    flat = np.zeros((n, side * side), dtype=np.float32)
    if n:
        flat[:, :w] = normalize_rssi(rssi)
    return flat.reshape(n, side, side, 1)


def _parse_float(text: str, where: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DatasetError(f"{where}: non-numeric value {text!r}") from None
    if not math.isfinite(value):
        raise DatasetError(f"{where}: non-finite value {text!r}")
    return value


def load_native(path: str | Path) -> LabeledDataset:
    """Read the native CSV schema ``label,x,y,WAP_<id>,...``.

    Blank RSSI cells mean "not observed" and load as -100 dBm.
    """
    path = Path(path)
    rssi_rows, labels = [], []
    positions: dict[int, tuple[float, float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if [h.strip() for h in header[:3]] != ["label", "x", "y"]:
            raise DatasetError(f"{path}: header must start with label,x,y")
        waps = []
        for col in header[3:]:
            m = _NATIVE_WAP.match(col.strip())
            if not m:
                raise DatasetError(f"{path}: unexpected column {col!r}")
            waps.append(m.group(1))
        if not waps:
            raise DatasetError(f"{path}: no WAP columns")
        seen = set()
        for w in waps:
            if w in seen:
                raise DatasetError(f"{path}: duplicate WAP id {w!r}")
            seen.add(w)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            where = f"{path}:{lineno}"
            if len(row) != len(header):
                raise DatasetError(f"{where}: expected {len(header)} fields, got {len(row)}")
            try:
                label = int(row[0])
            except ValueError:
                raise DatasetError(f"{where}: label {row[0]!r} is not an integer") from None
            if label < 0:
                raise DatasetError(f"{where}: negative label {label}")
            x, y = _parse_float(row[1], where), _parse_float(row[2], where)
            positions.setdefault(label, (x, y))
            values = [
                MISSING_DBM if cell.strip() == "" else _parse_float(cell, where)
                for cell in row[3:]
            ]
            rssi_rows.append(values)
            labels.append(label)
    n_classes = max(labels) + 1 if labels else 0
    coords = np.full((n_classes, 2), np.nan)
    for label, xy in positions.items():
        coords[label] = xy
    return LabeledDataset(
        rssi=np.clip(np.array(rssi_rows, dtype=np.float64).reshape(-1, len(waps)), MISSING_DBM, MAX_DBM),
        labels=np.array(labels, dtype=np.int64),
        wap_index=tuple(waps),
        n_classes=n_classes,
        coords=coords,
    )


def save_native(dataset: LabeledDataset, path: str | Path) -> Path:
    """Write ``dataset`` in the native schema; -100 dBm cells are left blank."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    coords = dataset.coords if dataset.coords is not None else np.full((dataset.n_classes, 2), np.nan)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "x", "y"] + [f"WAP_{w}" for w in dataset.wap_index])
        for values, label in zip(dataset.rssi, dataset.labels):
            x, y = coords[label]
            cells = ["" if v <= MISSING_DBM else repr(float(v)) for v in values]
            writer.writerow([int(label), repr(float(x)), repr(float(y))] + cells)
    return path


def uji_class(building: int, floor: int) -> int:
    if not 0 <= building < len(UJI_FLOORS_PER_BUILDING):
        raise ValueError(f"unknown building {building}")
    if not 0 <= floor < UJI_FLOORS_PER_BUILDING[building]:
        raise ValueError(f"building {building} has no floor {floor}")
    return sum(UJI_FLOORS_PER_BUILDING[:building]) + floor


def load_ujindoorloc(path: str | Path) -> LabeledDataset:
    """Read a UJIndoorLoc CSV and label rows by (building, floor).

    The dataset's +100 "not detected" value becomes -100 dBm. Class
    coordinates are the mean LONGITUDE/LATITUDE of each class's rows.
    """
    path = Path(path)
    n_classes = sum(UJI_FLOORS_PER_BUILDING)
    rssi_rows, labels, positions = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().strip('"') for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        wap_cols = [i for i, h in enumerate(header) if _UJI_WAP.match(h)]
        unknown = [h for h in header if not _UJI_WAP.match(h) and h not in UJI_METADATA]
        if unknown:
            raise DatasetError(f"{path}: unknown columns {unknown}")
        if not wap_cols:
            raise DatasetError(f"{path}: no WAP columns")
        if len(set(header)) != len(header):
            raise DatasetError(f"{path}: duplicate columns")
        for required in ("FLOOR", "BUILDINGID"):
            if required not in header:
                raise DatasetError(f"{path}: missing column {required}")
        col = {h: i for i, h in enumerate(header)}
        has_xy = "LONGITUDE" in col and "LATITUDE" in col
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            where = f"{path}:{lineno}"
            if len(row) != len(header):
                raise DatasetError(f"{where}: expected {len(header)} fields, got {len(row)}")
            values = np.array([_parse_float(row[i], where) for i in wap_cols])
            values[values == UJI_NOT_DETECTED] = MISSING_DBM
            try:
                label = uji_class(int(_parse_float(row[col["BUILDINGID"]], where)),
                                  int(_parse_float(row[col["FLOOR"]], where)))
            except ValueError as exc:
                raise DatasetError(f"{where}: {exc}") from None
            rssi_rows.append(np.clip(values, MISSING_DBM, MAX_DBM))
            labels.append(label)
            if has_xy:
                positions.append((_parse_float(row[col["LONGITUDE"]], where),
                                  _parse_float(row[col["LATITUDE"]], where)))
    labels_arr = np.array(labels, dtype=np.int64)
    coords = np.full((n_classes, 2), np.nan)
    if has_xy and labels:
        pos = np.array(positions)
        for c in np.unique(labels_arr):
            coords[c] = pos[labels_arr == c].mean(axis=0)
    return LabeledDataset(
        rssi=np.array(rssi_rows, dtype=np.float64).reshape(-1, len(wap_cols)),
        labels=labels_arr,
        wap_index=tuple(header[i] for i in wap_cols),
        n_classes=n_classes,
        coords=coords,
    )


def synth_generate(
    classes: int,
    waps: int,
    samples_per_class: int,
    easy_fraction: float = 0.8,
    noise_db: float = 4.0,
    seed: int = 0,
    hard_separation_db: float = 6.0,
) -> LabeledDataset:
    """Synthetic fingerprint dataset with easy and overlapping classes.

    Every class has an RSSI template over a weak background (-100 to -85 dBm).
    Easy classes own a dedicated access point at -35 dBm, which puts them tens
    of dB apart. The other classes come in clusters that share one dedicated
    access point and differ only by +/-``hard_separation_db`` on four
    cluster-specific access points, so at moderate noise they overlap.
    Samples add Gaussian noise of std ``noise_db`` and are clamped to
    [-100, 0]. Reference point ``k`` sits at (k, 0) meters.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if waps < classes:
        raise ValueError("need at least as many WAPs as classes")
    if samples_per_class < 1:
        raise ValueError("samples_per_class must be >= 1")
    if not 0.0 <= easy_fraction <= 1.0:
        raise ValueError("easy_fraction must lie in [0, 1]")
    if noise_db < 0:
        raise ValueError("noise_db must be >= 0")

    rng = np.random.default_rng(seed)
    n_easy = int(round(easy_fraction * classes))
    order = rng.permutation(classes)
    easy, hard = order[:n_easy], order[n_easy:]
    dedicated = rng.permutation(waps)

    templates = rng.uniform(-100.0, -85.0, size=(classes, waps))
    slot = 0
    for c in easy:
        templates[c, dedicated[slot]] = -35.0
        slot += 1
    # hard classes in clusters of two (three when the count is odd)
    clusters = [list(hard[i:i + 2]) for i in range(0, len(hard), 2)]
    if len(clusters) > 1 and len(clusters[-1]) == 1:
        clusters[-2].extend(clusters.pop())
    for members in clusters:
        shared = templates[members[0]].copy()
        shared[dedicated[slot]] = -45.0
        slot += 1
        probe = rng.choice(waps, size=min(4, waps), replace=False)
        patterns = _distinct_sign_patterns(len(members), len(probe), rng)
        for c, signs in zip(members, patterns):
            templates[c] = shared
            templates[c, probe] = shared[probe] + hard_separation_db * signs
    templates = np.clip(templates, MISSING_DBM, MAX_DBM)

    labels = np.repeat(np.arange(classes), samples_per_class)
    noise = rng.normal(0.0, noise_db, size=(len(labels), waps)) if noise_db > 0 else 0.0
    rssi = np.clip(templates[labels] + noise, MISSING_DBM, MAX_DBM)
    coords = np.stack([np.arange(classes, dtype=np.float64), np.zeros(classes)], axis=1)
    return LabeledDataset(
        rssi=rssi,
        labels=labels.astype(np.int64),
        wap_index=tuple(f"{i:03d}" for i in range(waps)),
        n_classes=classes,
        coords=coords,
        meta={"templates": templates, "easy_classes": np.sort(easy), "seed": seed},
    )


def _distinct_sign_patterns(count: int, width: int, rng: np.random.Generator) -> np.ndarray:
    patterns: list[np.ndarray] = []
    while len(patterns) < count:
        p = rng.choice([-1.0, 1.0], size=width)
        if not any(np.array_equal(p, q) for q in patterns):
            patterns.append(p)
    return np.array(patterns)


def split(
    dataset: LabeledDataset,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Stratified, disjoint train/calibration/test split."""
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("need three non-negative fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    for c in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        n_train = int(round(fractions[0] * idx.size))
        n_calib = min(int(round(fractions[1] * idx.size)), idx.size - n_train)
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_calib])
        parts[2].append(idx[n_train + n_calib:])
    names = ("train", "calibration", "test")
    out = []
    for name, chunks in zip(names, parts):
        idx = np.sort(np.concatenate(chunks)) if chunks else np.empty(0, dtype=np.int64)
        out.append(dataset.subset(idx, split=name))
    return tuple(out)


def mean_localization_error(predicted, true, coords: np.ndarray) -> float:
    """Mean Euclidean distance (meters) between predicted and true reference points."""
    predicted = np.asarray(predicted, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if predicted.shape != true.shape:
        raise ValueError("predicted and true labels differ in length")
    if predicted.size == 0:
        raise ValueError("no predictions")
    coords = np.asarray(coords, dtype=np.float64)
    for labels in (predicted, true):
        if labels.min() < 0 or labels.max() >= len(coords):
            raise ValueError("label without coordinates")
        if np.isnan(coords[labels]).any():
            raise ValueError("label without coordinates")
    return float(np.linalg.norm(coords[predicted] - coords[true], axis=1).mean())


def top1_accuracy(predicted, true) -> float:
    predicted = np.asarray(predicted)
    true = np.asarray(true)
    if predicted.shape != true.shape:
        raise ValueError("predicted and true labels differ in length")
    if predicted.size == 0:
        raise ValueError("no predictions")
    return float((predicted == true).mean())
