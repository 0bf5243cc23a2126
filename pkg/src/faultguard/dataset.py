"""
Telemetry ingestion, windowing, min-max normalization and train/val/test splits.

Window collections are kept as stacked arrays (``WindowSet``) rather than
lists of objects; indexing a ``WindowSet`` yields a single ``GridWindow``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_FEATURES = 51
N_FAULT_TYPES = 11
N_FAULT_ZONES = 4
WINDOW_LEN = 16
STRIDE = 8
SPLIT_FRACTIONS = (0.85, 0.05, 0.10)


class DatasetError(ValueError):
    """Malformed telemetry input."""


@dataclass(frozen=True)
class RawRecord:
    features: np.ndarray
    fault_type: int
    fault_zone: int
    seq_index: int


@dataclass
class Records:
    """Column-oriented table of raw records, in stream order."""

    features: np.ndarray  # (N, F)
    fault_type: np.ndarray  # (N,)
    fault_zone: np.ndarray  # (N,)
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.fault_type = np.asarray(self.fault_type, dtype=np.int64)
        self.fault_zone = np.asarray(self.fault_zone, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.features)

    def __getitem__(self, i: int) -> RawRecord:
        i = range(len(self))[i]
        return RawRecord(self.features[i], int(self.fault_type[i]), int(self.fault_zone[i]), i)

    @property
    def seq_index(self) -> np.ndarray:
        return np.arange(len(self))


@dataclass(frozen=True)
class GridWindow:
    data: np.ndarray  # (window_len, F)
    fault_type: int
    fault_zone: int

    @property
    def window_len(self) -> int:
        return self.data.shape[0]


@dataclass
class WindowSet:
    """A stack of windows with both label columns."""

    data: np.ndarray  # (N, window_len, F)
    fault_type: np.ndarray
    fault_zone: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.fault_type = np.asarray(self.fault_type, dtype=np.int64)
        self.fault_zone = np.asarray(self.fault_zone, dtype=np.int64)
        if self.data.ndim != 3:
            raise DatasetError(f"window data must be 3-D, got shape {self.data.shape}")
        if not (len(self.data) == len(self.fault_type) == len(self.fault_zone)):
            raise DatasetError("window data and label lengths differ")

    def __len__(self) -> int:
        return len(self.data)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return GridWindow(self.data[idx], int(self.fault_type[idx]), int(self.fault_zone[idx]))
        return WindowSet(self.data[idx], self.fault_type[idx], self.fault_zone[idx])

    @property
    def window_len(self) -> int:
        return self.data.shape[1]

    @property
    def n_features(self) -> int:
        return self.data.shape[2]

    def labels(self, task: str) -> np.ndarray:
        if task in ("type", "fault_type"):
            return self.fault_type
        if task in ("zone", "fault_zone"):
            return self.fault_zone
        raise ValueError(f"unknown task {task!r}")

    def records(self) -> np.ndarray:
        """All constituent records, shape (N * window_len, F)."""
        return self.data.reshape(-1, self.n_features)

    @classmethod
    def empty(cls, window_len: int = WINDOW_LEN, n_features: int = N_FEATURES) -> WindowSet:
        return cls(np.zeros((0, window_len, n_features)), np.zeros(0), np.zeros(0))

    @classmethod
    def concat(cls, sets) -> WindowSet:
        sets = list(sets)
        return cls(
            np.concatenate([s.data for s in sets]),
            np.concatenate([s.fault_type for s in sets]),
            np.concatenate([s.fault_zone for s in sets]),
        )


@dataclass(frozen=True)
class NormalizationStats:
    per_feature_min: np.ndarray
    per_feature_max: np.ndarray

    def __post_init__(self):
        if np.any(self.per_feature_min > self.per_feature_max):
            raise DatasetError("per-feature min exceeds max")


@dataclass
class DatasetSplit:
    train: WindowSet
    validation: WindowSet
    test: WindowSet
    stats: NormalizationStats | None
    split_seed: int

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for part in (self.train, self.validation, self.test):
            h.update(np.ascontiguousarray(part.data).tobytes())
            h.update(part.fault_type.tobytes())
            h.update(part.fault_zone.tobytes())
        return h.hexdigest()[:16]


def ingest(path) -> Records:
    """Load a telemetry CSV: a header with 51 feature columns plus ``fault_type`` and ``fault_zone``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        for col in ("fault_type", "fault_zone"):
            if col not in header:
                raise DatasetError(f"{path}: header lacks {col!r} column")
        i_type, i_zone = header.index("fault_type"), header.index("fault_zone")
        feat_cols = [i for i in range(len(header)) if i not in (i_type, i_zone)]
        if len(feat_cols) != N_FEATURES:
            raise DatasetError(f"{path}: header has {len(feat_cols)} feature columns, expected {N_FEATURES}")
        feats, types, zones = [], [], []
        # row numbers are 1-based file lines; the header is line 1
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(
                    f"{path}: row {lineno} has {len(row) - 2} feature columns, expected {N_FEATURES}"
                )
            try:
                values = [float(row[i]) for i in feat_cols]
            except ValueError:
                raise DatasetError(f"{path}: row {lineno} has a non-numeric feature") from None
            if not all(math.isfinite(v) for v in values):
                raise DatasetError(f"{path}: row {lineno} has a non-finite feature")
            ft, fz = _parse_label(row[i_type], lineno, path), _parse_label(row[i_zone], lineno, path)
            if not 0 <= ft < N_FAULT_TYPES:
                raise DatasetError(f"{path}: row {lineno} fault_type {ft} outside [0, {N_FAULT_TYPES - 1}]")
            if not 0 <= fz < N_FAULT_ZONES:
                raise DatasetError(f"{path}: row {lineno} fault_zone {fz} outside [0, {N_FAULT_ZONES - 1}]")
            feats.append(values)
            types.append(ft)
            zones.append(fz)
    features = np.array(feats, dtype=np.float64).reshape(-1, N_FEATURES)
    return Records(features, types, zones, [header[i] for i in feat_cols])


def _parse_label(text: str, lineno: int, path) -> int:
    try:
        value = float(text)
    except ValueError:
        raise DatasetError(f"{path}: row {lineno} has a non-numeric label {text!r}") from None
    if not value.is_integer():
        raise DatasetError(f"{path}: row {lineno} has a non-integer label {text!r}")
    return int(value)


def write_csv(records: Records, path) -> None:
    names = records.feature_names or [f"f{i}" for i in range(records.features.shape[1])]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*names, "fault_type", "fault_zone"])
        for x, ft, fz in zip(records.features, records.fault_type, records.fault_zone):
            w.writerow([*(repr(float(v)) for v in x), int(ft), int(fz)])


def window_count(n: int, size: int, stride: int) -> int:
    return max(0, (n - size) // stride + 1) if n >= size else 0


def _majority(labels: np.ndarray) -> int:
    values, counts = np.unique(labels, return_counts=True)
    best = counts.max()
    winners = values[counts == best]
    if len(winners) == 1:
        return int(winners[0])
    # tie: the last record's label if it is among the winners, else the
    # winner that occurs latest in the window
    last_pos = {int(v): int(np.flatnonzero(labels == v)[-1]) for v in winners}
    return max(last_pos, key=last_pos.get)


def make_windows(records: Records, size: int = WINDOW_LEN, stride: int = STRIDE) -> WindowSet:
    """Slide a ``size``-row window over the stream with the given stride.

    Each window takes the majority label of its records per label column.
    """
    if size < 1 or stride < 1:
        raise ValueError("size and stride must be positive")
    n = len(records)
    count = window_count(n, size, stride)
    n_feat = records.features.shape[1] if records.features.ndim == 2 else N_FEATURES
    if count == 0:
        return WindowSet.empty(size, n_feat)
    starts = np.arange(count) * stride
    idx = starts[:, None] + np.arange(size)[None, :]
    data = records.features[idx]
    ft = np.array([_majority(records.fault_type[row]) for row in idx])
    fz = np.array([_majority(records.fault_zone[row]) for row in idx])
    return WindowSet(data, ft, fz)


def fit_normalizer(train: WindowSet) -> NormalizationStats:
    if len(train) == 0:
        raise DatasetError("cannot fit normalizer on an empty training set")
    rec = train.records()
    return NormalizationStats(rec.min(axis=0), rec.max(axis=0))


def apply_normalizer(stats: NormalizationStats, windows: WindowSet) -> WindowSet:
    """Per-feature min-max scaling with training statistics; constant features map to 0.

    Values outside the training range are not clipped.
    """
    span = stats.per_feature_max - stats.per_feature_min
    safe = np.where(span > 0, span, 1.0)
    scaled = (windows.data - stats.per_feature_min) / safe
    scaled = np.where(span > 0, scaled, 0.0)
    return WindowSet(scaled, windows.fault_type, windows.fault_zone)


def split_counts(n: int, fractions=SPLIT_FRACTIONS) -> tuple[int, int, int]:
    n_train = math.floor(fractions[0] * n + 1e-9)
    n_val = math.floor(fractions[1] * n + 1e-9)
    return n_train, n_val, n - n_train - n_val


def split(
    windows: WindowSet,
    fractions=SPLIT_FRACTIONS,
    seed: int = 0,
    shuffle: bool = False,
    normalize: bool = True,
) -> DatasetSplit:
    """Partition windows into train/validation/test.

    The default split is chronological (train earliest). With ``shuffle`` the
    membership is a seeded permutation. When ``normalize`` is set, min-max
    statistics are fitted on the training part and applied to all three.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    n = len(windows)
    if n < 3:
        raise DatasetError(f"need at least 3 windows to split, got {n}")
    n_train, n_val, _ = split_counts(n, fractions)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    train = windows[order[:n_train]]
    val = windows[order[n_train : n_train + n_val]]
    test = windows[order[n_train + n_val :]]
    stats = None
    if normalize:
        stats = fit_normalizer(train)
        train, val, test = (apply_normalizer(stats, w) for w in (train, val, test))
    return DatasetSplit(train, val, test, stats, seed)


STRONG_FRACTION = 8
WEAK_SCALE = 0.25
SUPPLY_AMPLITUDE = 3.0
SAMPLES_PER_CYCLE = 8


def _sign_codes(rng: np.random.Generator, n_classes: int, n_strong: int) -> np.ndarray:
    """Random +-1 codes, redrawn until every class pair differs in some position."""
    while True:
        codes = rng.choice([-1.0, 1.0], size=(n_classes, n_strong))
        if n_classes > 2 ** n_strong:
            return codes
        diff = (codes[:, None, :] != codes[None, :, :]).sum(axis=2)
        if (diff + n_strong * np.eye(n_classes, dtype=int)).min() >= max(1, n_strong // 3):
            return codes


def synth_dataset(
    n_classes: int = 4,
    n_windows: int = 400,
    separation: float = 3.0,
    seed: int = 0,
    window_len: int = WINDOW_LEN,
    n_features: int = N_FEATURES,
    noise: float = 0.1,
    supply_amplitude: float = SUPPLY_AMPLITUDE,
    samples_per_cycle: int = SAMPLES_PER_CYCLE,
) -> DatasetSplit:
    """Desk-scale stand-in for the grid dataset.

    Features come in three-phase triples (120 degrees apart) carrying a shared
    supply oscillation sampled at ``samples_per_cycle`` fixed points per cycle,
    so every window visits the same discrete phase positions. On top of that
    each class adds a mean-shift code and a slow class-specific wave, both
    scaled by ``separation``. One eighth of the features carry a large +-1
    code, the rest a small Gaussian one. Classes are balanced and appear in a
    seeded random order, so the chronological split keeps all classes in
    every part. With ``separation == 0`` the classes are identically
    distributed.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be at least 2")
    if separation < 0:
        raise ValueError("separation must be non-negative")
    if n_windows < n_classes:
        raise DatasetError(f"n_windows ({n_windows}) < n_classes ({n_classes})")
    rng = np.random.default_rng(seed)
    n_strong = max(2, n_features // STRONG_FRACTION)
    codes = WEAK_SCALE * rng.standard_normal((n_classes, n_features))
    codes[:, :n_strong] = _sign_codes(rng, n_classes, n_strong)
    freqs = rng.uniform(0.5, 3.0, size=n_classes)
    phases = rng.uniform(0, 2 * np.pi, size=(n_classes, n_features))
    group = np.arange(n_features) // 3
    group_shift = rng.uniform(0, 2 * np.pi, size=n_features // 3 + 1)
    shift = group_shift[group] + (np.arange(n_features) % 3) * 2 * np.pi / 3
    amplitude = supply_amplitude * rng.uniform(0.5, 1.5, size=n_features // 3 + 1)[group]

    labels = np.arange(n_windows) % n_classes
    labels = labels[rng.permutation(n_windows)]
    t = np.arange(window_len)[:, None] / window_len
    start = rng.integers(0, samples_per_cycle, size=n_windows) / samples_per_cycle
    start = start + rng.uniform(-0.02, 0.02, size=n_windows)

    data = np.empty((n_windows, window_len, n_features))
    for i, k in enumerate(labels):
        theta = 2 * np.pi * (start[i] + t * window_len / samples_per_cycle)
        wave = 0.2 * np.sin(2 * np.pi * freqs[k] * (t + start[i]) + phases[k][None, :])
        data[i] = amplitude * np.sin(theta + shift) + separation * (codes[k][None, :] + wave)
    data += noise * rng.standard_normal(data.shape)

    windows = WindowSet(data, labels, labels % N_FAULT_ZONES)
    return split(windows, seed=seed)


def save_windows(split_: DatasetSplit, directory) -> Path:
    """Persist a split as ``.npy`` matrices plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"split_seed": split_.split_seed, "parts": {}}
    for name in ("train", "validation", "test"):
        part = getattr(split_, name)
        np.save(directory / f"{name}_data.npy", part.data, allow_pickle=False)
        np.save(directory / f"{name}_fault_type.npy", part.fault_type, allow_pickle=False)
        np.save(directory / f"{name}_fault_zone.npy", part.fault_zone, allow_pickle=False)
        manifest["parts"][name] = {"shape": list(part.data.shape), "dtype": str(part.data.dtype)}
    if split_.stats is not None:
        np.save(directory / "stats_min.npy", split_.stats.per_feature_min, allow_pickle=False)
        np.save(directory / "stats_max.npy", split_.stats.per_feature_max, allow_pickle=False)
    manifest["normalized"] = split_.stats is not None
    manifest["fingerprint"] = split_.fingerprint()
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_windows(directory) -> DatasetSplit:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no dataset manifest in {directory}")
    manifest = json.loads(manifest_path.read_text())
    parts = {}
    for name, meta in manifest["parts"].items():
        data = np.load(directory / f"{name}_data.npy", allow_pickle=False)
        if list(data.shape) != meta["shape"]:
            raise DatasetError(f"{name}: stored shape {data.shape} != manifest {meta['shape']}")
        parts[name] = WindowSet(
            data,
            np.load(directory / f"{name}_fault_type.npy", allow_pickle=False),
            np.load(directory / f"{name}_fault_zone.npy", allow_pickle=False),
        )
    stats = None
    if manifest.get("normalized"):
        stats = NormalizationStats(
            np.load(directory / "stats_min.npy", allow_pickle=False),
            np.load(directory / "stats_max.npy", allow_pickle=False),
        )
    out = DatasetSplit(parts["train"], parts["validation"], parts["test"], stats, manifest["split_seed"])
    if out.fingerprint() != manifest["fingerprint"]:
        raise DatasetError(f"{directory}: fingerprint mismatch")
    return out
