"""Run-to-failure ingestion, z-score normalization, RUL labels, windowing and CV splits."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

RUL_CAP = 130
CMAPSS_COLUMNS = 26
CMAPSS_SETTINGS = 3
CACHE_FORMAT = "eclstm-dataset"
CACHE_VERSION = 1


class DataFormatError(ValueError):
    """Malformed input file; message carries the offending row number."""


@dataclass
class UnitSeries:
    """Cycles of one unit: ``cycles`` has shape (T, n, m)."""

    unit_id: int
    cycles: np.ndarray
    cycle_index: np.ndarray | None = None

    def __post_init__(self):
        self.cycles = np.asarray(self.cycles, dtype=np.float64)
        if self.cycles.ndim == 2:
            self.cycles = self.cycles[:, :, None]
        if self.cycle_index is None:
            self.cycle_index = np.arange(1, len(self.cycles) + 1)
        if np.any(np.diff(self.cycle_index) <= 0):
            raise DataFormatError(f"unit {self.unit_id}: cycle index not strictly increasing")

    @property
    def length(self) -> int:
        return len(self.cycles)

    @property
    def n_sensors(self) -> int:
        return self.cycles.shape[1]

    @property
    def samples_per_cycle(self) -> int:
        return self.cycles.shape[2]


# -- loaders -------------------------------------------------------------------

def load_cmapss(path: str | Path, drop_settings: bool = False) -> list[UnitSeries]:
    """Parse a C-MAPSS text file (unit, cycle, 3 settings, 21 sensors per row)."""
    rows: dict[int, list[tuple[int, list[float]]]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != CMAPSS_COLUMNS:
                raise DataFormatError(f"{path}:{lineno}: expected {CMAPSS_COLUMNS} columns, got {len(parts)}")
            try:
                unit, cycle = int(float(parts[0])), int(float(parts[1]))
                values = [float(v) for v in parts[2:]]
            except ValueError as err:
                raise DataFormatError(f"{path}:{lineno}: {err}") from err
            seq = rows.setdefault(unit, [])
            if seq and cycle <= seq[-1][0]:
                raise DataFormatError(f"{path}:{lineno}: unit {unit} cycle {cycle} is not after {seq[-1][0]}")
            seq.append((cycle, values))
    start = CMAPSS_SETTINGS if drop_settings else 0
    units = []
    for unit in sorted(rows):
        idx = np.array([c for c, _ in rows[unit]])
        vals = np.array([v for _, v in rows[unit]])[:, start:]
        units.append(UnitSeries(unit, vals[:, :, None], idx))
    return units


def load_rul_truth(path: str | Path) -> np.ndarray:
    """One true RUL per line, in unit order."""
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    values.append(float(line.split()[0]))
                except ValueError as err:
                    raise DataFormatError(f"{path}:{lineno}: {err}") from err
    return np.array(values)


def load_generic_csv(path: str | Path, samples_per_cycle: int, unit_col: str = "unit",
                     cycle_col: str = "cycle", sensor_cols: Sequence[str] | None = None,
                     sample_col: str | None = None) -> list[UnitSeries]:
    """Read a headered CSV whose rows are samples; each cycle must have exactly m rows."""
    m = int(samples_per_cycle)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        needed = [unit_col, cycle_col] + ([sample_col] if sample_col else [])
        missing = [c for c in needed if c not in header]
        if sensor_cols is None:
            sensor_cols = [c for c in header if c not in needed]
        missing += [c for c in sensor_cols if c not in header]
        if missing:
            raise DataFormatError(f"{path}: missing columns {missing}")
        groups: dict[tuple[str, str], list] = {}
        order: list[tuple[str, str]] = []
        for lineno, row in enumerate(reader, 2):
            key = (row[unit_col], row[cycle_col])
            if key not in groups:
                groups[key] = []
                order.append(key)
            try:
                vals = [float(row[c]) for c in sensor_cols]
                sample = float(row[sample_col]) if sample_col else len(groups[key])
            except (TypeError, ValueError) as err:
                raise DataFormatError(f"{path}:{lineno}: {err}") from err
            groups[key].append((sample, vals))
    per_unit: dict[str, list[tuple[float, np.ndarray]]] = {}
    for key in order:
        samples = sorted(groups[key], key=lambda s: s[0])
        if len(samples) != m:
            raise DataFormatError(f"{path}: unit {key[0]} cycle {key[1]} has {len(samples)} samples, expected {m}")
        block = np.array([v for _, v in samples]).T            # (n, m)
        per_unit.setdefault(key[0], []).append((float(key[1]), block))
    units = []
    for uid in per_unit:
        cyc = sorted(per_unit[uid], key=lambda c: c[0])
        idx = np.array([c for c, _ in cyc])
        units.append(UnitSeries(_as_id(uid), np.stack([b for _, b in cyc]), idx))
    return units


def _as_id(raw: str):
    try:
        return int(float(raw))
    except ValueError:
        return raw


# -- normalization ---------------------------------------------------------------

@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray

    def apply(self, units: Iterable[UnitSeries]) -> list[UnitSeries]:
        scale = np.where(self.constant, 1.0, self.std)
        return [UnitSeries(u.unit_id, (u.cycles - self.mean[:, None]) / scale[:, None], u.cycle_index)
                for u in units]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "constant": self.constant.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.array(d["mean"]), np.array(d["std"]), np.array(d["constant"], dtype=bool))


def fit_normalizer(train: Sequence[UnitSeries]) -> Normalizer:
    """Per-sensor mean and population std over every training cycle and sample."""
    if not train:
        raise ValueError("cannot fit a normalizer on an empty training set")
    stacked = np.concatenate([u.cycles for u in train])         # (N, n, m)
    flat = stacked.transpose(1, 0, 2).reshape(stacked.shape[1], -1)
    mean, std = flat.mean(axis=1), flat.std(axis=1)
    # exact constancy; a rounded mean can leave a spurious ~1e-14 std on flat channels
    constant = np.ptp(flat, axis=1) == 0
    std = np.where(constant, 0.0, std)
    mean = np.where(constant, flat[:, 0] if flat.shape[1] else mean, mean)
    if constant.any():
        log.warning("sensors %s are constant; centred only", np.flatnonzero(constant).tolist())
    return Normalizer(mean, std, constant)


def apply_normalizer(units: Sequence[UnitSeries], stats: Normalizer) -> list[UnitSeries]:
    return stats.apply(units)


# -- labels, windows, examples ------------------------------------------------------

def compute_rul_targets(length: int, cap: float = RUL_CAP) -> np.ndarray:
    """Piece-wise linear target min(cap, T - t) for t = 1..T."""
    t = np.arange(1, length + 1)
    return np.minimum(cap, length - t).astype(np.float64)


@dataclass
class WindowedDataset:
    """Labelled (sequence of windows, RUL) examples, gathered lazily from unit arrays.

    Example ``e`` ends at cycle ``ends[e]`` (1-based) of unit ``example_unit[e]``;
    its windows end at cycles ``ends[e] - L + 1 .. ends[e]``. Windows ending
    before cycle ``w`` do not exist and are zero-filled.
    """

    data: np.ndarray                  # (sum T, n, m) concatenated cycles
    offsets: np.ndarray               # start row of each unit in ``data``
    lengths: np.ndarray               # T of each unit
    unit_ids: np.ndarray
    example_unit: np.ndarray          # index into unit arrays
    ends: np.ndarray
    targets: np.ndarray
    window: int
    seq_len: int
    normalizer: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def n_features(self) -> int:
        return self.data.shape[1]

    @property
    def samples_per_cycle(self) -> int:
        return self.data.shape[2]

    @property
    def example_shape(self) -> tuple[int, ...]:
        return (self.seq_len, self.window) + self.data.shape[1:]

    def example_unit_ids(self) -> np.ndarray:
        return self.unit_ids[self.example_unit]

    def gather_index(self, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Row indices (B, L, w) into ``data`` plus a (B, L) mask of real windows."""
        idx = np.asarray(idx)
        u = self.example_unit[idx]
        t = self.ends[idx]
        win_end = t[:, None] - self.seq_len + 1 + np.arange(self.seq_len)[None, :]
        valid = win_end >= self.window
        cyc = win_end[:, :, None] - self.window + 1 + np.arange(self.window)[None, None, :]
        cyc = np.clip(cyc, 1, self.lengths[u][:, None, None])
        rows = self.offsets[u][:, None, None] + cyc - 1
        return rows, valid

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        rows, valid = self.gather_index(idx)
        x = self.data[rows] * valid[:, :, None, None, None]
        return x, self.targets[np.asarray(idx)]

    def subset_units(self, unit_ids: Iterable) -> "WindowedDataset":
        keep = np.isin(self.example_unit_ids(), np.asarray(list(unit_ids)))
        return self.select(np.flatnonzero(keep))

    def select(self, idx: np.ndarray) -> "WindowedDataset":
        return WindowedDataset(self.data, self.offsets, self.lengths, self.unit_ids,
                               self.example_unit[idx], self.ends[idx], self.targets[idx],
                               self.window, self.seq_len, self.normalizer)

    # -- persistence ------------------------------------------------------------
    def save(self, path: str | Path) -> None:
        meta = json.dumps({"format": CACHE_FORMAT + "-windows", "version": CACHE_VERSION,
                           "window": self.window, "seq_len": self.seq_len, "normalizer": self.normalizer})
        np.savez(path, __meta__=np.array(meta), data=self.data, offsets=self.offsets,
                 lengths=self.lengths, unit_ids=self.unit_ids, example_unit=self.example_unit,
                 ends=self.ends, targets=self.targets)

    @classmethod
    def load(cls, path: str | Path) -> "WindowedDataset":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            arrays = {k: z[k] for k in ("data", "offsets", "lengths", "unit_ids", "example_unit", "ends", "targets")}
        return cls(**arrays, window=meta["window"], seq_len=meta["seq_len"], normalizer=meta["normalizer"])


def make_examples(units: Sequence[UnitSeries], window: int, seq_len: int, cap: float = RUL_CAP,
                  truths: Sequence[float] | None = None,
                  normalizer: Normalizer | None = None) -> WindowedDataset:
    """Build labelled examples.

    Without ``truths`` every end-cycle t in [w, T] of a run-to-failure unit
    yields one example labelled min(cap, T - t). With ``truths`` (test units)
    only the final cycle is used, labelled min(cap, truth).
    """
    if window < 1 or seq_len < 1:
        raise ValueError("window and sequence length must be >= 1")
    if truths is not None and len(truths) != len(units):
        raise ValueError(f"{len(truths)} truth values for {len(units)} units")
    kept, ex_unit, ends, targets = [], [], [], []
    for i, u in enumerate(units):
        if u.length < window:
            log.warning("unit %s has %d cycles < window %d; skipped", u.unit_id, u.length, window)
            continue
        k = len(kept)
        kept.append(u)
        if truths is None:
            t = np.arange(window, u.length + 1)
            ex_unit.append(np.full(len(t), k))
            ends.append(t)
            targets.append(compute_rul_targets(u.length, cap)[t - 1])
        else:
            ex_unit.append(np.array([k]))
            ends.append(np.array([u.length]))
            targets.append(np.array([min(cap, float(truths[i]))]))
    if not kept:
        raise ValueError("no unit is long enough for the requested window")
    lengths = np.array([u.length for u in kept])
    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    return WindowedDataset(
        data=np.concatenate([u.cycles for u in kept]),
        offsets=offsets, lengths=lengths,
        unit_ids=np.array([u.unit_id for u in kept]),
        example_unit=np.concatenate(ex_unit).astype(np.int64),
        ends=np.concatenate(ends).astype(np.int64),
        targets=np.concatenate(targets).astype(np.float64),
        window=int(window), seq_len=int(seq_len),
        normalizer=normalizer.to_dict() if normalizer is not None else {})


def split_cv(unit_ids: Sequence, k: int = 3, seed: int = 0) -> list[list]:
    """Partition units (never windows) into k near-equal folds."""
    ids = list(unit_ids)
    if k < 2:
        raise ValueError("cross validation needs k >= 2")
    if len(ids) < k:
        raise ValueError(f"{len(ids)} units cannot fill {k} folds")
    perm = np.random.default_rng(seed).permutation(len(ids))
    return [[ids[j] for j in part] for part in np.array_split(perm, k)]


# -- dataset cache -------------------------------------------------------------------

@dataclass
class DatasetCache:
    """Normalized train/test units plus the statistics used, ready for windowing."""

    train: list[UnitSeries]
    test: list[UnitSeries]
    truths: np.ndarray | None
    normalizer: Normalizer
    rul_cap: float = RUL_CAP
    meta: dict = field(default_factory=dict)

    def train_examples(self, window: int, seq_len: int, unit_ids=None) -> WindowedDataset:
        units = self.train if unit_ids is None else [u for u in self.train if u.unit_id in set(unit_ids)]
        return make_examples(units, window, seq_len, self.rul_cap, normalizer=self.normalizer)

    def test_examples(self, window: int, seq_len: int) -> WindowedDataset:
        if self.truths is None:
            raise ValueError("cache has no test truths")
        return make_examples(self.test, window, seq_len, self.rul_cap, truths=self.truths,
                             normalizer=self.normalizer)

    def save(self, path: str | Path) -> None:
        arrays = {}
        for split, units in (("train", self.train), ("test", self.test)):
            arrays[f"{split}_data"] = (np.concatenate([u.cycles for u in units]) if units
                                       else np.zeros((0, self.normalizer.mean.size, 1)))
            arrays[f"{split}_lengths"] = np.array([u.length for u in units], dtype=np.int64)
            arrays[f"{split}_ids"] = np.array([u.unit_id for u in units], dtype=np.int64)
            arrays[f"{split}_cycles"] = (np.concatenate([u.cycle_index for u in units]).astype(np.float64)
                                         if units else np.zeros(0))
        if self.truths is not None:
            arrays["truths"] = np.asarray(self.truths, dtype=np.float64)
        meta = json.dumps({"format": CACHE_FORMAT, "version": CACHE_VERSION, "rul_cap": self.rul_cap,
                           "normalizer": self.normalizer.to_dict(), "meta": self.meta})
        np.savez(path, __meta__=np.array(meta), **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "DatasetCache":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta.get("format") != CACHE_FORMAT:
                raise DataFormatError(f"{path}: not a dataset cache")
            splits = {}
            for split in ("train", "test"):
                data, lengths = z[f"{split}_data"], z[f"{split}_lengths"]
                ids, cycles = z[f"{split}_ids"], z[f"{split}_cycles"]
                bounds = np.concatenate([[0], np.cumsum(lengths)])
                splits[split] = [UnitSeries(int(ids[i]), data[bounds[i]:bounds[i + 1]],
                                            cycles[bounds[i]:bounds[i + 1]])
                                 for i in range(len(lengths))]
            truths = z["truths"] if "truths" in z.files else None
        return cls(splits["train"], splits["test"], truths, Normalizer.from_dict(meta["normalizer"]),
                   meta["rul_cap"], meta.get("meta", {}))


def build_cache(train_raw: Sequence[UnitSeries], test_raw: Sequence[UnitSeries] = (),
                truths=None, rul_cap: float = RUL_CAP, meta: dict | None = None) -> DatasetCache:
    """Fit z-score statistics on training units only and normalize both splits."""
    stats = fit_normalizer(train_raw)
    return DatasetCache(stats.apply(train_raw), stats.apply(test_raw),
                        None if truths is None else np.asarray(truths, dtype=float),
                        stats, rul_cap, meta or {})


# -- synthetic run-to-failure data ---------------------------------------------------

def synthetic_units(n_units: int, n_sensors: int = 24, seed: int = 0, min_life: int = 128,
                    max_life: int = 300, truncate: bool = False, samples_per_cycle: int = 1):
    """Exponential-degradation fleet in the C-MAPSS layout.

    Sensors drift along a smooth health index plus noise; a few are flat.
    With ``truncate`` each unit is cut before failure and the true RUL returned.
    """
    rng = np.random.default_rng(seed)
    base = rng.normal(0, 5, n_sensors)
    amp = rng.normal(0, 1.5, n_sensors)
    amp[rng.choice(n_sensors, size=max(1, n_sensors // 5), replace=False)] = 0.0
    units, truths = [], []
    for uid in range(1, n_units + 1):
        life = int(rng.integers(min_life, max_life + 1))
        rate = rng.uniform(3.0, 6.0)
        t = np.arange(1, life + 1) / life
        health = (np.exp(rate * t) - 1) / (np.exp(rate) - 1) + rng.uniform(0, 0.05)
        x = base + health[:, None] * amp + rng.normal(0, 0.15, (life, n_sensors))
        x = np.repeat(x[:, :, None], samples_per_cycle, axis=2)
        if samples_per_cycle > 1:
            x = x + rng.normal(0, 0.05, x.shape)
        if truncate:
            stop = int(rng.integers(max(2, life // 4), life - 5))
            truths.append(life - stop)
            x = x[:stop]
        units.append(UnitSeries(uid, x))
    return (units, np.array(truths, dtype=float)) if truncate else units


def synthetic_split(n_train: int, n_test: int, n_sensors: int = 24, seed: int = 0, min_life: int = 128,
                    max_life: int = 300, samples_per_cycle: int = 1):
    """One synthetic fleet split into run-to-failure training units and truncated test units."""
    units = synthetic_units(n_train + n_test, n_sensors, seed, min_life, max_life,
                            samples_per_cycle=samples_per_cycle)
    rng = np.random.default_rng([seed, 1])
    test, truths = [], []
    for k, u in enumerate(units[n_train:], start=1):
        stop = int(rng.integers(max(2, u.length // 4), u.length - 5))
        test.append(UnitSeries(k, u.cycles[:stop]))
        truths.append(u.length - stop)
    return units[:n_train], test, np.array(truths, dtype=float)


def write_cmapss(path: str | Path, units: Sequence[UnitSeries]) -> None:
    with open(path, "w") as fh:
        for u in units:
            for c, row in zip(u.cycle_index, u.cycles[:, :, 0]):
                vals = " ".join(f"{v:.6f}" for v in row)
                fh.write(f"{u.unit_id} {int(c)} {vals}\n")


def write_rul_truth(path: str | Path, truths: Sequence[float]) -> None:
    Path(path).write_text("".join(f"{int(round(v))}\n" for v in truths))
