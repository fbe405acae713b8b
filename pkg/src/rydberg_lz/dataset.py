"""Shot records and their CSV on-disk form.

Dataset CSV: ``shot_id,f_prime_V_per_cm_per_us,s_np_nVs,s_r_nVs``.
Ground-truth sidecar: ``shot_id,eta_cm3,volume_cm3``.
Floats are written with ``repr`` so a write/read cycle is lossless and the
bytes depend only on the values.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

__all__ = [
    "DATASET_HEADER",
    "TRUTH_HEADER",
    "DatasetFormatError",
    "ShotRecord",
    "ShotData",
    "GroundTruth",
    "write_dataset_csv",
    "read_dataset_csv",
    "write_truth_csv",
    "read_truth_csv",
]

DATASET_HEADER = ("shot_id", "f_prime_V_per_cm_per_us", "s_np_nVs", "s_r_nVs")
TRUTH_HEADER = ("shot_id", "eta_cm3", "volume_cm3")


class DatasetFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


@dataclass(frozen=True)
class ShotRecord:
    shot_id: int
    f_prime: float  # V/cm/µs, 0 for a shot taken without field sweep
    s_np: float     # nV·s
    s_r: float      # nV·s

    @property
    def s_total(self) -> float:
        return self.s_np + self.s_r


@dataclass(frozen=True)
class ShotData:
    """Column-oriented collection of shots."""

    shot_id: np.ndarray
    f_prime: np.ndarray
    s_np: np.ndarray
    s_r: np.ndarray

    def __post_init__(self):
        cols = [np.asarray(c) for c in (self.shot_id, self.f_prime, self.s_np, self.s_r)]
        n = cols[0].shape
        if any(c.shape != n or c.ndim != 1 for c in cols):
            raise ValueError("ShotData columns must be 1-D and of equal length")
        object.__setattr__(self, "shot_id", cols[0].astype(np.int64))
        for name, col in zip(("f_prime", "s_np", "s_r"), cols[1:]):
            object.__setattr__(self, name, col.astype(float))
        if np.any(self.s_np < 0) or np.any(self.s_r < 0):
            raise ValueError("signals must be >= 0")

    @property
    def s_total(self) -> np.ndarray:
        return self.s_np + self.s_r

    def __len__(self) -> int:
        return int(self.shot_id.size)

    def __iter__(self) -> Iterator[ShotRecord]:
        for i in range(len(self)):
            yield ShotRecord(int(self.shot_id[i]), float(self.f_prime[i]),
                             float(self.s_np[i]), float(self.s_r[i]))

    def subset(self, mask) -> "ShotData":
        return ShotData(self.shot_id[mask], self.f_prime[mask], self.s_np[mask], self.s_r[mask])

    @classmethod
    def from_records(cls, records: Iterable[ShotRecord]) -> "ShotData":
        rows = list(records)
        return cls(np.array([r.shot_id for r in rows], dtype=np.int64),
                   np.array([r.f_prime for r in rows], dtype=float),
                   np.array([r.s_np for r in rows], dtype=float),
                   np.array([r.s_r for r in rows], dtype=float))

    @classmethod
    def empty(cls) -> "ShotData":
        return cls(np.zeros(0, np.int64), np.zeros(0), np.zeros(0), np.zeros(0))


@dataclass(frozen=True)
class GroundTruth:
    shot_id: np.ndarray
    eta: np.ndarray     # cm⁻³
    volume: np.ndarray  # cm³


def _fmt(x: float) -> str:
    return repr(float(x))


def _write(path: Path, header, rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_dataset_csv(path, data: ShotData) -> None:
    _write(path, DATASET_HEADER,
           ((int(i), _fmt(f), _fmt(a), _fmt(b))
            for i, f, a, b in zip(data.shot_id, data.f_prime, data.s_np, data.s_r)))


def write_truth_csv(path, truth: GroundTruth) -> None:
    _write(path, TRUTH_HEADER,
           ((int(i), _fmt(e), _fmt(v)) for i, e, v in zip(truth.shot_id, truth.eta, truth.volume)))


def _read(path, header: tuple[str, ...], nonnegative: tuple[int, ...] = ()) -> list[list]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise DatasetFormatError(path, 1, "file is empty") from None
        if tuple(c.strip() for c in first) != header:
            raise DatasetFormatError(path, 1, f"expected header {','.join(header)}")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DatasetFormatError(path, line_no,
                                         f"expected {len(header)} fields, got {len(row)}")
            try:
                parsed = [int(row[0])] + [float(c) for c in row[1:]]
            except ValueError as exc:
                raise DatasetFormatError(path, line_no, f"cannot parse number ({exc})") from None
            if not all(math.isfinite(v) for v in parsed[1:]):
                raise DatasetFormatError(path, line_no, "non-finite value")
            if any(parsed[c] < 0 for c in nonnegative):
                raise DatasetFormatError(path, line_no, "negative value")
            rows.append(parsed)
    return rows


def read_dataset_csv(path) -> ShotData:
    rows = _read(path, DATASET_HEADER, nonnegative=(1, 2, 3))
    if not rows:
        return ShotData.empty()
    arr = np.array(rows, dtype=float)
    return ShotData(arr[:, 0].astype(np.int64), arr[:, 1], arr[:, 2], arr[:, 3])


def read_truth_csv(path) -> GroundTruth:
    rows = _read(path, TRUTH_HEADER, nonnegative=(1, 2))
    arr = np.array(rows, dtype=float).reshape(-1, 3)
    return GroundTruth(arr[:, 0].astype(np.int64), arr[:, 1], arr[:, 2])
