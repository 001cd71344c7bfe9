"""Irregularly sampled longitudinal curves and their long-format CSV form."""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class Curve:
    id: str
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        v = np.asarray(self.values, dtype=float).ravel()
        if t.size != v.size:
            raise DataError(f"curve {self.id!r}: {t.size} times but {v.size} values")
        if t.size == 0:
            raise DataError(f"curve {self.id!r} has no observations")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise DataError(f"curve {self.id!r} has non-finite entries")
        t.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class LongitudinalSample:
    """A set of curves observed on individual time grids inside ``domain``."""

    curves: Tuple[Curve, ...]
    domain: Tuple[float, float]

    def __post_init__(self):
        curves = tuple(self.curves)
        a, b = (float(v) for v in self.domain)
        if not b > a:
            raise DataError(f"empty domain [{a}, {b}]")
        ids = [c.id for c in curves]
        if len(set(ids)) != len(ids):
            raise DataError("curve ids must be unique")
        for c in curves:
            if c.times.min() < a or c.times.max() > b:
                raise DataError(f"curve {c.id!r} has times outside [{a}, {b}]")
        object.__setattr__(self, "curves", curves)
        object.__setattr__(self, "domain", (a, b))

    @classmethod
    def from_arrays(cls, times: Sequence, values: Sequence, domain, ids: Optional[Sequence] = None):
        """Build a sample from per-curve time and value sequences."""
        if ids is None:
            ids = [str(i) for i in range(len(times))]
        return cls(tuple(Curve(i, t, v) for i, t, v in zip(ids, times, values)), domain)

    @property
    def n(self) -> int:
        return len(self.curves)

    @property
    def ids(self) -> List[str]:
        return [c.id for c in self.curves]

    @property
    def n_obs(self) -> int:
        return sum(len(c) for c in self.curves)

    def __len__(self) -> int:
        return len(self.curves)

    def __iter__(self):
        return iter(self.curves)

    def __getitem__(self, i):
        return self.curves[i]

    def subset(self, index: Iterable[int]) -> "LongitudinalSample":
        return LongitudinalSample(tuple(self.curves[i] for i in index), self.domain)


_TRANSFORMS: Dict[str, Callable[[float], float]] = {
    "none": lambda v: v,
    "log": math.log,
    "sqrt": math.sqrt,
}


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def read_long_csv(path, domain: Optional[Tuple[float, float]] = None, transform: str = "none") -> LongitudinalSample:
    """Read a ``curve_id,time,value`` long-format CSV file.

    The first three columns are taken as id, time and value whatever their
    header names (e.g. ``id,hour,value``). Rows may appear in any order; each curve's observations are sorted by
    time. Missing rows are simply absent observations. When ``domain`` is
    omitted it is taken as the range of the observed times.

    Raises
    ------
    DataError
        On a missing header, unparsable fields (with the offending line
        number) or values the transform cannot handle.
    """
    if transform not in _TRANSFORMS:
        raise DataError(f"unknown transform {transform!r}")
    fn = _TRANSFORMS[transform]
    raw: "OrderedDict[str, List[Tuple[float, float]]]" = OrderedDict()
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 3 or any(_is_number(h) for h in header[:3]):
            raise DataError(f"{path}:1: expected a header like 'curve_id,time,value', got {','.join(header)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) < 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            cid = row[0].strip()
            try:
                t = float(row[1])
                v = fn(float(row[2]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not (math.isfinite(t) and math.isfinite(v)):
                raise DataError(f"{path}:{lineno}: non-finite entry")
            raw.setdefault(cid, []).append((t, v))
    if not raw:
        raise DataError(f"{path}: no data rows")
    curves = []
    for cid, obs in raw.items():
        arr = np.array(sorted(obs, key=lambda o: o[0]))
        curves.append(Curve(cid, arr[:, 0], arr[:, 1]))
    if domain is None:
        lo = min(c.times[0] for c in curves)
        hi = max(c.times[-1] for c in curves)
        domain = (lo, hi)
    return LongitudinalSample(tuple(curves), domain)


def write_long_csv(sample: LongitudinalSample, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["curve_id", "time", "value"])
        for c in sample:
            for t, v in zip(c.times, c.values):
                w.writerow([c.id, f"{t:.17g}", f"{v:.17g}"])


def align(sample_x: LongitudinalSample, sample_y: LongitudinalSample) -> None:
    """Raise unless both samples list the same curve ids in the same order."""
    if sample_x.ids != sample_y.ids:
        missing = set(sample_x.ids) ^ set(sample_y.ids)
        detail = f"ids present in only one sample: {sorted(missing)[:5]}" if missing else "ids in different order"
        raise DataError(f"X and Y samples are not aligned by curve id ({detail})")


def pair_by_id(sample_x: LongitudinalSample, sample_y: LongitudinalSample):
    """Restrict both samples to their common ids, in X order."""
    common = [i for i in sample_x.ids if i in set(sample_y.ids)]
    if not common:
        raise DataError("X and Y samples share no curve ids")
    xi = {c: k for k, c in enumerate(sample_x.ids)}
    yi = {c: k for k, c in enumerate(sample_y.ids)}
    return sample_x.subset([xi[c] for c in common]), sample_y.subset([yi[c] for c in common])
