"""CSV input helpers."""
from __future__ import annotations

import csv
import math

import numpy as np

from .filtering import TimeSeries

__all__ = ["load_timeseries", "DataFormatError"]


class DataFormatError(ValueError):
    """A data file does not follow the expected layout."""


def load_timeseries(path) -> TimeSeries:
    """Read a CSV with header ``t,y[,y2,...]`` into a :class:`TimeSeries`.

    Raises
    ------
    DataFormatError
        For a bad header, no data rows, non-numeric or NaN cells and
        non-increasing times (the message names the file row).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    header = [c.strip().lower() for c in rows[0]]
    if len(header) < 2 or header[0] != "t" or not header[1].startswith("y"):
        raise DataFormatError(f"{path}: header must start with 't,y', got {','.join(rows[0])!r}")
    body = rows[1:]
    if not body:
        raise DataFormatError(f"{path}: no data rows")
    vals = np.empty((len(body), len(header)))
    for i, r in enumerate(body):
        line = i + 2
        if len(r) != len(header):
            raise DataFormatError(f"{path}: row {line} has {len(r)} cells, expected {len(header)}")
        for j, c in enumerate(r):
            try:
                v = float(c)
            except ValueError:
                raise DataFormatError(f"{path}: row {line}, column {header[j]!r}: not a number ({c!r})") from None
            if math.isnan(v):
                raise DataFormatError(f"{path}: row {line}, column {header[j]!r}: NaN cell")
            vals[i, j] = v
    t = vals[:, 0]
    bad = np.nonzero(np.diff(t) <= 0)[0]
    if bad.size:
        raise DataFormatError(f"{path}: time is not increasing at row {bad[0] + 3} "
                              f"(t={t[bad[0] + 1]:g} after {t[bad[0]]:g})")
    return TimeSeries(t, vals[:, 1:])
