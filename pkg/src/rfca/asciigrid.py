"""ESRI ASCII grid reading and writing."""

from __future__ import annotations

import os

import numpy as np

from .raster import Raster

HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "NODATA_value")


class GridFormatError(ValueError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


def _number(text):
    try:
        return int(text)
    except ValueError:
        return float(text)


def load_ascii_grid(path) -> Raster:
    """Read an ASCII grid. The six header keys must appear in canonical order.

    Integer-valued files come back as ``int64`` arrays, anything else as
    ``float64``.
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    header = {}
    for i, key in enumerate(HEADER_KEYS):
        if i >= len(lines):
            raise GridFormatError(path, i + 1, f"missing header key {key}")
        parts = lines[i].split()
        if len(parts) != 2 or parts[0].lower() != key.lower():
            raise GridFormatError(path, i + 1, f"expected header key {key}")
        try:
            header[key] = _number(parts[1])
        except ValueError:
            raise GridFormatError(path, i + 1, f"non-numeric value for {key}: {parts[1]!r}") from None
    ncols, nrows = header["ncols"], header["nrows"]
    if not (isinstance(ncols, int) and isinstance(nrows, int) and ncols > 0 and nrows > 0):
        raise GridFormatError(path, 1, "ncols and nrows must be positive integers")

    rows = []
    is_int = isinstance(header["NODATA_value"], int)
    lineno = len(HEADER_KEYS)
    for text in lines[len(HEADER_KEYS):]:
        lineno += 1
        tokens = text.split()
        if not tokens:
            continue
        if len(rows) == nrows:
            raise GridFormatError(path, lineno, f"more than nrows={nrows} data rows")
        if len(tokens) != ncols:
            raise GridFormatError(path, lineno, f"expected {ncols} values, found {len(tokens)}")
        try:
            vals = [_number(t) for t in tokens]
        except ValueError as e:
            raise GridFormatError(path, lineno, f"non-numeric token: {e}") from None
        is_int = is_int and all(isinstance(v, int) for v in vals)
        rows.append(vals)
    if len(rows) != nrows:
        raise GridFormatError(path, lineno, f"expected {nrows} data rows, found {len(rows)}")
    values = np.array(rows, dtype=np.int64 if is_int else np.float64)
    nodata = header["NODATA_value"]
    return Raster(values, cellsize=float(header["cellsize"]), origin_x=float(header["xllcorner"]),
                  origin_y=float(header["yllcorner"]), nodata=nodata if is_int else float(nodata))


def _fmt(v, integer):
    # repr is the shortest string that round-trips a float64 (<= 17 digits)
    return str(int(v)) if integer else repr(float(v))


def save_ascii_grid(raster: Raster, path) -> None:
    values = raster.values
    integer = np.issubdtype(values.dtype, np.integer) or values.dtype == bool
    nodata = raster.nodata
    if not integer and np.isnan(values).any():
        values = np.where(np.isnan(values), nodata, values)
    head = [
        f"ncols {raster.ncols}",
        f"nrows {raster.nrows}",
        f"xllcorner {_fmt(raster.origin_x, False)}",
        f"yllcorner {_fmt(raster.origin_y, False)}",
        f"cellsize {_fmt(raster.cellsize, False)}",
        f"NODATA_value {_fmt(nodata, integer)}",
    ]
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write("\n".join(head) + "\n")
        for row in values:
            fh.write(" ".join(_fmt(v, integer) for v in row) + "\n")
    os.replace(tmp, path)
