"""Grid data model, land-class reclassification and normalization.

Rasters are stored as 2-D numpy arrays in row-major order with row 0 at the
top (north), the same layout as the ESRI ASCII grid files handled by
:mod:`rfca.asciigrid`.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Mapping

import numpy as np


class RasterError(ValueError):
    pass


class GeometryMismatch(RasterError):
    pass


class DegenerateRange(RasterError):
    pass


class UnmappedCode(RasterError):
    def __init__(self, code, index):
        super().__init__(f"unmapped category code {code!r} at cell index {index}")
        self.code = code
        self.index = index


class InvalidClass(RasterError):
    pass


class LandClass(IntEnum):
    NODATA = 0
    URBAN = 1
    NON_URBAN = 2
    LIMITED = 3

    @property
    def index(self) -> int:
        if self is LandClass.NODATA:
            raise InvalidClass("NoData has no conversion index")
        return int(self) - 1


VALID_CLASSES = (LandClass.URBAN, LandClass.NON_URBAN, LandClass.LIMITED)


class Category(IntEnum):
    """Source land-cover categories (GlobeLand30-style codes)."""

    FARMLAND = 10
    FOREST = 20
    GRASSLAND = 30
    SHRUBLAND = 40
    WETLAND = 50
    WATERBODY = 60
    TUNDRA = 70
    ARTIFICIAL = 80
    BARE = 90
    SNOW_ICE = 100
    UNKNOWN = 255


DEFAULT_MAPPING: dict[int, LandClass] = {
    Category.ARTIFICIAL: LandClass.URBAN,
    Category.FARMLAND: LandClass.NON_URBAN,
    Category.FOREST: LandClass.NON_URBAN,
    Category.GRASSLAND: LandClass.NON_URBAN,
    Category.SHRUBLAND: LandClass.NON_URBAN,
    Category.BARE: LandClass.NON_URBAN,
    Category.WETLAND: LandClass.LIMITED,
    Category.WATERBODY: LandClass.LIMITED,
    Category.TUNDRA: LandClass.LIMITED,
    Category.SNOW_ICE: LandClass.LIMITED,
    Category.UNKNOWN: LandClass.NODATA,
}

# Identity mapping for rasters already holding LandClass codes.
CLASS_MAPPING: dict[int, LandClass] = {int(c): c for c in LandClass}


@dataclass(frozen=True)
class Raster:
    """A georeferenced grid. ``values`` has shape ``(nrows, ncols)``."""

    values: np.ndarray
    cellsize: float = 30.0
    origin_x: float = 0.0
    origin_y: float = 0.0
    nodata: float = -9999

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.size == 0:
            raise RasterError(f"raster values must be a non-empty 2-D array, got shape {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def nrows(self) -> int:
        return self.values.shape[0]

    @property
    def ncols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def geometry(self) -> tuple:
        return (self.ncols, self.nrows, float(self.cellsize), float(self.origin_x), float(self.origin_y))

    def valid_mask(self) -> np.ndarray:
        v = self.values
        mask = v != self.nodata
        if np.issubdtype(v.dtype, np.floating):
            mask &= ~np.isnan(v)
        return mask

    def like(self, values, nodata=None) -> "Raster":
        """Same geometry, new values."""
        return replace(self, values=np.asarray(values), nodata=self.nodata if nodata is None else nodata)


def check_aligned(*rasters: Raster) -> None:
    """Raise :class:`GeometryMismatch` unless all rasters share one geometry."""
    if not rasters:
        return
    ref = rasters[0].geometry
    for i, r in enumerate(rasters[1:], start=1):
        if r.geometry != ref:
            raise GeometryMismatch(f"raster {i} geometry {r.geometry} differs from {ref}")


def reclassify(source: Raster, mapping: Mapping[int, LandClass] = DEFAULT_MAPPING):
    """Map raw category codes to :class:`LandClass`.

    Returns the class raster (``nodata`` = ``LandClass.NODATA``) and a dict
    of per-class cell counts. Source nodata cells become NoData.
    """
    values = source.values
    valid = source.valid_mask()
    out = np.full(values.shape, LandClass.NODATA, dtype=np.int8)
    codes = np.unique(values[valid])
    lookup = {int(k): LandClass(v) for k, v in mapping.items()}
    for code in codes:
        if code != int(code) or int(code) not in lookup:
            idx = int(np.flatnonzero(valid.ravel() & (values.ravel() == code))[0])
            raise UnmappedCode(code.item(), idx)
        out[valid & (values == code)] = lookup[int(code)]
    counts = {c: int(np.count_nonzero(out == c)) for c in LandClass}
    return source.like(out, nodata=int(LandClass.NODATA)), counts


def conversion_code(src: LandClass, dst: LandClass) -> int:
    """Code 1..9 of the directed conversion ``src -> dst``."""
    src, dst = LandClass(src), LandClass(dst)
    if LandClass.NODATA in (src, dst):
        raise InvalidClass("conversion involving NoData has no code")
    return 3 * src.index + dst.index + 1


def decode_conversion(code: int) -> tuple[LandClass, LandClass]:
    if not 1 <= code <= 9:
        raise InvalidClass(f"conversion code {code} outside 1..9")
    src, dst = divmod(int(code) - 1, 3)
    return LandClass(src + 1), LandClass(dst + 1)


URBANIZATION = conversion_code(LandClass.NON_URBAN, LandClass.URBAN)
LIMITED_URBANIZATION = conversion_code(LandClass.LIMITED, LandClass.URBAN)


@dataclass(frozen=True)
class NormalizationStats:
    mu: float
    sigma: float
    x1: float
    x2: float

    @classmethod
    def fit(cls, data: np.ndarray) -> "NormalizationStats":
        data = np.asarray(data, dtype=np.float64).ravel()
        if data.size == 0 or np.unique(data).size < 2:
            raise DegenerateRange("three-sigma normalization needs at least two distinct values")
        mu = float(data.mean())
        # mean absolute deviation, as the formula is written (not the RMS)
        sigma = float(np.abs(mu - data).mean())
        x1 = max(mu - 3 * sigma, float(data.min()))
        x2 = min(mu + 3 * sigma, float(data.max()))
        if not x1 < x2:
            raise DegenerateRange(f"clip bounds collapse: x1={x1}, x2={x2}")
        return cls(mu, sigma, x1, x2)

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.clip((x - self.x1) / (self.x2 - self.x1), 0.0, 1.0)

    def apply(self, raster: Raster) -> Raster:
        """Normalize ``raster`` with these stored statistics; nodata kept."""
        valid = raster.valid_mask()
        out = np.full(raster.shape, float(raster.nodata))
        out[valid] = self.transform(raster.values[valid])
        return raster.like(out)


def normalize_sigma(values: Raster) -> tuple[Raster, NormalizationStats]:
    """Piecewise three-sigma normalization of the valid cells into [0, 1]."""
    valid = values.valid_mask()
    stats = NormalizationStats.fit(values.values[valid])
    return stats.apply(values), stats


def normalize_minmax(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        raise DegenerateRange("min-max normalization of a constant vector")
    return (v - lo) / (hi - lo)
