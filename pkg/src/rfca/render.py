"""Portable pixmap (binary PPM, P6) map rendering.

Class maps use :data:`CLASS_PALETTE`. Ratio maps blend linearly from
white (0) to dark red (1); cells outside [0, 1] or NaN are drawn black.
"""

from __future__ import annotations

import numpy as np

from .raster import LandClass, Raster

CLASS_PALETTE = {
    LandClass.NODATA: (0, 0, 0),
    LandClass.URBAN: (200, 30, 30),
    LandClass.NON_URBAN: (240, 220, 130),
    LandClass.LIMITED: (60, 110, 200),
}
RATIO_LOW = (255, 255, 255)
RATIO_HIGH = (140, 0, 0)
NODATA_COLOR = (0, 0, 0)


def class_image(values: np.ndarray) -> np.ndarray:
    img = np.zeros(values.shape + (3,), dtype=np.uint8)
    for cls, color in CLASS_PALETTE.items():
        img[values == cls] = color
    return img


def ratio_image(values: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    ok = np.isfinite(v) & (v >= 0) & (v <= 1)
    if valid is not None:
        ok &= valid
    lo, hi = np.array(RATIO_LOW, float), np.array(RATIO_HIGH, float)
    t = np.where(ok, v, 0.0)[..., None]
    img = np.rint(lo + (hi - lo) * t).astype(np.uint8)
    img[~ok] = NODATA_COLOR
    return img


def render_map(raster: Raster, path, kind: str = "class") -> None:
    """Write ``raster`` as a P6 pixmap; ``kind`` is ``'class'`` or ``'ratio'``."""
    if kind == "class":
        img = class_image(raster.values)
    elif kind == "ratio":
        img = ratio_image(raster.values, raster.valid_mask())
    else:
        raise ValueError(f"unknown map kind {kind!r}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{raster.ncols} {raster.nrows}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())
