"""Change-detection accuracy and farmland trajectory statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .raster import LandClass, Raster, check_aligned


class UndefinedMetric(ValueError):
    pass


@dataclass(frozen=True)
class ChangeConfusion:
    hits: int
    misses: int
    false_alarms: int
    correct_rejections: int

    def __add__(self, other: "ChangeConfusion") -> "ChangeConfusion":
        return ChangeConfusion(self.hits + other.hits, self.misses + other.misses,
                               self.false_alarms + other.false_alarms,
                               self.correct_rejections + other.correct_rejections)

    @property
    def total(self) -> int:
        return self.hits + self.misses + self.false_alarms + self.correct_rejections


def _as_values(r):
    return r.values if isinstance(r, Raster) else np.asarray(r)


def change_confusion(observed_t0, observed_t1, simulated_t1, mask=None) -> ChangeConfusion:
    """Tally urban-change agreement over cells valid in all three maps.

    Change means non-Urban at t0 and Urban at t1.
    """
    rasters = [r for r in (observed_t0, observed_t1, simulated_t1) if isinstance(r, Raster)]
    check_aligned(*rasters)
    a, b, s = (_as_values(r) for r in (observed_t0, observed_t1, simulated_t1))
    if not a.shape == b.shape == s.shape:
        raise ValueError("rasters differ in shape")
    valid = (a != LandClass.NODATA) & (b != LandClass.NODATA) & (s != LandClass.NODATA)
    if mask is not None:
        valid &= mask
    start = a != LandClass.URBAN
    obs = start & (b == LandClass.URBAN)
    sim = start & (s == LandClass.URBAN)
    return ChangeConfusion(
        int(np.count_nonzero(valid & obs & sim)),
        int(np.count_nonzero(valid & obs & ~sim)),
        int(np.count_nonzero(valid & ~obs & sim)),
        int(np.count_nonzero(valid & ~obs & ~sim)),
    )


def _ratio(num, den, what):
    if den == 0:
        raise UndefinedMetric(f"{what} undefined: zero denominator")
    return num / den


def fom(c: ChangeConfusion) -> float:
    """Figure of merit: hits / (hits + misses + false alarms)."""
    return _ratio(c.hits, c.hits + c.misses + c.false_alarms, "figure of merit")


def producer_accuracy(c: ChangeConfusion) -> float:
    return _ratio(c.hits, c.hits + c.misses, "producer's accuracy")


def user_accuracy(c: ChangeConfusion) -> float:
    return _ratio(c.hits, c.hits + c.false_alarms, "user's accuracy")


def farmland_series(trajectory, farmland_flag, cellsize: float = 30.0) -> tuple[np.ndarray, np.ndarray]:
    """Farmland area per epoch and the loss between successive epochs.

    A cell counts as farmland at an epoch when it is flagged as farmland and
    is still NonUrban in that epoch's grid.
    """
    if farmland_flag is None:
        raise ValueError("a farmland flag raster is required for farmland accounting")
    flag = _as_values(farmland_flag).astype(bool)
    counts = np.array([np.count_nonzero(flag & (_as_values(g) == LandClass.NON_URBAN)) for g in trajectory])
    area = counts * float(cellsize) ** 2
    return area, -np.diff(area)


@dataclass(frozen=True)
class SeriesFit:
    std_dev: float
    r_squared: float


def series_fit(sim, actual) -> SeriesFit:
    """Population std of the residuals and the coefficient of determination."""
    sim = np.asarray(sim, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if sim.shape != actual.shape or sim.ndim != 1 or len(sim) < 2:
        raise ValueError("series must be 1-D, equal length, at least 2 points")
    resid = sim - actual
    ss_tot = float(np.sum((actual - actual.mean()) ** 2))
    if ss_tot == 0:
        raise UndefinedMetric("R-squared undefined for a constant actual series")
    return SeriesFit(float(resid.std()), 1.0 - float(np.sum(resid**2)) / ss_tot)
