"""Change maps between land-cover epochs and the per-line stratified sampler."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .raster import LandClass, Raster, check_aligned

log = logging.getLogger(__name__)

N_CODES = 9


@dataclass
class ChangeMap:
    raster: Raster  # conversion codes 1..9, 0 where either epoch is NoData
    class_counts: dict[int, int]

    @property
    def codes(self) -> np.ndarray:
        return self.raster.values


@dataclass
class TrainingSet:
    features: np.ndarray  # (N, S), values in [0, 1]
    labels: np.ndarray  # (N,), codes 1..9
    feature_names: list[str]
    cells: np.ndarray | None = None  # (N, 2) row/col of each sample, if known
    truncated: bool = False

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.labels) != len(self.features):
            raise ValueError("features must be (N, S) with one label per row")
        if self.features.shape[1] != len(self.feature_names):
            raise ValueError("feature_names does not match the feature count")

    def __len__(self):
        return len(self.labels)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join([*self.feature_names, "label"]) + "\n")
        for row, lab in zip(self.features, self.labels):
            buf.write(",".join(repr(float(v)) for v in row) + f",{int(lab)}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainingSet":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        header = [h.strip() for h in lines[0].split(",")]
        if header[-1] != "label":
            raise ValueError("training CSV must end with a 'label' column")
        rows = [ln.split(",") for ln in lines[1:]]
        feats = np.array([[float(v) for v in r[:-1]] for r in rows]).reshape(len(rows), len(header) - 1)
        labels = np.array([int(r[-1]) for r in rows], dtype=np.int64)
        return cls(feats, labels, header[:-1])


@dataclass(frozen=True)
class SamplingPolicy:
    n_total: int
    phi: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 1 / N_CODES < self.phi <= 1:
            raise ValueError(f"phi must lie in (1/9, 1], got {self.phi}")
        if self.n_total < 0:
            raise ValueError("n_total must be non-negative")


def build_change_map(grid_t0: Raster, grid_t1: Raster) -> ChangeMap:
    check_aligned(grid_t0, grid_t1)
    a = grid_t0.values.astype(np.int64)
    b = grid_t1.values.astype(np.int64)
    valid = (a != LandClass.NODATA) & (b != LandClass.NODATA)
    codes = np.where(valid, 3 * (a - 1) + (b - 1) + 1, 0).astype(np.int8)
    counts = np.bincount(codes[valid].ravel(), minlength=N_CODES + 1)
    return ChangeMap(grid_t0.like(codes, nodata=0), {c: int(counts[c]) for c in range(1, N_CODES + 1)})


def cap_proportions(p: np.ndarray, phi: float) -> np.ndarray:
    """Single-pass cap of per-class proportions at ``phi``.

    Every class at or above ``phi`` is set to ``phi`` and each such cap adds
    ``(1 - phi) / 8`` to every other class. The cap is not iterated.
    """
    p = np.asarray(p, dtype=np.float64)
    capped = np.flatnonzero(p >= phi)
    out = p.copy()
    out[capped] = phi
    share = (1.0 - phi) / (len(p) - 1)
    for i in capped:
        others = np.arange(len(p)) != i
        out[others] += share
    return out


def apportion(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer split of ``total`` proportional to ``weights`` (largest remainder).

    Ties in the fractional parts go to the lower index.
    """
    w = np.asarray(weights, dtype=np.float64)
    if total <= 0 or w.sum() <= 0:
        return np.zeros(len(w), dtype=np.int64)
    exact = w / w.sum() * total
    base = np.floor(exact).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        order = np.lexsort((np.arange(len(w)), -(exact - base)))
        base[order[:short]] += 1
    return base


def _line_rng(seed: int, row: int) -> np.random.Generator:
    return np.random.default_rng([seed, row])


def stratified_sample(change: ChangeMap, variables: np.ndarray, feature_names,
                      policy: SamplingPolicy) -> TrainingSet:
    """Draw the capped per-line stratified sample.

    ``variables`` is an ``(S, nrows, ncols)`` stack of normalized rasters
    aligned with the change map; NaN marks nodata. Lines are raster rows that
    hold at least one valid cell. Each line gets an equal share of
    ``policy.n_total`` (the remainder going to the first lines); within a
    line, classes receive quotas from the capped proportions and cells are
    drawn uniformly without replacement, limited by availability.
    """
    variables = np.asarray(variables, dtype=np.float64)
    codes = change.codes
    if variables.ndim != 3 or variables.shape[1:] != codes.shape:
        raise ValueError(f"variable stack {variables.shape} not aligned with change map {codes.shape}")
    valid = (codes > 0) & np.all(np.isfinite(variables), axis=0)
    lines = np.flatnonzero(valid.any(axis=1))
    n_valid = int(valid.sum())
    truncated = policy.n_total > n_valid
    if truncated:
        log.warning("requested %d samples but only %d valid cells", policy.n_total, n_valid)

    rows_out: list[np.ndarray] = []
    if len(lines):
        per_line = np.full(len(lines), policy.n_total // len(lines), dtype=np.int64)
        per_line[: policy.n_total % len(lines)] += 1
        for row, quota in zip(lines, per_line):
            cols = np.flatnonzero(valid[row])
            line_codes = codes[row, cols]
            counts = np.bincount(line_codes, minlength=N_CODES + 1)[1:]
            p = cap_proportions(counts / counts.sum(), policy.phi)
            n_i = apportion(p, int(quota))
            rng = _line_rng(policy.seed, int(row))
            for code in range(1, N_CODES + 1):
                take = min(int(n_i[code - 1]), int(counts[code - 1]))
                if take == 0:
                    continue
                pool = cols[line_codes == code]
                chosen = np.sort(rng.choice(pool, size=take, replace=False))
                rows_out.append(np.column_stack([np.full(take, row), chosen]))

    cells = np.concatenate(rows_out) if rows_out else np.zeros((0, 2), dtype=np.int64)
    feats = variables[:, cells[:, 0], cells[:, 1]].T if len(cells) else np.zeros((0, variables.shape[0]))
    labels = codes[cells[:, 0], cells[:, 1]] if len(cells) else np.zeros(0, dtype=np.int64)
    return TrainingSet(feats, labels, list(feature_names), cells=cells, truncated=truncated)
