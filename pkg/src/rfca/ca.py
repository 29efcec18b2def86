"""Forest-driven urban cellular automaton and Markov-chain demand."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np
from scipy import ndimage

from .forest import Forest
from .raster import LIMITED_URBANIZATION, URBANIZATION, InvalidClass, LandClass

STOP_DEMAND = "demand-met"
STOP_NEW_CELLS = "min-new-cells"
STOP_RATE = "min-expansion-rate"
STOP_ITERATIONS = "max-iterations"


class UndefinedRate(ValueError):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    p_threshold: float = 0.8
    alpha: float = 1.0
    window: int = 3
    max_iterations: int = 100
    min_expansion_rate: float = 0.0
    min_new_cells: int = 0
    demand_cells: int = 0
    seed: int = 0
    allow_limited_conversion: bool = False

    def __post_init__(self):
        if not 0 < self.p_threshold <= 1:
            raise ValueError(f"p_threshold must lie in (0, 1], got {self.p_threshold}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 3, got {self.window}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.min_expansion_rate < 0 or self.min_new_cells < 0 or self.demand_cells < 0:
            raise ValueError("thresholds and demand must be non-negative")


@dataclass
class SimulationState:
    grid: np.ndarray  # LandClass codes
    iteration: int = 0
    urban_count_history: list[int] = field(default_factory=list)
    new_cells_history: list[int] = field(default_factory=list)
    converted_total: int = 0

    @classmethod
    def initial(cls, grid) -> "SimulationState":
        grid = np.asarray(grid)
        return cls(grid.copy(), 0, [int(np.count_nonzero(grid == LandClass.URBAN))], [])


@dataclass
class UrbanVotes:
    """Per-cell forest vote fractions for the two conversions into Urban.

    The spatial variables are static over a run, so these are computed once
    and Pg is looked up each step from the current cell class.
    """

    from_non_urban: np.ndarray
    from_limited: np.ndarray

    @classmethod
    def from_forest(cls, forest: Forest, variables: np.ndarray, mask: np.ndarray | None = None):
        """``variables`` is an (S, nrows, ncols) normalized stack; cells
        outside ``mask`` or with any NaN variable get zero votes."""
        variables = np.asarray(variables, dtype=np.float64)
        shape = variables.shape[1:]
        ok = np.all(np.isfinite(variables), axis=0)
        if mask is not None:
            ok &= mask
        a = np.zeros(shape)
        b = np.zeros(shape)
        if ok.any():
            X = variables[:, ok].T
            votes = forest.vote_counts(X)
            a[ok] = votes[:, URBANIZATION - 1] / forest.m
            b[ok] = votes[:, LIMITED_URBANIZATION - 1] / forest.m
        return cls(a, b)

    def global_probability(self, grid: np.ndarray, allow_limited: bool = False) -> np.ndarray:
        pg = np.zeros(grid.shape)
        pg[grid == LandClass.URBAN] = 1.0
        nu = grid == LandClass.NON_URBAN
        pg[nu] = self.from_non_urban[nu]
        if allow_limited:
            lim = grid == LandClass.LIMITED
            pg[lim] = self.from_limited[lim]
        return pg


def global_probability(forest: Forest, cell_class: LandClass, x, allow_limited: bool = False) -> float:
    """Overall development probability of a single cell."""
    cell_class = LandClass(cell_class)
    if cell_class is LandClass.NODATA:
        raise InvalidClass("global probability is undefined for NoData cells")
    if cell_class is LandClass.URBAN:
        return 1.0
    if cell_class is LandClass.NON_URBAN:
        return float(forest.predict_votes(x)[URBANIZATION])
    if not allow_limited:
        return 0.0
    return float(forest.predict_votes(x)[LIMITED_URBANIZATION])


def neighborhood(grid: np.ndarray, cell: tuple[int, int], w: int = 3) -> float:
    """Urban share of the w x w window centered on ``cell`` (center included)."""
    r, c = cell
    h = w // 2
    win = grid[max(r - h, 0): r + h + 1, max(c - h, 0): c + h + 1]
    return np.count_nonzero(win == LandClass.URBAN) / (w * w)


def neighborhood_field(grid: np.ndarray, w: int = 3) -> np.ndarray:
    """Vectorized :func:`neighborhood` for every cell; outside the grid counts as non-urban."""
    urban = (grid == LandClass.URBAN).astype(np.int64)
    counts = ndimage.correlate(urban, np.ones((w, w), dtype=np.int64), mode="constant", cval=0)
    return counts / (w * w)


def perturbation(rng: np.random.Generator, alpha: float, size=None):
    """Stochastic factor ``1 + (-ln g)^alpha`` with g uniform on (0, 1]."""
    gamma = 1.0 - rng.random(size)
    return 1.0 + np.power(-np.log(gamma), alpha)


def conversion_probability(pg, omega, ra):
    return np.clip(np.multiply(np.multiply(pg, omega), ra), 0.0, 1.0)


def step_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng([seed, iteration])


def step(state: SimulationState, votes: UrbanVotes, config: SimulationConfig,
         order: np.ndarray | None = None) -> SimulationState:
    """One synchronous CA update.

    Probabilities are evaluated against the time-t grid only; the per-cell
    perturbation comes from a stream keyed on (seed, iteration), indexed by
    cell. ``order`` evaluates cells one at a time in the given flat-index
    order instead of the vectorized path; the outcome cannot depend on it.
    """
    grid = state.grid
    remaining = config.demand_cells - state.converted_total
    new_grid = grid.copy()
    if remaining > 0:
        ra = perturbation(step_rng(config.seed, state.iteration), config.alpha, grid.shape)
        pg = votes.global_probability(grid, config.allow_limited_conversion)
        if order is None:
            p = conversion_probability(pg, neighborhood_field(grid, config.window), ra)
        else:
            p = np.zeros(grid.shape)
            ncols = grid.shape[1]
            for idx in order:
                r, c = divmod(int(idx), ncols)
                if pg[r, c] > 0:
                    p[r, c] = conversion_probability(pg[r, c], neighborhood(grid, (r, c), config.window), ra[r, c])
        convertible = grid == LandClass.NON_URBAN
        if config.allow_limited_conversion:
            convertible |= grid == LandClass.LIMITED
        flat_p = p.ravel()
        cand = np.flatnonzero(convertible.ravel() & (flat_p > config.p_threshold))
        if len(cand) > remaining:
            # highest probability first, then lowest cell index
            rank = np.lexsort((cand, -flat_p[cand]))
            cand = np.sort(cand[rank[:remaining]])
        new_grid.ravel()[cand] = LandClass.URBAN
        n_new = len(cand)
    else:
        n_new = 0
    return SimulationState(
        new_grid,
        state.iteration + 1,
        state.urban_count_history + [state.urban_count_history[-1] + n_new],
        state.new_cells_history + [n_new],
        state.converted_total + n_new,
    )


def expansion_rate(history) -> float:
    if len(history) < 2:
        raise UndefinedRate("expansion rate needs at least two counts")
    prev, cur = history[-2], history[-1]
    if prev == 0:
        raise UndefinedRate("expansion rate undefined with zero previous urban count")
    return (cur - prev) / prev


@dataclass
class RunResult:
    grid: np.ndarray
    state: SimulationState
    stop_reason: str

    @property
    def iterations(self) -> int:
        return self.state.iteration


def stop_reason(state: SimulationState, config: SimulationConfig) -> str | None:
    if state.converted_total >= config.demand_cells:
        return STOP_DEMAND
    if state.new_cells_history[-1] < config.min_new_cells:
        return STOP_NEW_CELLS
    try:
        if expansion_rate(state.urban_count_history) < config.min_expansion_rate:
            return STOP_RATE
    except UndefinedRate:
        pass
    if state.iteration >= config.max_iterations:
        return STOP_ITERATIONS
    return None


def run(grid: np.ndarray, votes: UrbanVotes, config: SimulationConfig) -> RunResult:
    """Iterate :func:`step` until a stopping condition holds."""
    state = SimulationState.initial(grid)
    while True:
        state = step(state, votes, config)
        reason = stop_reason(state, config)
        if reason:
            return RunResult(state.grid, state, reason)


def run_repeated(grid: np.ndarray, votes: UrbanVotes, config: SimulationConfig, seeds) -> dict:
    """Run once per seed; report mean urban counts and relative std per step.

    Shorter runs are padded with their final count.
    """
    results = [run(grid, votes, replace(config, seed=int(s))) for s in seeds]
    length = max(len(r.state.urban_count_history) for r in results)
    counts = np.array([r.state.urban_count_history + [r.state.urban_count_history[-1]]
                       * (length - len(r.state.urban_count_history)) for r in results], dtype=float)
    mean = counts.mean(axis=0)
    std = counts.std(axis=0)
    rel = np.divide(std, mean, out=np.zeros_like(std), where=mean > 0)
    return {"results": results, "mean_urban": mean, "relative_std": rel}


@dataclass
class MarkovDemand:
    transition_matrix: np.ndarray  # 3x3 over (Urban, NonUrban, Limited)
    projected_counts: np.ndarray  # (horizon + 1, 3); row 0 is the starting counts
    demand: list[int]  # new urban cells required per projected epoch


def estimate_markov_demand(crosstab: np.ndarray, horizon: int = 1, start_counts=None) -> MarkovDemand:
    """Markov projection of class counts.

    ``crosstab[i, j]`` counts cells in class i at t0 and j at t1 (class order
    Urban, NonUrban, Limited). Projection starts from the t1 counts unless
    ``start_counts`` is given. A class absent at t0 keeps an identity row.
    Arithmetic is rational, so one step from the t0 counts returns the t1
    counts exactly.
    """
    ct = np.asarray(crosstab)
    if ct.shape != (3, 3) or (ct < 0).any():
        raise ValueError("crosstab must be a non-negative 3x3 matrix")
    ct = [[Fraction(int(v)) for v in row] for row in ct]
    P = []
    for i, row in enumerate(ct):
        total = sum(row)
        P.append([v / total for v in row] if total else [Fraction(int(i == j)) for j in range(3)])
    if start_counts is None:
        counts = [sum(ct[i][j] for i in range(3)) for j in range(3)]
    else:
        counts = [Fraction(c) for c in start_counts]
    proj = [counts]
    for _ in range(horizon):
        prev = proj[-1]
        proj.append([sum(prev[i] * P[i][j] for i in range(3)) for j in range(3)])
    demand = [max(0, math.floor(proj[n][0] - proj[n - 1][0])) for n in range(1, horizon + 1)]
    return MarkovDemand(np.array(P, dtype=np.float64), np.array(proj, dtype=np.float64), demand)


def crosstab(grid_t0: np.ndarray, grid_t1: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    a = np.asarray(grid_t0).astype(np.int64)
    b = np.asarray(grid_t1).astype(np.int64)
    ok = (a > 0) & (b > 0)
    if mask is not None:
        ok &= mask
    idx = (a[ok] - 1) * 3 + (b[ok] - 1)
    return np.bincount(idx, minlength=9).reshape(3, 3)
