import math

import numpy as np
import pytest

from rfca import ca
from rfca.ca import (
    MarkovDemand,
    SimulationConfig,
    SimulationState,
    UndefinedRate,
    UrbanVotes,
    conversion_probability,
    crosstab,
    estimate_markov_demand,
    expansion_rate,
    neighborhood,
    neighborhood_field,
    perturbation,
    run,
    run_repeated,
    step,
)
from rfca.forest import train
from rfca.raster import InvalidClass, LandClass
from rfca.sampling import TrainingSet

U, N, L = int(LandClass.URBAN), int(LandClass.NON_URBAN), int(LandClass.LIMITED)


def _world(shape=(30, 30), seed=0, urban=0.1, limited=0.05):
    rng = np.random.default_rng(seed)
    g = np.full(shape, N, dtype=np.int8)
    g[rng.random(shape) < urban] = U
    g[rng.random(shape) < limited] = L
    votes = UrbanVotes(rng.random(shape), rng.random(shape))
    return g, votes


def _naive_window(grid, r, c, w):
    h = w // 2
    hits = 0
    for dr in range(-h, h + 1):
        for dc in range(-h, h + 1):
            rr, cc = r + dr, c + dc
            if 0 <= rr < grid.shape[0] and 0 <= cc < grid.shape[1] and grid[rr, cc] == U:
                hits += 1
    return hits / (w * w)


@pytest.mark.parametrize("w", [3, 5, 7])
def test_neighborhood_field_matches_window_scan(w):
    g, _ = _world((20, 17), seed=w, urban=0.4)
    field = neighborhood_field(g, w)
    for r in range(g.shape[0]):
        for c in range(g.shape[1]):
            assert field[r, c] == _naive_window(g, r, c, w)
            assert neighborhood(g, (r, c), w) == field[r, c]


def test_neighborhood_examples():
    g = np.full((3, 3), U, dtype=np.int8)
    assert neighborhood(g, (1, 1)) == 1.0
    g[1, 1] = N
    assert neighborhood(g, (1, 1)) == pytest.approx(8 / 9)
    assert neighborhood(np.full((3, 3), N), (1, 1)) == 0.0


def test_perturbation_examples():
    class Fixed:
        def __init__(self, u):
            self.u = u

        def random(self, size=None):
            return self.u

    # gamma = 1 - u = e^-2 gives 1 + 2
    assert perturbation(Fixed(1 - math.exp(-2)), 1.0) == pytest.approx(3.0, abs=1e-12)
    ra = perturbation(np.random.default_rng(0), 0.0, 1000)
    assert np.all(ra == 2.0)


def test_perturbation_is_finite_at_extremes():
    class Fixed:
        def random(self, size=None):
            return 0.0

    # gamma = 1 gives -ln 1 = 0
    assert perturbation(Fixed(), 1.0) == 1.0
    assert perturbation(Fixed(), 0.0) == 2.0


def test_conversion_probability_examples():
    assert conversion_probability(0.0, 0.7, 3.0) == 0.0
    assert conversion_probability(0.5, 0.5, 1.0) == 0.25
    assert conversion_probability(0.9, 0.9, 1.5) == 1.0


def test_global_probability_per_class():
    X = np.random.default_rng(0).random((60, 2))
    y = np.where(X[:, 0] > 0.5, 4, 5)
    f = train(TrainingSet(X, y, ["a", "b"]), m_trees=9)
    assert ca.global_probability(f, LandClass.URBAN, [0.9, 0.5]) == 1.0
    assert ca.global_probability(f, LandClass.NON_URBAN, [0.9, 0.5]) == f.predict_votes([0.9, 0.5])[4]
    assert ca.global_probability(f, LandClass.LIMITED, [0.9, 0.5]) == 0.0
    with pytest.raises(InvalidClass):
        ca.global_probability(f, LandClass.NODATA, [0.9, 0.5])


def test_votes_from_forest_match_scalar_path():
    rng = np.random.default_rng(1)
    X = rng.random((80, 2))
    y = np.where(X[:, 0] > 0.5, 4, 7)
    f = train(TrainingSet(X, y, ["a", "b"]), m_trees=7)
    stack = rng.random((2, 5, 6))
    stack[0, 0, 0] = np.nan
    v = UrbanVotes.from_forest(f, stack)
    assert v.from_non_urban[0, 0] == 0
    for r, c in [(1, 1), (4, 5), (2, 3)]:
        x = stack[:, r, c]
        assert v.from_non_urban[r, c] == ca.global_probability(f, LandClass.NON_URBAN, x)
        assert v.from_limited[r, c] == ca.global_probability(f, LandClass.LIMITED, x, allow_limited=True)


def test_surrounded_cell_converts_with_unanimous_forest():
    g = np.full((3, 3), U, dtype=np.int8)
    g[1, 1] = N
    votes = UrbanVotes(np.ones((3, 3)), np.zeros((3, 3)))
    cfg = SimulationConfig(p_threshold=0.1, alpha=0.0, demand_cells=5)
    nxt = step(SimulationState.initial(g), votes, cfg)
    assert nxt.grid[1, 1] == U
    assert nxt.new_cells_history == [1]


def test_zero_remaining_demand_leaves_grid_unchanged():
    g, votes = _world()
    nxt = step(SimulationState.initial(g), votes, SimulationConfig(demand_cells=0))
    assert np.array_equal(nxt.grid, g)
    assert nxt.new_cells_history == [0]


def test_step_respects_demand_and_picks_highest_probability():
    g = np.full((1, 6), N, dtype=np.int8)
    g[0, 0] = g[0, 5] = U
    pg = np.array([[0, 0.9, 0.95, 0.95, 0.99, 0]])
    cfg = SimulationConfig(p_threshold=0.01, alpha=0.0, window=3, demand_cells=2)
    nxt = step(SimulationState.initial(g), UrbanVotes(pg, np.zeros_like(pg)), cfg)
    # P = pg * omega * 2 with omega 1/9 near the seeds, 0 in the middle
    assert nxt.grid.tolist() == [[U, U, N, N, U, U]]
    assert nxt.converted_total == 2
    one = step(SimulationState.initial(g), UrbanVotes(pg, np.zeros_like(pg)), SimulationConfig(
        p_threshold=0.01, alpha=0.0, demand_cells=1))
    assert one.grid.tolist() == [[U, N, N, N, U, U]]


def test_tie_broken_by_lowest_cell_index():
    g = np.full((1, 5), N, dtype=np.int8)
    g[0, 2] = U
    pg = np.full((1, 5), 0.5)
    cfg = SimulationConfig(p_threshold=0.01, alpha=0.0, demand_cells=1)
    nxt = step(SimulationState.initial(g), UrbanVotes(pg, pg), cfg)
    assert nxt.grid.tolist() == [[N, U, U, N, N]]


def test_limited_cells_only_convert_when_enabled():
    g = np.full((3, 3), U, dtype=np.int8)
    g[1, 1] = L
    votes = UrbanVotes(np.zeros((3, 3)), np.ones((3, 3)))
    off = SimulationConfig(p_threshold=0.1, alpha=0.0, demand_cells=5)
    assert step(SimulationState.initial(g), votes, off).grid[1, 1] == L
    on = SimulationConfig(p_threshold=0.1, alpha=0.0, demand_cells=5, allow_limited_conversion=True)
    assert step(SimulationState.initial(g), votes, on).grid[1, 1] == U


def test_step_order_independence_small():
    g, votes = _world((16, 16), seed=3, urban=0.3)
    cfg = SimulationConfig(p_threshold=0.2, demand_cells=40, seed=9)
    state = SimulationState.initial(g)
    ref = step(state, votes, cfg).grid
    cells = np.arange(g.size)
    checker = np.concatenate([cells[(cells // 16 + cells % 16) % 2 == 0], cells[(cells // 16 + cells % 16) % 2 == 1]])
    assert np.array_equal(step(state, votes, cfg, order=checker).grid, ref)
    assert np.array_equal(step(state, votes, cfg, order=checker[::-1]).grid, ref)


def test_urban_never_decreases_over_a_run():
    g, votes = _world((25, 25), seed=4, urban=0.15)
    res = run(g, votes, SimulationConfig(p_threshold=0.3, demand_cells=120, max_iterations=30, seed=2))
    hist = res.state.urban_count_history
    assert all(b >= a for a, b in zip(hist, hist[1:]))
    assert np.all(res.grid[g == U] == U)
    assert np.array_equal(res.grid == L, g == L)


@pytest.mark.parametrize("hist,rate", [([100, 110], 0.1), ([7, 7], 0.0), ([50, 200], 3.0)])
def test_expansion_rate_examples(hist, rate):
    assert expansion_rate(hist) == pytest.approx(rate)


def test_expansion_rate_undefined():
    with pytest.raises(UndefinedRate):
        expansion_rate([0, 4])
    with pytest.raises(UndefinedRate):
        expansion_rate([4])


def test_stop_reasons():
    g, votes = _world(seed=5, urban=0.2)
    assert run(g, votes, SimulationConfig(demand_cells=0)).stop_reason == ca.STOP_DEMAND
    r = run(g, votes, SimulationConfig(p_threshold=0.2, demand_cells=10**6, min_expansion_rate=1e9))
    assert (r.stop_reason, r.iterations) == (ca.STOP_RATE, 1)
    r = run(g, votes, SimulationConfig(p_threshold=0.2, demand_cells=10**6, min_new_cells=10**6))
    assert (r.stop_reason, r.iterations) == (ca.STOP_NEW_CELLS, 1)
    r = run(g, votes, SimulationConfig(p_threshold=0.2, demand_cells=10**6, max_iterations=7))
    assert (r.stop_reason, r.iterations) == (ca.STOP_ITERATIONS, 7)


def test_run_is_deterministic_under_seed():
    g, votes = _world(seed=6, urban=0.2)
    cfg = SimulationConfig(p_threshold=0.3, demand_cells=60, seed=4)
    assert np.array_equal(run(g, votes, cfg).grid, run(g, votes, cfg).grid)


def test_run_repeated_reports_spread():
    g, votes = _world(seed=7, urban=0.2)
    out = run_repeated(g, votes, SimulationConfig(p_threshold=0.3, demand_cells=50, max_iterations=10), [1, 2, 3])
    assert len(out["results"]) == 3
    assert out["mean_urban"][0] == np.count_nonzero(g == U)
    assert out["relative_std"][0] == 0


def test_config_validation():
    for bad in (dict(p_threshold=0), dict(window=4), dict(window=1), dict(alpha=-1), dict(max_iterations=0)):
        with pytest.raises(ValueError):
            SimulationConfig(**bad)


def test_markov_worked_example():
    ct = np.array([[100, 0, 0], [50, 850, 0], [0, 0, 0]])
    md = estimate_markov_demand(ct, horizon=1)
    assert isinstance(md, MarkovDemand)
    assert md.projected_counts[0].tolist() == [150, 850, 0]
    assert md.projected_counts[1, 0] == pytest.approx(150 + 850 * 50 / 900, abs=1e-9)
    assert md.projected_counts[1, 0] == pytest.approx(197.22222222222223, abs=1e-9)
    assert md.demand == [47]
    # absent class keeps an identity row
    assert md.transition_matrix[2].tolist() == [0, 0, 1]


def test_markov_one_step_reproduces_t1_exactly():
    rng = np.random.default_rng(8)
    for _ in range(20):
        ct = rng.integers(0, 500, (3, 3))
        md = estimate_markov_demand(ct, horizon=1, start_counts=ct.sum(axis=1))
        assert md.projected_counts[1].tolist() == ct.sum(axis=0).astype(float).tolist()


def test_markov_identity_crosstab_is_stationary():
    md = estimate_markov_demand(np.diag([10, 20, 30]), horizon=3)
    assert np.all(md.projected_counts == [10, 20, 30])
    assert md.demand == [0, 0, 0]


def test_crosstab_tally():
    a = np.array([[1, 2, 2], [3, 0, 2]])
    b = np.array([[1, 1, 2], [3, 1, 0]])
    assert crosstab(a, b).tolist() == [[1, 0, 0], [1, 1, 0], [0, 0, 1]]
