"""Synthetic two-region world with planted urban-growth rules.

Six administrative units are laid out as vertical strips. Units 1-3 and 4-6
carry opposite socio-economic profiles, so clustering finds two groups and
the chain adjacency keeps each group contiguous. Urban growth between the
two epochs is planted as a frontier process attracted to roads (west) or to
population (east), damped on steep slopes.
"""

from __future__ import annotations

import os

import numpy as np
from scipy import ndimage

from .asciigrid import save_ascii_grid
from .raster import Category, Raster
from .tables import write_csv

NODATA = -9999
VARIABLES = ("dist_road", "dist_city", "slope", "population", "dist_county")

PROFILE_WEST = np.array([0.9, 0.8, 0.3, 0.2, 0.7, 0.1])
PROFILE_EAST = np.array([0.1, 0.3, 0.8, 0.9, 0.2, 0.8])
INDEX_NAMES = ["gdp", "gdp_growth", "gdppc", "gdppc_growth", "secondary_share", "population"]


def _smooth_field(rng, shape, sigma):
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    return (f - f.min()) / (f.max() - f.min())


def _draw_line(mask, p0, p1):
    n = int(max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1]))) + 1
    rr = np.rint(np.linspace(p0[0], p1[0], n)).astype(int)
    cc = np.rint(np.linspace(p0[1], p1[1], n)).astype(int)
    ok = (rr >= 0) & (rr < mask.shape[0]) & (cc >= 0) & (cc < mask.shape[1])
    mask[rr[ok], cc[ok]] = True


def make_world(size: int = 256, seed: int = 0, cellsize: float = 30.0, growth_steps: int = 12) -> dict:
    rng = np.random.default_rng(seed)
    shape = (size, size)
    rows, cols = np.indices(shape)

    units = np.minimum(cols * 6 // size, 5) + 1
    west = units <= 3

    centers = []
    for lo, hi in ((0.08, 0.45), (0.55, 0.92)):
        for _ in range(3):
            centers.append((int(rng.uniform(0.1, 0.9) * size), int(rng.uniform(lo, hi) * size)))
    city_mask = np.zeros(shape, bool)
    for r, c in centers:
        city_mask[r, c] = True
    dist_city = ndimage.distance_transform_edt(~city_mask) * cellsize

    roads = np.zeros(shape, bool)
    for a, b in zip(centers, centers[1:] + centers[:1]):
        _draw_line(roads, a, b)
    for _ in range(3):
        _draw_line(roads, (int(rng.integers(size)), 0), (int(rng.integers(size)), size - 1))
    dist_road = ndimage.distance_transform_edt(~roads) * cellsize

    county = rng.random(shape) < 40 / size**2
    dist_county = ndimage.distance_transform_edt(~county) * cellsize

    slope = 35.0 * _smooth_field(rng, shape, size / 20) ** 1.5
    population = 2000.0 * np.exp(-dist_city / (size * cellsize / 8)) + 150.0 * _smooth_field(rng, shape, 6)

    # land cover at t0
    lc0 = np.where(slope < 12, Category.FARMLAND, Category.FOREST).astype(np.int64)
    lc0[(slope >= 6) & (slope < 12) & (rng.random(shape) < 0.3)] = Category.GRASSLAND
    water = _smooth_field(rng, shape, size / 25) > 0.8
    lc0[water] = Category.WATERBODY
    lc0[ndimage.binary_dilation(water, iterations=2) & ~water] = Category.WETLAND
    urban0 = np.zeros(shape, bool)
    for r, c in centers:
        d = np.hypot(rows - r, cols - c)
        urban0 |= d < rng.uniform(4, 8) + 2 * rng.random(shape)
    urban0 |= roads & (dist_city < 25 * cellsize) & (rng.random(shape) < 0.5)
    lc0[urban0 & ~water] = Category.ARTIFICIAL
    nodata = (rows < 6) & (cols < 6)
    lc0[nodata] = NODATA

    # planted growth
    lc1 = lc0.copy()
    open_land = np.isin(lc0, [Category.FARMLAND, Category.FOREST, Category.GRASSLAND])
    road_pull = np.exp(-dist_road / (12 * cellsize))
    pop_pull = (population / population.max()) ** 2
    suitability = np.where(west, 0.85 * road_pull + 0.15 * pop_pull, 0.3 * road_pull + 0.7 * pop_pull)
    suitability *= np.where(slope > 18, 0.05, 1.0)
    for _ in range(growth_steps):
        urban = lc1 == Category.ARTIFICIAL
        nbrs = ndimage.correlate(urban.astype(int), np.ones((3, 3), int), mode="constant") - urban
        p = 0.9 * suitability * (nbrs / 8.0)
        grow = open_land & ~urban & (rng.random(shape) < p)
        lc1[grow] = Category.ARTIFICIAL

    def masked(a):
        out = np.asarray(a, dtype=np.float64).copy()
        out[nodata] = NODATA
        return out

    variables = {
        "dist_road": masked(dist_road),
        "dist_city": masked(dist_city),
        "slope": masked(slope),
        "population": masked(population),
        "dist_county": masked(dist_county),
    }
    table = np.array([PROFILE_WEST if u <= 3 else PROFILE_EAST for u in range(1, 7)])
    table = np.clip(table + rng.normal(0, 0.04, table.shape), 0, None) * rng.uniform(0.8, 1.2, (6, 1))
    return {
        "landcover_t0": lc0,
        "landcover_t1": lc1,
        "units": units.astype(np.int64),
        "variables": variables,
        "index_table": table,
        "adjacency": [(str(i), str(i + 1)) for i in range(1, 6)],
        "cellsize": cellsize,
    }


CONFIG_TEMPLATE = """\
# Synthetic two-region world
[inputs]
landcover_t0 = landcover_t0.asc
landcover_t1 = landcover_t1.asc
variables = {variables}
units = units.asc
socioeconomic = socioeconomic.csv
adjacency = adjacency.csv

[epochs]
t0 = 2000
t1 = 2010

[regions]
k = 2
metric = pearson

[sampling]
n_total = 2000
phi = 0.5
seed = {seed}

[forest]
m_trees = 80
sample_fraction = 0.6
max_depth = 25
min_leaf = 1
contribution_mode = reevaluate
seed = {seed}

[simulation]
p_threshold = 0.8
alpha = 1.0
window = 3
max_iterations = 100
min_expansion_rate = 0
min_new_cells = 0
allow_limited_conversion = false
horizon = 2
repetitions = 10
seed = {seed}

[run]
output = out
workers = 1
render = true
"""


def write_world(directory, size: int = 256, seed: int = 0) -> str:
    """Generate a world into ``directory`` and return the config path."""
    os.makedirs(directory, exist_ok=True)
    w = make_world(size, seed)
    geo = dict(cellsize=w["cellsize"], origin_x=0.0, origin_y=0.0)
    save_ascii_grid(Raster(w["landcover_t0"], nodata=NODATA, **geo), os.path.join(directory, "landcover_t0.asc"))
    save_ascii_grid(Raster(w["landcover_t1"], nodata=NODATA, **geo), os.path.join(directory, "landcover_t1.asc"))
    save_ascii_grid(Raster(w["units"], nodata=NODATA, **geo), os.path.join(directory, "units.asc"))
    names = []
    for name, values in w["variables"].items():
        save_ascii_grid(Raster(values, nodata=float(NODATA), **geo), os.path.join(directory, f"{name}.asc"))
        names.append(f"{name}.asc")
    write_csv(os.path.join(directory, "socioeconomic.csv"), ["unit_id", *INDEX_NAMES],
              [{"unit_id": str(u + 1), **dict(zip(INDEX_NAMES, row))} for u, row in enumerate(w["index_table"])])
    write_csv(os.path.join(directory, "adjacency.csv"), ["unit_a", "unit_b"],
              [{"unit_a": a, "unit_b": b} for a, b in w["adjacency"]])
    path = os.path.join(directory, "config.ini")
    with open(path, "w") as fh:
        fh.write(CONFIG_TEMPLATE.format(variables=", ".join(names), seed=seed))
    return path
