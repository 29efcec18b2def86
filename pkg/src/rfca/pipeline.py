"""Configuration and end-to-end orchestration.

A run clusters administrative units into regions, then processes every
region in an isolated lane (sample, train, contribution, Markov demand,
repeated simulation, validation) and aggregates the lanes into national
tables, rasters and maps.
"""

from __future__ import annotations

import configparser
import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ca, forest as rf, validation
from .asciigrid import load_ascii_grid, save_ascii_grid
from .raster import (CLASS_MAPPING, DEFAULT_MAPPING, Category, LandClass, Raster, check_aligned,
                     normalize_sigma, reclassify)
from .regions import regionalize
from .render import render_map
from .sampling import SamplingPolicy, build_change_map, stratified_sample
from .tables import (CONTRIBUTION_COLUMNS, FARMLAND_COLUMNS, METRICS_COLUMNS, REGION_COLUMNS,
                     read_adjacency, read_index_table, write_csv)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_PARTIAL, EXIT_FATAL = 0, 1, 2

DEFAULTS = {
    "epochs": {"t0": "2000", "t1": "2010"},
    "regions": {"k": "6", "metric": "pearson"},
    "sampling": {"n_total": "2000", "phi": "0.5", "seed": "0"},
    "forest": {"m_trees": "80", "sample_fraction": "0.6", "max_depth": "25", "min_leaf": "1",
               "max_features": "0", "contribution_mode": "reevaluate", "seed": "0"},
    "simulation": {"p_threshold": "0.8", "alpha": "1.0", "window": "3", "max_iterations": "100",
                   "min_expansion_rate": "0", "min_new_cells": "0", "allow_limited_conversion": "false",
                   "horizon": "2", "repetitions": "10", "seed": "0"},
    "run": {"output": "out", "workers": "1", "render": "true"},
}


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    base_dir: str
    landcover_t0: str
    landcover_t1: str
    variables: list[str]
    variable_names: list[str]
    units: str
    socioeconomic: str
    adjacency: str
    farmland: str | None = None
    mapping: dict = field(default_factory=lambda: dict(DEFAULT_MAPPING))
    epochs: tuple[int, int] = (2000, 2010)
    k: int = 6
    metric: str = "pearson"
    n_total: int = 2000
    phi: float = 0.5
    sampling_seed: int = 0
    m_trees: int = 80
    sample_fraction: float = 0.6
    max_depth: int = 25
    min_leaf: int = 1
    max_features: int = 0
    contribution_mode: str = "reevaluate"
    forest_seed: int = 0
    p_threshold: float = 0.8
    alpha: float = 1.0
    window: int = 3
    max_iterations: int = 100
    min_expansion_rate: float = 0.0
    min_new_cells: int = 0
    allow_limited_conversion: bool = False
    horizon: int = 2
    repetitions: int = 10
    simulation_seed: int = 0
    output: str = "out"
    workers: int = 1
    render: bool = True

    @property
    def epoch_labels(self) -> list[int]:
        t0, t1 = self.epochs
        return [t0, t1] + [t1 + (t1 - t0) * n for n in range(1, self.horizon + 1)]

    def simulation_config(self, demand: int, seed: int) -> ca.SimulationConfig:
        return ca.SimulationConfig(self.p_threshold, self.alpha, self.window, self.max_iterations,
                                   self.min_expansion_rate, self.min_new_cells, demand, seed,
                                   self.allow_limited_conversion)


def _parse_mapping(section) -> dict:
    names = {c.name.lower(): c for c in LandClass}
    out = {}
    for code, cls in section.items():
        if cls.strip().lower() not in names:
            raise ConfigError(f"reclassify: unknown class {cls!r} for code {code}")
        out[int(code)] = names[cls.strip().lower()]
    return out


def load_config(path, overrides: dict | None = None) -> PipelineConfig:
    """Read an INI-style config; ``overrides`` maps ``section.key`` to values."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read_dict(DEFAULTS)
    if not parser.read(path):
        raise ConfigError(f"cannot read config {path}")
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, str(value))
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    try:
        inp = parser["inputs"]
        variables = [v.strip() for v in inp["variables"].split(",") if v.strip()]
        names = ([n.strip() for n in inp["variable_names"].split(",")] if "variable_names" in inp
                 else [os.path.splitext(os.path.basename(v))[0] for v in variables])
        if len(names) != len(variables):
            raise ConfigError("variable_names does not match variables")
        mapping = dict(DEFAULT_MAPPING)
        if inp.get("landcover_codes", "casm").strip() == "classes":
            mapping = dict(CLASS_MAPPING)
        if parser.has_section("reclassify"):
            mapping.update(_parse_mapping(parser["reclassify"]))
        s, f, sim, run = parser["sampling"], parser["forest"], parser["simulation"], parser["run"]
        cfg = PipelineConfig(
            base_dir=base,
            landcover_t0=resolve(inp["landcover_t0"]),
            landcover_t1=resolve(inp["landcover_t1"]),
            variables=[resolve(v) for v in variables],
            variable_names=names,
            units=resolve(inp["units"]),
            socioeconomic=resolve(inp["socioeconomic"]),
            adjacency=resolve(inp["adjacency"]),
            farmland=resolve(inp["farmland"]) if inp.get("farmland") else None,
            mapping=mapping,
            epochs=(parser.getint("epochs", "t0"), parser.getint("epochs", "t1")),
            k=parser.getint("regions", "k"),
            metric=parser.get("regions", "metric"),
            n_total=s.getint("n_total"),
            phi=s.getfloat("phi"),
            sampling_seed=s.getint("seed"),
            m_trees=f.getint("m_trees"),
            sample_fraction=f.getfloat("sample_fraction"),
            max_depth=f.getint("max_depth"),
            min_leaf=f.getint("min_leaf"),
            max_features=f.getint("max_features"),
            contribution_mode=f.get("contribution_mode"),
            forest_seed=f.getint("seed"),
            p_threshold=sim.getfloat("p_threshold"),
            alpha=sim.getfloat("alpha"),
            window=sim.getint("window"),
            max_iterations=sim.getint("max_iterations"),
            min_expansion_rate=sim.getfloat("min_expansion_rate"),
            min_new_cells=sim.getint("min_new_cells"),
            allow_limited_conversion=sim.getboolean("allow_limited_conversion"),
            horizon=sim.getint("horizon"),
            repetitions=sim.getint("repetitions"),
            simulation_seed=sim.getint("seed"),
            output=resolve(run["output"]),
            workers=run.getint("workers"),
            render=run.getboolean("render"),
        )
    except (KeyError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"bad config: {e}") from None
    validate_config(cfg)
    return cfg


def validate_config(cfg: PipelineConfig) -> None:
    missing = [p for p in [cfg.landcover_t0, cfg.landcover_t1, cfg.units, cfg.socioeconomic,
                           cfg.adjacency, *cfg.variables, *([cfg.farmland] if cfg.farmland else [])]
               if not os.path.exists(p)]
    if missing:
        raise ConfigError(f"missing input files: {missing}")
    if cfg.m_trees < 1 or not 0 < cfg.sample_fraction <= 1 or cfg.repetitions < 1 or cfg.workers < 1:
        raise ConfigError("m_trees, repetitions and workers must be >= 1; sample_fraction in (0, 1]")
    if cfg.horizon < 0 or cfg.k < 1 or cfg.n_total < 1:
        raise ConfigError("horizon must be >= 0, k and n_total >= 1")
    SamplingPolicy(cfg.n_total, cfg.phi)
    cfg.simulation_config(0, 0)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# -- region lane -----------------------------------------------------------


@dataclass
class LaneInput:
    region: int
    mask: np.ndarray
    grid_t0: np.ndarray
    grid_t1: np.ndarray
    variables: np.ndarray
    feature_names: list[str]
    cfg: PipelineConfig


def _confusion_dict(c: validation.ChangeConfusion) -> dict:
    return {"hits": c.hits, "misses": c.misses, "false_alarms": c.false_alarms,
            "correct_rejections": c.correct_rejections}


def random_allocation(grid_t0, mask, n_cells, allow_limited, seed) -> np.ndarray:
    """Baseline: convert ``n_cells`` uniformly chosen convertible cells."""
    out = grid_t0.copy()
    convertible = mask & (grid_t0 == LandClass.NON_URBAN)
    if allow_limited:
        convertible |= mask & (grid_t0 == LandClass.LIMITED)
    pool = np.flatnonzero(convertible.ravel())
    pick = np.random.default_rng(seed).choice(pool, size=min(n_cells, len(pool)), replace=False)
    out.ravel()[pick] = LandClass.URBAN
    return out


def run_lane(lane: LaneInput) -> dict:
    """Process one region. Never raises: failures are returned in the result."""
    try:
        return _run_lane(lane)
    except Exception as e:  # lane isolation
        return {"region": lane.region, "status": "failed", "error": f"{type(e).__name__}: {e}",
                "traceback": traceback.format_exc()}


def _run_lane(lane: LaneInput) -> dict:
    cfg, mask = lane.cfg, lane.mask
    g0 = np.where(mask, lane.grid_t0, LandClass.NODATA).astype(np.int8)
    g1 = np.where(mask, lane.grid_t1, LandClass.NODATA).astype(np.int8)
    change = build_change_map(Raster(g0, nodata=0), Raster(g1, nodata=0))
    policy = SamplingPolicy(cfg.n_total, cfg.phi, derive_seed(cfg.sampling_seed, lane.region))
    training = stratified_sample(change, lane.variables, lane.feature_names, policy)

    forest = rf.train(training, cfg.m_trees, cfg.sample_fraction, derive_seed(cfg.forest_seed, lane.region),
                      cfg.max_depth, cfg.min_leaf, cfg.max_features or None)
    oob, oob_excluded = rf.oob_error(forest, training)
    try:
        contribution = rf.variable_contribution(forest, training, derive_seed(cfg.forest_seed, lane.region, 7),
                                                mode=cfg.contribution_mode).tolist()
    except rf.ForestError as e:
        contribution = None
        log.warning("region %d: %s", lane.region, e)

    votes = ca.UrbanVotes.from_forest(forest, lane.variables, mask)
    xt = ca.crosstab(g0, g1, mask)
    markov = ca.estimate_markov_demand(xt, cfg.horizon)
    start = g0 != LandClass.URBAN
    observed_gain = int(np.count_nonzero(mask & start & (g0 != 0) & (g1 == LandClass.URBAN)))
    demands = [observed_gain] + list(markov.demand)

    reps = []
    for rep in range(cfg.repetitions):
        grid = g0
        epochs, histories = [], []
        for e, demand in enumerate(demands):
            scfg = cfg.simulation_config(demand, derive_seed(cfg.simulation_seed, lane.region, rep, e))
            result = ca.run(grid, votes, scfg)
            grid = result.grid
            epochs.append(grid)
            histories.append({"urban": result.state.urban_count_history,
                              "new": result.state.new_cells_history, "stop_reason": result.stop_reason,
                              "converted": result.state.converted_total})
        sim_conf = validation.change_confusion(g0, g1, epochs[0], mask)
        base = random_allocation(g0, mask, histories[0]["converted"], cfg.allow_limited_conversion,
                                 derive_seed(cfg.simulation_seed, lane.region, rep, 99))
        base_conf = validation.change_confusion(g0, g1, base, mask)
        reps.append({"epochs": epochs, "histories": histories, "confusion": sim_conf, "baseline": base_conf})

    t1_hist = [r["histories"][0]["urban"] for r in reps]
    length = max(len(h) for h in t1_hist)
    padded = np.array([h + [h[-1]] * (length - len(h)) for h in t1_hist], dtype=float)
    mean = padded.mean(axis=0)
    rel_std = np.divide(padded.std(axis=0), mean, out=np.zeros(length), where=mean > 0)

    return {
        "region": lane.region,
        "status": "ok",
        "training_csv": training.to_csv(),
        "training_rows": len(training),
        "training_truncated": training.truncated,
        "class_counts": change.class_counts,
        "forest_bytes": forest.to_bytes(),
        "forest_report": forest.report,
        "oob_error": oob,
        "oob_excluded": oob_excluded,
        "contribution": contribution,
        "markov_matrix": markov.transition_matrix.tolist(),
        "markov_projection": markov.projected_counts.tolist(),
        "demands": demands,
        "reps": reps,
        "mean_urban_t1": mean.tolist(),
        "relative_std_t1": rel_std.tolist(),
    }


# -- aggregation -------------------------------------------------------------


def _metrics(confusions, baselines) -> dict:
    def safe(fn, c):
        try:
            return fn(c)
        except validation.UndefinedMetric:
            return float("nan")

    vals = {name: np.array([safe(fn, c) for c in confusions])
            for name, fn in (("fom", validation.fom), ("producer", validation.producer_accuracy),
                             ("user", validation.user_accuracy))}
    base = np.array([safe(validation.fom, c) for c in baselines])
    row = {}
    for name, v in vals.items():
        ok = v[~np.isnan(v)]
        row[name] = float(ok.mean()) if len(ok) else float("nan")
        row[f"{name}_std"] = float(ok.std()) if len(ok) else float("nan")
    okb = base[~np.isnan(base)]
    row["baseline_fom"] = float(okb.mean()) if len(okb) else float("nan")
    for k in ("hits", "misses", "false_alarms"):
        row[k] = float(np.mean([getattr(c, k) for c in confusions]))
    row["repetitions"] = len(confusions)
    return row


def _region_raster(units: Raster, partition) -> np.ndarray:
    regions = np.zeros(units.shape, dtype=np.int64)
    valid = units.valid_mask()
    for unit, region in partition.region_of.items():
        try:
            code = int(float(unit))
        except ValueError:
            raise ConfigError(f"unit id {unit!r} is not numeric and cannot index the unit raster") from None
        regions[valid & (units.values == code)] = region
    return regions


def run_pipeline(cfg: PipelineConfig) -> tuple[int, dict]:
    """Execute the full pipeline and write all outputs under ``cfg.output``.

    Returns ``(exit_status, report)``.
    """
    out = cfg.output
    os.makedirs(out, exist_ok=True)
    for sub in ("regions", "rasters", "maps"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)

    raw0 = load_ascii_grid(cfg.landcover_t0)
    raw1 = load_ascii_grid(cfg.landcover_t1)
    units = load_ascii_grid(cfg.units)
    var_rasters = [load_ascii_grid(p) for p in cfg.variables]
    flag_raster = load_ascii_grid(cfg.farmland) if cfg.farmland else None
    check_aligned(raw0, raw1, units, *var_rasters, *([flag_raster] if flag_raster else []))

    c0, counts0 = reclassify(raw0, cfg.mapping)
    c1, counts1 = reclassify(raw1, cfg.mapping)
    if flag_raster is not None:
        farmland = flag_raster.valid_mask() & (flag_raster.values != 0)
    else:
        farmland = raw0.valid_mask() & (raw0.values == Category.FARMLAND)

    stack, stats_rows = [], []
    for name, r in zip(cfg.variable_names, var_rasters):
        norm, stats = normalize_sigma(r)
        stack.append(np.where(r.valid_mask(), norm.values, np.nan))
        stats_rows.append({"feature": name, "mu": stats.mu, "sigma": stats.sigma, "x1": stats.x1, "x2": stats.x2})
    stack = np.array(stack)
    write_csv(os.path.join(out, "normalization.csv"), ["feature", "mu", "sigma", "x1", "x2"], stats_rows)

    table = read_index_table(cfg.socioeconomic)
    graph = read_adjacency(cfg.adjacency)
    partition = regionalize(table, graph, cfg.k, cfg.metric)
    write_csv(os.path.join(out, "regions.csv"), REGION_COLUMNS,
              [{"unit_id": u, "cluster": partition.cluster_of[u], "region": partition.region_of[u]}
               for u in table.unit_ids])
    region_map = _region_raster(units, partition)
    region_ids = sorted(set(partition.region_of.values()))

    lanes = [LaneInput(r, region_map == r, c0.values, c1.values, stack, list(cfg.variable_names), cfg)
             for r in region_ids]
    if cfg.workers > 1 and len(lanes) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(run_lane, lanes))
    else:
        results = [run_lane(lane) for lane in lanes]

    report = _aggregate(cfg, results, region_map, c0, c1, farmland, partition)
    ok = [r for r in results if r["status"] == "ok"]
    status = EXIT_OK if len(ok) == len(results) else (EXIT_PARTIAL if ok else EXIT_FATAL)
    report["exit_status"] = status
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=_json_default)
    return status, report


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return None if np.isnan(o) else float(o)
    raise TypeError(type(o))


def _clean(v):
    return None if isinstance(v, float) and np.isnan(v) else v


def _aggregate(cfg, results, region_map, c0, c1, farmland, partition) -> dict:
    out = cfg.output
    labels = cfg.epoch_labels
    n_sim_epochs = cfg.horizon + 1
    ok = [r for r in results if r["status"] == "ok"]
    metrics_rows, contribution_rows, history_rows = [], [], []
    region_reports = {}

    for r in results:
        rid = r["region"]
        if r["status"] != "ok":
            region_reports[str(rid)] = {"status": "failed", "error": r["error"]}
            log.error("region %d failed: %s", rid, r["error"])
            continue
        rdir = os.path.join(out, "regions", str(rid))
        os.makedirs(rdir, exist_ok=True)
        with open(os.path.join(rdir, "training.csv"), "w") as fh:
            fh.write(r["training_csv"])
        with open(os.path.join(rdir, "forest.rff"), "wb") as fh:
            fh.write(r["forest_bytes"])
        row = _metrics([rep["confusion"] for rep in r["reps"]], [rep["baseline"] for rep in r["reps"]])
        metrics_rows.append({"region": rid, **row})
        if r["contribution"] is not None:
            for name, w in zip(cfg.variable_names, r["contribution"]):
                contribution_rows.append({"region": rid, "feature": name, "weight": w})
        for k, rep in enumerate(r["reps"]):
            for e, hist in enumerate(rep["histories"]):
                for s, (urban, new) in enumerate(zip(hist["urban"][1:], hist["new"]), start=1):
                    history_rows.append({"region": rid, "repetition": k, "epoch": labels[e + 1], "step": s,
                                         "urban_count": urban, "new_cells": new})
        region_reports[str(rid)] = {
            "status": "ok",
            "units": partition.units_in(rid),
            "cells": int(np.count_nonzero(region_map == rid)),
            "training_rows": r["training_rows"],
            "training_truncated": r["training_truncated"],
            "class_counts": {str(k): v for k, v in r["class_counts"].items()},
            "forest": r["forest_report"],
            "oob_error": _clean(r["oob_error"]),
            "oob_excluded": r["oob_excluded"],
            "contribution": (dict(zip(cfg.variable_names, r["contribution"]))
                             if r["contribution"] is not None else None),
            "markov_matrix": r["markov_matrix"],
            "markov_projection": r["markov_projection"],
            "demand": r["demands"],
            "stop_reasons": [[h["stop_reason"] for h in rep["histories"]] for rep in r["reps"]],
            "iterations": [[len(h["new"]) for h in rep["histories"]] for rep in r["reps"]],
            "mean_urban_t1": r["mean_urban_t1"],
            "relative_std_t1": r["relative_std_t1"],
            "metrics": {k: _clean(v) for k, v in row.items()},
        }

    national = {}
    if ok:
        n_reps = cfg.repetitions
        conf = [sum((r["reps"][k]["confusion"] for r in ok), validation.ChangeConfusion(0, 0, 0, 0))
                for k in range(n_reps)]
        base = [sum((r["reps"][k]["baseline"] for r in ok), validation.ChangeConfusion(0, 0, 0, 0))
                for k in range(n_reps)]
        national = _metrics(conf, base)
        metrics_rows.append({"region": "national", **national})
    write_csv(os.path.join(out, "metrics.csv"), METRICS_COLUMNS, metrics_rows)
    write_csv(os.path.join(out, "contributions.csv"), CONTRIBUTION_COLUMNS, contribution_rows)
    write_csv(os.path.join(out, "history.csv"),
              ["region", "repetition", "epoch", "step", "urban_count", "new_cells"], history_rows)

    # national rasters: first repetition, plus urban frequency over repetitions
    in_ok = np.zeros(region_map.shape, bool)
    for r in ok:
        in_ok |= region_map == r["region"]
    sim_grids, freq = [], []
    for e in range(n_sim_epochs):
        grid = c0.values.copy()
        urban_hits = np.zeros(grid.shape)
        for r in ok:
            m = region_map == r["region"]
            grid[m] = r["reps"][0]["epochs"][e][m]
            for rep in r["reps"]:
                urban_hits[m] += rep["epochs"][e][m] == LandClass.URBAN
        sim_grids.append(grid)
        ratio = np.where(in_ok & (c0.values != LandClass.NODATA), urban_hits / cfg.repetitions, -1.0)
        freq.append(c0.like(ratio, nodata=-1.0))
        sim = c0.like(grid)
        save_ascii_grid(sim, os.path.join(out, "rasters", f"sim_{labels[e + 1]}.asc"))
        save_ascii_grid(freq[-1], os.path.join(out, "rasters", f"urban_frequency_{labels[e + 1]}.asc"))
        if cfg.render:
            render_map(sim, os.path.join(out, "maps", f"sim_{labels[e + 1]}.ppm"))
            render_map(freq[-1], os.path.join(out, "maps", f"urban_frequency_{labels[e + 1]}.ppm"), kind="ratio")
    if cfg.render:
        render_map(c0, os.path.join(out, "maps", f"observed_{labels[0]}.ppm"))
        render_map(c1, os.path.join(out, "maps", f"observed_{labels[1]}.ppm"))

    # farmland accounting over cells of successful regions
    flag = farmland & in_ok
    cell_area = float(c0.cellsize) ** 2
    sim_area = np.zeros(n_sim_epochs + 1)
    sim_area[0] = validation.farmland_series([c0.values], flag, c0.cellsize)[0][0]
    for k in range(cfg.repetitions):
        traj = []
        for e in range(n_sim_epochs):
            grid = c0.values.copy()
            for r in ok:
                m = region_map == r["region"]
                grid[m] = r["reps"][k]["epochs"][e][m]
            traj.append(grid)
        sim_area[1:] += validation.farmland_series(traj, flag, c0.cellsize)[0] / cfg.repetitions
    actual = validation.farmland_series([c0.values, c1.values], flag, c0.cellsize)[0]
    farm_rows = [{"epoch": labels[e], "sim_area": sim_area[e], "actual_area": actual[e] if e < 2 else None}
                 for e in range(len(labels))]
    write_csv(os.path.join(out, "farmland_series.csv"), FARMLAND_COLUMNS, farm_rows)
    try:
        # areas in millions of km2
        fit = validation.series_fit(sim_area[:2] / 1e12, actual / 1e12)
        fit_report = {"std_dev_million_km2": fit.std_dev, "r_squared": fit.r_squared}
    except (validation.UndefinedMetric, ValueError) as e:
        fit_report = {"error": str(e)}

    return {
        "epochs": labels,
        "regions": region_reports,
        "partition": {"cluster_of": partition.cluster_of, "region_of": partition.region_of,
                      "explained_variance": partition.explained_variance},
        "national": {k: _clean(v) for k, v in national.items()},
        "farmland": {"cell_area_m2": cell_area, "sim_area_m2": sim_area.tolist(), "actual_area_m2": actual.tolist(),
                     "fit": fit_report},
    }
