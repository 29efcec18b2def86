"""Command-line entry point: ``rfca <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import ca, forest as rf, validation
from .asciigrid import load_ascii_grid, save_ascii_grid
from .pipeline import EXIT_FATAL, EXIT_OK, ConfigError, load_config, run_pipeline
from .raster import CLASS_MAPPING, DEFAULT_MAPPING, NormalizationStats, Raster, check_aligned, normalize_sigma, reclassify
from .regions import regionalize
from .render import render_map
from .sampling import SamplingPolicy, TrainingSet, build_change_map, stratified_sample
from .tables import CONTRIBUTION_COLUMNS, REGION_COLUMNS, read_adjacency, read_csv, read_index_table, write_csv

log = logging.getLogger("rfca")


def _classes(path, codes):
    mapping = CLASS_MAPPING if codes == "classes" else DEFAULT_MAPPING
    return reclassify(load_ascii_grid(path), mapping)[0]


def _stack(paths, stats=None):
    rasters = [load_ascii_grid(p) for p in paths]
    layers, fitted = [], []
    for i, r in enumerate(rasters):
        if stats is None:
            norm, s = normalize_sigma(r)
        else:
            s = stats[i]
            norm = s.apply(r)
        fitted.append(s)
        layers.append(np.where(r.valid_mask(), norm.values, np.nan))
    return rasters, np.array(layers), fitted


def _names(args):
    return args.names.split(",") if args.names else [os.path.splitext(os.path.basename(p))[0] for p in args.var]


def cmd_cluster(args):
    table = read_index_table(args.table)
    part = regionalize(table, read_adjacency(args.adjacency), args.k, args.metric)
    write_csv(args.out, REGION_COLUMNS, [{"unit_id": u, "cluster": part.cluster_of[u], "region": part.region_of[u]}
                                         for u in table.unit_ids])
    print(f"{part.n_clusters} clusters, {part.n_regions} regions; "
          f"top-2 components explain {part.explained_variance:.4f} of the variance")


def cmd_sample(args):
    c0, c1 = _classes(args.t0, args.codes), _classes(args.t1, args.codes)
    rasters, stack, stats = _stack(args.var)
    check_aligned(c0, c1, *rasters)
    change = build_change_map(c0, c1)
    ts = stratified_sample(change, stack, _names(args), SamplingPolicy(args.n, args.phi, args.seed))
    with open(args.out, "w") as fh:
        fh.write(ts.to_csv())
    if args.stats_out:
        write_csv(args.stats_out, ["feature", "mu", "sigma", "x1", "x2"],
                  [{"feature": n, "mu": s.mu, "sigma": s.sigma, "x1": s.x1, "x2": s.x2}
                   for n, s in zip(_names(args), stats)])
    print(f"{len(ts)} rows{' (truncated)' if ts.truncated else ''}")


def cmd_train(args):
    with open(args.training) as fh:
        ts = TrainingSet.from_csv(fh.read())
    forest = rf.train(ts, args.trees, args.fraction, args.seed, args.max_depth, args.min_leaf)
    with open(args.out, "wb") as fh:
        fh.write(forest.to_bytes())
    if args.dump:
        with open(args.dump, "w") as fh:
            fh.write(forest.dump_text())
    err, excluded = rf.oob_error(forest, ts)
    print(f"trained {forest.m} trees; OOB error {err:.4f} ({excluded} rows without OOB votes)")


def _read_forest(path):
    with open(path, "rb") as fh:
        return rf.Forest.from_bytes(fh.read())


def cmd_contribute(args):
    forest = _read_forest(args.forest)
    with open(args.training) as fh:
        ts = TrainingSet.from_csv(fh.read())
    weights = rf.variable_contribution(forest, ts, args.seed, mode=args.mode)
    write_csv(args.out, CONTRIBUTION_COLUMNS,
              [{"region": args.region, "feature": n, "weight": w} for n, w in zip(forest.feature_names, weights)])


def cmd_demand(args):
    c0, c1 = _classes(args.t0, args.codes), _classes(args.t1, args.codes)
    check_aligned(c0, c1)
    md = ca.estimate_markov_demand(ca.crosstab(c0.values, c1.values), args.horizon)
    rows = [{"epoch": n, "urban": p[0], "non_urban": p[1], "limited": p[2],
             "demand": md.demand[n - 1] if n else None} for n, p in enumerate(md.projected_counts)]
    write_csv(args.out, ["epoch", "urban", "non_urban", "limited", "demand"], rows)


def cmd_simulate(args):
    c0 = _classes(args.t0, args.codes)
    forest = _read_forest(args.forest)
    stats = [NormalizationStats(float(r["mu"]), float(r["sigma"]), float(r["x1"]), float(r["x2"]))
             for r in read_csv(args.stats)]
    rasters, stack, _ = _stack(args.var, stats)
    check_aligned(c0, *rasters)
    votes = ca.UrbanVotes.from_forest(forest, stack)
    cfg = ca.SimulationConfig(args.p_threshold, args.alpha, args.window, args.max_iterations,
                              args.min_expansion_rate, args.min_new_cells, args.demand, args.seed,
                              args.allow_limited)
    result = ca.run(c0.values, votes, cfg)
    save_ascii_grid(c0.like(result.grid), args.out)
    if args.history:
        h = result.state
        write_csv(args.history, ["step", "urban_count", "new_cells"],
                  [{"step": i + 1, "urban_count": u, "new_cells": n}
                   for i, (u, n) in enumerate(zip(h.urban_count_history[1:], h.new_cells_history))])
    print(f"{result.iterations} iterations, {result.state.converted_total} cells converted, "
          f"stopped: {result.stop_reason}")


def cmd_validate(args):
    c0, c1 = _classes(args.t0, args.codes), _classes(args.t1, args.codes)
    sim = _classes(args.sim, "classes")
    conf = validation.change_confusion(c0, c1, sim)

    def safe(fn):
        try:
            return fn(conf)
        except validation.UndefinedMetric:
            return None

    row = {"region": args.region, "fom": safe(validation.fom), "producer": safe(validation.producer_accuracy),
           "user": safe(validation.user_accuracy), "hits": conf.hits, "misses": conf.misses,
           "false_alarms": conf.false_alarms}
    write_csv(args.out, ["region", "fom", "producer", "user", "hits", "misses", "false_alarms"], [row])


def cmd_render(args):
    render_map(load_ascii_grid(args.raster), args.out, kind=args.kind)


def cmd_pipeline(args):
    overrides = dict(s.split("=", 1) for s in args.set)
    if args.workers:
        overrides["run.workers"] = args.workers
    if args.output:
        overrides["run.output"] = args.output
    cfg = load_config(args.config, overrides)
    status, report = run_pipeline(cfg)
    nat = report.get("national", {})
    if nat:
        print(f"national FoM {nat['fom']:.4f} (baseline {nat['baseline_fom']:.4f}) over {nat['repetitions']} runs")
    for rid, r in report["regions"].items():
        print(f"region {rid}: {r['status']}" + (f" ({r['error']})" if r["status"] != "ok" else ""))
    return status


def cmd_synth(args):
    from .synth import write_world
    print(write_world(args.out, args.size, args.seed))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfca", description="Random-forest cellular automata land-change simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=fn)
        return sp

    def codes(sp):
        sp.add_argument("--codes", choices=["casm", "classes"], default="casm",
                        help="input land cover holds source category codes or class codes 1-3")

    sp = add("cluster", cmd_cluster, "group admin units into homogeneous regions")
    sp.add_argument("--table", required=True)
    sp.add_argument("--adjacency", required=True)
    sp.add_argument("--k", type=int, default=6)
    sp.add_argument("--metric", default="pearson", choices=["pearson", "euclidean"])
    sp.add_argument("--out", required=True)

    sp = add("sample", cmd_sample, "build a stratified training set from two epochs")
    sp.add_argument("--t0", required=True)
    sp.add_argument("--t1", required=True)
    sp.add_argument("--var", action="append", required=True)
    sp.add_argument("--names")
    sp.add_argument("--n", type=int, default=2000)
    sp.add_argument("--phi", type=float, default=0.5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--stats-out")
    codes(sp)

    sp = add("train", cmd_train, "train a forest on a training CSV")
    sp.add_argument("--training", required=True)
    sp.add_argument("--trees", type=int, default=80)
    sp.add_argument("--fraction", type=float, default=0.6)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-depth", type=int, default=25)
    sp.add_argument("--min-leaf", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.add_argument("--dump", help="also write a JSON text dump of the trees")

    sp = add("contribute", cmd_contribute, "per-variable contribution weights")
    sp.add_argument("--forest", required=True)
    sp.add_argument("--training", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--mode", choices=["reevaluate", "retrain"], default="reevaluate")
    sp.add_argument("--region", default="all")
    sp.add_argument("--out", required=True)

    sp = add("demand", cmd_demand, "Markov projection of urban demand")
    sp.add_argument("--t0", required=True)
    sp.add_argument("--t1", required=True)
    sp.add_argument("--horizon", type=int, default=2)
    sp.add_argument("--out", required=True)
    codes(sp)

    sp = add("simulate", cmd_simulate, "run the CA for one epoch")
    sp.add_argument("--t0", required=True)
    sp.add_argument("--forest", required=True)
    sp.add_argument("--var", action="append", required=True)
    sp.add_argument("--stats", required=True, help="normalization CSV written by 'sample --stats-out'")
    sp.add_argument("--demand", type=int, required=True)
    sp.add_argument("--p-threshold", type=float, default=0.8)
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--window", type=int, default=3)
    sp.add_argument("--max-iterations", type=int, default=100)
    sp.add_argument("--min-expansion-rate", type=float, default=0.0)
    sp.add_argument("--min-new-cells", type=int, default=0)
    sp.add_argument("--allow-limited", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--history")
    codes(sp)

    sp = add("validate", cmd_validate, "figure of merit and accuracies")
    sp.add_argument("--t0", required=True)
    sp.add_argument("--t1", required=True)
    sp.add_argument("--sim", required=True, help="simulated class raster")
    sp.add_argument("--region", default="all")
    sp.add_argument("--out", required=True)
    codes(sp)

    sp = add("render", cmd_render, "render a raster as a PPM image")
    sp.add_argument("--raster", required=True)
    sp.add_argument("--kind", choices=["class", "ratio"], default="class")
    sp.add_argument("--out", required=True)

    sp = add("pipeline", cmd_pipeline, "run the full pipeline from a config file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override any config key; repeatable")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--output")

    sp = add("synth", cmd_synth, "write a synthetic two-region world and its config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--size", type=int, default=256)
    sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        status = args.func(args)
    except (ConfigError, ValueError, OSError) as e:
        log.error("%s", e)
        return EXIT_FATAL
    return EXIT_OK if status is None else status


if __name__ == "__main__":
    sys.exit(main())
