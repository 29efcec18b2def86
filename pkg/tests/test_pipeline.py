import json
import os

import numpy as np
import pytest

from rfca import pipeline
from rfca.asciigrid import load_ascii_grid
from rfca.cli import main
from rfca.forest import Forest
from rfca.pipeline import ConfigError, LaneInput, derive_seed, load_config, random_allocation, run_pipeline
from rfca.raster import LandClass
from rfca.synth import make_world, write_world
from rfca.tables import METRICS_COLUMNS, read_csv

FAST = {"forest.m_trees": "10", "simulation.repetitions": "2", "sampling.n_total": "400",
        "simulation.horizon": "1", "run.render": "true"}


@pytest.fixture(scope="module")
def small_world(tmp_path_factory):
    return write_world(tmp_path_factory.mktemp("world"), size=64, seed=3)


@pytest.fixture(scope="module")
def small_run(small_world, tmp_path_factory):
    out = tmp_path_factory.mktemp("out")
    cfg = load_config(small_world, {**FAST, "run.output": str(out)})
    status, report = run_pipeline(cfg)
    return status, report, out


def test_world_has_planted_growth():
    w = make_world(64, seed=1)
    urban0 = np.count_nonzero(w["landcover_t0"] == 80)
    urban1 = np.count_nonzero(w["landcover_t1"] == 80)
    assert urban1 > urban0
    # growth only ever adds urban cells
    assert np.all(w["landcover_t1"][w["landcover_t0"] == 80] == 80)


def test_pipeline_writes_every_output(small_run):
    status, report, out = small_run
    assert status == 0
    for rel in ["metrics.csv", "contributions.csv", "farmland_series.csv", "regions.csv", "history.csv",
                "normalization.csv", "report.json", "rasters/sim_2010.asc", "rasters/sim_2020.asc",
                "rasters/urban_frequency_2010.asc", "maps/sim_2010.ppm", "maps/observed_2000.ppm"]:
        assert (out / rel).exists(), rel
    rows = read_csv(out / "metrics.csv")
    assert list(rows[0]) == METRICS_COLUMNS
    assert rows[-1]["region"] == "national"
    for rid in report["regions"]:
        blob = (out / "regions" / rid / "forest.rff").read_bytes()
        assert Forest.from_bytes(blob).m == 10


def test_pipeline_contributions_sum_to_one(small_run):
    _, _, out = small_run
    rows = read_csv(out / "contributions.csv")
    by_region = {}
    for r in rows:
        by_region.setdefault(r["region"], []).append(float(r["weight"]))
    assert by_region
    for weights in by_region.values():
        assert sum(weights) == pytest.approx(1.0, abs=1e-12)


def test_pipeline_simulated_urban_superset_of_t0(small_run, small_world):
    _, _, out = small_run
    t0 = load_ascii_grid(os.path.join(os.path.dirname(small_world), "landcover_t0.asc")).values
    sim = load_ascii_grid(out / "rasters" / "sim_2010.asc").values
    assert np.all(sim[t0 == 80] == LandClass.URBAN)


def test_report_is_json_and_records_stop_reasons(small_run):
    _, report, out = small_run
    doc = json.loads((out / "report.json").read_text())
    assert doc["exit_status"] == 0
    for r in doc["regions"].values():
        assert len(r["stop_reasons"]) == 2
        assert r["demand"][0] >= 0


def test_farmland_series_non_increasing(small_run):
    _, _, out = small_run
    sim = [float(r["sim_area"]) for r in read_csv(out / "farmland_series.csv")]
    assert all(b <= a for a, b in zip(sim, sim[1:]))


def test_failed_lane_gives_partial_status(small_world, tmp_path, monkeypatch):
    real = pipeline._run_lane

    def flaky(lane):
        if lane.region == 2:
            raise RuntimeError("boom")
        return real(lane)

    monkeypatch.setattr(pipeline, "_run_lane", flaky)
    cfg = load_config(small_world, {**FAST, "run.output": str(tmp_path), "run.render": "false"})
    status, report = run_pipeline(cfg)
    assert status == 1
    assert report["regions"]["2"]["status"] == "failed"
    assert report["regions"]["1"]["status"] == "ok"
    assert "national" in [r["region"] for r in read_csv(tmp_path / "metrics.csv")]


def test_all_lanes_failing_is_fatal(small_world, tmp_path, monkeypatch):
    monkeypatch.setattr(pipeline, "_run_lane", lambda lane: 1 / 0)
    cfg = load_config(small_world, {**FAST, "run.output": str(tmp_path), "run.render": "false"})
    assert run_pipeline(cfg)[0] == 2


def test_config_errors(small_world, tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.ini")
    with pytest.raises(ConfigError):
        load_config(small_world, {"forest.m_trees": "0"})
    with pytest.raises(ConfigError):
        load_config(small_world, {"inputs.units": "nope.asc"})
    with pytest.raises(ConfigError):
        load_config(small_world, {"badkey": "1"})
    with pytest.raises((ConfigError, ValueError)):
        load_config(small_world, {"sampling.phi": "0.05"})


def test_config_override_and_paths(small_world):
    cfg = load_config(small_world, {"simulation.alpha": "0.5"})
    assert cfg.alpha == 0.5
    assert os.path.isabs(cfg.landcover_t0)
    assert cfg.epoch_labels == [2000, 2010, 2020, 2030]


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert len({derive_seed(0, r) for r in range(20)}) == 20


def test_region_without_change_keeps_its_t0_grid(small_world):
    cfg = load_config(small_world, FAST)
    rng = np.random.default_rng(0)
    g0 = np.where(rng.random((20, 20)) < 0.2, LandClass.URBAN, LandClass.NON_URBAN).astype(np.int8)
    lane = LaneInput(1, np.ones((20, 20), bool), g0, g0.copy(), rng.random((2, 20, 20)), ["a", "b"], cfg)
    result = pipeline.run_lane(lane)
    assert result["status"] == "ok"
    assert result["demands"] == [0, 0]
    for rep in result["reps"]:
        for grid in rep["epochs"]:
            assert np.array_equal(grid, g0)


def test_random_allocation_counts():
    g = np.full((10, 10), LandClass.NON_URBAN, dtype=np.int8)
    g[0] = LandClass.URBAN
    mask = np.ones((10, 10), bool)
    out = random_allocation(g, mask, 15, False, seed=0)
    assert np.count_nonzero(out == LandClass.URBAN) == 25
    assert np.all(out[0] == LandClass.URBAN)


def test_cli_stages(tmp_path):
    d = tmp_path / "w"
    assert main(["synth", "--out", str(d), "--size", "48", "--seed", "2"]) == 0
    var = [f"--var={d}/{v}.asc" for v in ("dist_road", "slope", "population")]
    assert main(["cluster", "--table", f"{d}/socioeconomic.csv", "--adjacency", f"{d}/adjacency.csv",
                 "--k", "2", "--out", f"{tmp_path}/regions.csv"]) == 0
    assert len(read_csv(tmp_path / "regions.csv")) == 6
    assert main(["sample", "--t0", f"{d}/landcover_t0.asc", "--t1", f"{d}/landcover_t1.asc", *var,
                 "--n", "300", "--out", f"{tmp_path}/train.csv", "--stats-out", f"{tmp_path}/stats.csv"]) == 0
    assert main(["train", "--training", f"{tmp_path}/train.csv", "--trees", "8",
                 "--out", f"{tmp_path}/f.rff", "--dump", f"{tmp_path}/f.json"]) == 0
    assert main(["contribute", "--forest", f"{tmp_path}/f.rff", "--training", f"{tmp_path}/train.csv",
                 "--out", f"{tmp_path}/contrib.csv"]) == 0
    assert main(["demand", "--t0", f"{d}/landcover_t0.asc", "--t1", f"{d}/landcover_t1.asc",
                 "--out", f"{tmp_path}/demand.csv"]) == 0
    assert main(["simulate", "--t0", f"{d}/landcover_t0.asc", "--forest", f"{tmp_path}/f.rff", *var,
                 "--stats", f"{tmp_path}/stats.csv", "--demand", "30", "--p-threshold", "0.3",
                 "--out", f"{tmp_path}/sim.asc", "--history", f"{tmp_path}/hist.csv"]) == 0
    assert main(["validate", "--t0", f"{d}/landcover_t0.asc", "--t1", f"{d}/landcover_t1.asc",
                 "--sim", f"{tmp_path}/sim.asc", "--out", f"{tmp_path}/val.csv"]) == 0
    assert main(["render", "--raster", f"{tmp_path}/sim.asc", "--out", f"{tmp_path}/sim.ppm"]) == 0
    assert (tmp_path / "sim.ppm").read_bytes().startswith(b"P6\n48 48\n")


def test_cli_pipeline_and_fatal_exit(small_world, tmp_path, capsys):
    sets = [f"--set={k}={v}" for k, v in FAST.items()]
    assert main(["pipeline", "--config", small_world, *sets, "--output", str(tmp_path)]) == 0
    assert "national FoM" in capsys.readouterr().out
    assert main(["pipeline", "--config", str(tmp_path / "absent.ini")]) == 2
