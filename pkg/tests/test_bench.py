import json
import math
import os
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from navtune import bench, nav, pipeline, world
from navtune.stats import DegenerateSamplesError, betainc_reg, welch_t

from conftest import make_gap_grid


# --------------------------------------------------------------------------
# Welch's t-test
# --------------------------------------------------------------------------


def test_welch_identical_samples():
    r = welch_t([3.0, 3.0, 3.0], [3.0, 3.0, 3.0])
    assert r.t == 0.0 and r.p == 1.0


def test_welch_hand_computed_example():
    r = welch_t([1, 2, 3, 4, 5], [6, 7, 8, 9, 10])
    assert abs(r.t + 5.0) < 1e-9
    assert r.df == pytest.approx(8.0)
    assert abs(r.p - 0.00105) < 1e-5


def test_welch_null_behavior_with_jitter():
    a = [5.0, 6.0, 7.0, 8.0]
    b = [v + 1e-9 for v in a]
    assert welch_t(a, b).p > 0.5


def test_welch_degenerate_cases():
    with pytest.raises(DegenerateSamplesError):
        welch_t([1.0], [2.0, 3.0])
    with pytest.raises(DegenerateSamplesError):
        welch_t([1.0, 1.0], [2.0, 2.0])  # zero variance, unequal means


@settings(max_examples=40, deadline=None)
@given(
    a=st.lists(st.floats(-50, 50), min_size=2, max_size=10),
    b=st.lists(st.floats(-50, 50), min_size=2, max_size=10),
    shift=st.floats(-100, 100),
)
def test_welch_invariances(a, b, shift):
    try:
        base = welch_t(a, b)
    except DegenerateSamplesError:
        return
    assert 0.0 < base.p <= 1.0
    swapped = welch_t(b, a)
    assert swapped.t == pytest.approx(-base.t, abs=1e-12)
    assert swapped.p == pytest.approx(base.p, abs=1e-12)
    shifted = welch_t([v + shift for v in a], [v + shift for v in b])
    assert shifted.p == pytest.approx(base.p, abs=1e-9)


def test_betainc_against_scipy():
    from scipy.special import betainc as scipy_betainc

    rng = np.random.default_rng(1)
    for _ in range(200):
        a = float(rng.uniform(0.2, 30))
        b = float(rng.uniform(0.2, 30))
        x = float(rng.uniform(0, 1))
        assert betainc_reg(a, b, x) == pytest.approx(scipy_betainc(a, b, x), abs=1e-12)


# --------------------------------------------------------------------------
# Suite generation
# --------------------------------------------------------------------------


def test_suite_single_env_reproducible():
    a = bench.generate_suite(1, seed=8)
    b = bench.generate_suite(1, seed=8)
    assert np.array_equal(a[0].grid.cells, b[0].grid.cells)
    assert a[0].meta == b[0].meta


def test_suite_desk_preset_bands():
    envs = bench.generate_suite(30, seed=3)
    assert len(envs) == 30
    bands = [env.meta["band"] for env in envs]
    assert bands.count("easy") == 10
    assert bands.count("medium") == 10
    assert bands.count("pinch") == 10


def test_suite_round_trip(tmp_path):
    envs = bench.generate_suite(4, seed=5)
    bench.save_suite(envs, str(tmp_path))
    loaded = bench.load_suite(str(tmp_path))
    assert [e.name for e in loaded] == [e.name for e in envs]
    for a, b in zip(envs, loaded):
        assert np.array_equal(a.grid.cells, b.grid.cells)


def test_variant_spec_validation():
    with pytest.raises(ValueError):
        bench.VariantSpec("broken", ())
    names = [v.name for v in bench.STANDARD_VARIANTS]
    assert names == ["default", "A", "A+c", "A+B", "A+B+c", "A+B+D", "A+B+D+c"]


# --------------------------------------------------------------------------
# Constructed-gap example: default seals, learned inflation passes
# --------------------------------------------------------------------------


def test_gap_sealed_for_default_but_not_learned():
    grid = make_gap_grid(gap_cells=3)  # 0.45 m gap
    gap_width = 3 * grid.resolution
    # geometry: the gap is narrower than twice (footprint + default inflation)
    assert gap_width < 2 * (nav.FOOTPRINT_RADIUS + nav.DEFAULT_PARAMETERS.inflation_radius)
    ctx = nav.NavContext(grid)
    default_run = pipeline.run_episode(grid, nav.DEFAULT_PARAMETERS, ctx=ctx)
    assert default_run.outcome in ("stuck", "timeout")
    assert default_run.traversal_time_s == pytest.approx(50.0, abs=0.2)
    learned = replace(nav.DEFAULT_PARAMETERS, inflation_radius=0.02, max_vel_x=0.25)
    assert gap_width >= 2 * (nav.FOOTPRINT_RADIUS + learned.inflation_radius)
    learned_run = pipeline.run_episode(grid, learned, ctx=ctx)
    assert learned_run.outcome == "reached"


# --------------------------------------------------------------------------
# Trial matrix
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_setup():
    envs = bench.generate_suite(2, seed=21, bands=(bench.DifficultyBand("easy", 0.34),))
    policies = {"default": None}
    return envs, policies


def test_matrix_counts_and_determinism(tiny_setup, tmp_path):
    envs, policies = tiny_setup
    a = bench.run_matrix(envs, policies, runs_per_cell=3, base_seed=7, workers=1)
    assert all(len(rows) == 3 for rows in a.rows.values())
    b = bench.run_matrix(envs, policies, runs_per_cell=3, base_seed=7, workers=1)
    assert a.rows == b.rows


def test_matrix_seeds_vary_by_run(tiny_setup):
    envs, policies = tiny_setup
    seeds = {bench.run_seed(7, envs[0].name, "default", r) for r in range(4)}
    assert len(seeds) == 4
    starts = {bench.jittered_start(envs[0].grid, s) for s in seeds}
    assert len(starts) == 4


def test_matrix_resumable_and_idempotent(tiny_setup, tmp_path):
    envs, policies = tiny_setup
    path = str(tmp_path / "results.jsonl")
    bench.run_matrix(envs, policies, runs_per_cell=2, base_seed=3, results_path=path, workers=1)
    first = open(path).read()
    # re-running a complete matrix touches nothing
    mtime = os.path.getmtime(path)
    bench.run_matrix(envs, policies, runs_per_cell=2, base_seed=3, results_path=path, workers=1)
    assert open(path).read() == first
    # truncating and resuming reproduces the same file
    lines = first.splitlines()
    with open(path, "w") as fh:
        fh.write("\n".join(lines[:3]) + "\n")
    bench.run_matrix(envs, policies, runs_per_cell=2, base_seed=3, results_path=path, workers=1)
    assert open(path).read() == first


def test_matrix_parallel_matches_serial(tiny_setup, tmp_path):
    envs, policies = tiny_setup
    serial = bench.run_matrix(envs, policies, runs_per_cell=2, base_seed=11, workers=1)
    parallel = bench.run_matrix(envs, policies, runs_per_cell=2, base_seed=11, workers=2)
    assert serial.rows == parallel.rows


# --------------------------------------------------------------------------
# Significance matrix
# --------------------------------------------------------------------------


def synthetic_table(cells):
    table = bench.TrialTable(runs_per_cell=4, timeout_s=50.0)
    for (env, variant), scores in cells.items():
        table.rows[(env, variant)] = [
            {"env": env, "variant": variant, "run": i, "score": s} for i, s in enumerate(scores)
        ]
    return table


def test_significance_zero_for_identical_methods():
    cells = {}
    for env in ("e1", "e2"):
        for variant in ("m1", "m2"):
            cells[(env, variant)] = [10.0, 11.0, 10.5, 10.2]
    names, matrix, _ = bench.significance_matrix(synthetic_table(cells))
    assert np.all(matrix == 0)


def test_significance_counts_environments():
    cells = {
        ("e1", "m1"): [50.0, 50.1, 49.9, 50.0],
        ("e1", "m2"): [10.0, 10.1, 9.9, 10.0],
        ("e2", "m1"): [10.0, 10.2, 9.8, 10.1],
        ("e2", "m2"): [10.0, 10.1, 9.9, 10.2],
    }
    table = synthetic_table(cells)
    assert bench.significance_cell(table, "m1", "m2") == pytest.approx(50.0)
    assert bench.significance_cell(table, "m2", "m1") == pytest.approx(0.0)


def test_significance_antisymmetric_per_environment():
    rng = np.random.default_rng(4)
    cells = {}
    for e in range(6):
        for variant in ("m1", "m2"):
            base = rng.uniform(5, 40)
            cells[(f"e{e}", variant)] = list(base + rng.normal(0, 1.0, 4))
    table = synthetic_table(cells)
    for env in table.env_names:
        a = table.times(env, "m1")
        b = table.times(env, "m2")
        worse_ab = (sum(a) / 4 > sum(b) / 4) and welch_t(a, b).p < 0.05
        worse_ba = (sum(b) / 4 > sum(a) / 4) and welch_t(b, a).p < 0.05
        assert not (worse_ab and worse_ba)


def test_significance_matrix_matches_recount():
    rng = np.random.default_rng(9)
    cells = {}
    for e in range(5):
        for variant in ("m1", "m2", "m3"):
            base = rng.uniform(8, 45)
            cells[(f"e{e}", variant)] = list(base + rng.normal(0, 2.0, 4))
    table = synthetic_table(cells)
    names, matrix, ordering = bench.significance_matrix(table)
    # ordering is worst (highest mean) first
    means = [m for _, m in ordering]
    assert means == sorted(means, reverse=True)
    # recount one entry by hand from the raw rows
    m1, m2 = names[0], names[1]
    count = 0
    for env in table.env_names:
        a = table.times(env, m1)
        b = table.times(env, m2)
        if sum(a) / len(a) > sum(b) / len(b) and welch_t(a, b).p < 0.05:
            count += 1
    assert matrix[0, 1] == pytest.approx(100.0 * count / 5)


def test_report_formats():
    cells = {
        ("e1", "m1"): [50.0, 50.1, 49.9, 50.0],
        ("e1", "m2"): [10.0, 10.1, 9.9, 10.0],
    }
    table = synthetic_table(cells)
    md = bench.format_report(table, fmt="md")
    assert "| variant | mean time (s) |" in md
    csv = bench.format_report(table, fmt="csv")
    assert csv.splitlines()[0] == "variant,mean_time_s"
    with pytest.raises(ValueError):
        bench.format_report(table, fmt="xml")
