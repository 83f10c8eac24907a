import math

import pytest

from speedlab.harness import (RUN_COLUMNS, Cell, ConfigError, ExperimentSpec, accuracy, build_network,
                              generate_observations, paired_observations, rows_to_csv, run_matrix,
                              run_paired, start_background, summarize_rows, t_interval)
from speedlab.stats import analysis_time_of_day, rank_servers


def test_accuracy_examples():
    assert accuracy(95e6, 100e6) == pytest.approx(0.95)
    assert accuracy(0.67e6, 0.5e6) == pytest.approx(1.34)
    assert accuracy(100e6, 100e6) == 1.0
    with pytest.raises(ValueError):
        accuracy(1, 0)


# --- config -------------------------------------------------------------------------------

@pytest.mark.parametrize("text,where,field", [
    ('{\n "sweep": {\n  "rtt_ms": [0, "x"]\n }\n}', "x.json:3", "sweep.rtt_ms.1"),
    ('{"base": {"engine": "triple"}}', "x.json:1", "base.engine"),
    ('{"repetitions": 0}', "x.json:1", "repetitions"),
    ('{"bogus": 1}', "x.json", "<root>"),
])
def test_config_diagnostics(text, where, field):
    with pytest.raises(ConfigError) as ei:
        ExperimentSpec.from_json(text, "x.json")
    msg = str(ei.value)
    assert msg.startswith(where + ":") and f"'{field}'" in msg


def test_config_bad_json_has_position():
    with pytest.raises(ConfigError, match=r"x\.json:2:\d+: invalid JSON"):
        ExperimentSpec.from_json('{\n  "repetitions": ,\n}', "x.json")


def test_empty_grid_rejected():
    for text in ('{"sweep": {}}', '{"sweep": {"rtt_ms": []}}'):
        with pytest.raises(ConfigError):
            ExperimentSpec.from_json(text)


def test_axis_vs_product():
    doc = {"sweep": {"rtt_ms": [0, 50, 100], "loss": [0, 0.01]}, "repetitions": 1}
    assert len(ExperimentSpec.from_dict(doc).cells) == 5  # (10 ms, 0) is shared
    doc["mode"] = "product"
    assert len(ExperimentSpec.from_dict(doc).cells) == 6
    doc["series"] = {"engine": ["single", "adaptive"]}
    spec = ExperimentSpec.from_dict(doc)
    assert len(spec.cells) == 12
    assert [c.key for c in spec.cells] == sorted(c.key for c in spec.cells)


def test_cell_id():
    c = Cell("single", "down", 100e6, 200.0, 0.0, "bbr", 0, "acked")
    assert c.cell_id == "single-down-100000000bps-200ms-loss0-bbr-x0-acked"


# --- matrix -------------------------------------------------------------------------------

def _small_spec(n=2, **sweep):
    return ExperimentSpec.from_dict({"name": "t", "repetitions": n, "base_seed": 7,
                                     "base": {"capacity_bps": 20e6},
                                     "sweep": sweep or {"rtt_ms": [0, 40]}})


def test_one_cell_one_rep_one_row():
    rows = run_matrix(ExperimentSpec.from_dict({"repetitions": 1, "base": {"capacity_bps": 10e6}}))
    assert len(rows) == 1 and rows[0]["seed"] == "1" and rows[0]["error"] == ""


def test_rows_cells_times_n_and_seeds():
    spec = _small_spec(3)
    rows = run_matrix(spec)
    assert len(rows) == len(spec.cells) * 3
    assert [r["seed"] for r in rows] == ["7", "8", "9"] * len(spec.cells)
    assert list(rows[0]) == list(RUN_COLUMNS)


def test_csv_byte_identical_rerun():
    spec = _small_spec(2)
    a = rows_to_csv(run_matrix(spec))
    b = rows_to_csv(run_matrix(spec))
    assert a == b and a.startswith(",".join(RUN_COLUMNS) + "\n")


def test_parallel_matches_serial():
    spec = _small_spec(2)
    assert rows_to_csv(run_matrix(spec, workers=2)) == rows_to_csv(run_matrix(spec))


def test_failure_becomes_error_row(monkeypatch):
    import speedlab.harness as h
    real = h.run_once

    def flaky(cell, seed, policy=None):
        if cell.rtt_ms == 40:
            raise RuntimeError("boom")
        return real(cell, seed, policy)

    monkeypatch.setattr(h, "run_once", flaky)
    rows = run_matrix(_small_spec(2))
    assert len(rows) == 4
    bad = [r for r in rows if r["error"]]
    assert len(bad) == 2 and all("boom" in r["error"] for r in bad)
    summ = summarize_rows(rows)
    assert [s["n_error"] for s in summ] == ["0", "2"]


def test_t_interval():
    m, lo, hi = t_interval([1.0, 2.0, 3.0, 4.0, 5.0])
    # mean 3, sd sqrt(2.5), t(0.975, 4) = 2.776445 from tables
    half = 2.7764451051977987 * math.sqrt(2.5) / math.sqrt(5)
    assert (m, lo, hi) == (3.0, pytest.approx(3 - half), pytest.approx(3 + half))
    m, lo, hi = t_interval([4.0])
    assert m == 4.0 and math.isnan(lo) and math.isnan(hi)


# --- paired tests ---------------------------------------------------------------------------

def test_paired_same_link_within_5pct():
    net = build_network(100e6, 20, 0.0, seed=3)
    rec = run_paired(net, "down", seed=3)
    assert rec.ok
    a, b = rec.report_a.reported_bits_per_s, rec.report_b.reported_bits_per_s
    assert abs(a - b) / max(a, b) <= 0.05
    assert rec.report_a.engine.value != rec.report_b.engine.value


@pytest.mark.parametrize("seed", range(1, 6))
def test_paired_background_recovers(seed):
    net = build_network(100e6, 20, 0.0, seed=seed)
    bg = start_background(net, 1, "bbr", "down", seed=seed)
    rec = run_paired(net, "down", idle_gap_s=5.0, background=bg, seed=seed)
    assert rec.ok
    assert rec.background_pre_b_bps == pytest.approx(rec.background_pre_a_bps, rel=0.10)


def test_paired_zero_gap_warns():
    net = build_network(50e6, 10, 0.0, seed=1)
    with pytest.warns(UserWarning, match="idle gap"):
        rec = run_paired(net, "down", idle_gap_s=0, seed=1, order="single-first")
    assert rec.ok and rec.warnings and rec.order == "single-first"
    obs = paired_observations([rec])
    assert {o.tool for o in obs} == {"adaptive", "single"}
    assert len({(o.household_id, o.direction) for o in obs}) == 1


# --- synthetic household model --------------------------------------------------------------

def test_generator_ground_truth():
    obs, truth = generate_observations(seed=11, weak_server_factor=0.9)
    assert len(truth.degraded) == 10 and len({o.household_id for o in obs}) == 30
    rows = [r for r in analysis_time_of_day(obs, local_tz="America/Chicago")
            if r["tool"] == "single" and r["tested"]]
    hit = {r["household_id"] for r in rows if r["reject"]}
    assert len(hit & set(truth.degraded)) >= 9
    assert len(hit - set(truth.degraded)) <= 2
    res = rank_servers(obs, direction="down")
    assert res.bottom3_fraction(truth.weak_server) >= 0.9


def test_generator_deterministic():
    a, _ = generate_observations(n_households=4, n_degraded=1, seed=2)
    b, _ = generate_observations(n_households=4, n_degraded=1, seed=2)
    assert a == b
