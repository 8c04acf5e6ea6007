import math
import statistics

import numpy as np
import pytest

from earlyloc.bench import (
    DEPTH_COLUMNS,
    TIMING_COLUMNS,
    CurvePoint,
    SweepSpec,
    TimingStats,
    ci95_halfwidth,
    compare_backends,
    depth_study,
    emit_csv,
    read_csv,
    sweep_columns,
    sweep_threshold,
    theta_range,
    time_inference,
)
from earlyloc.exitnet import ExitPolicy, HyperParams, UncertaintyMethod
from earlyloc.fingerprint import split, synth_generate


def test_default_grid_has_25_points():
    grid = theta_range(0.01, 0.50, 0.02)
    assert len(grid) == 25
    assert grid[0] == 0.01 and grid[-1] == 0.49
    assert theta_range(0.1, 0.9, 0.1)[-1] == 0.9
    assert theta_range(0.3, 0.3, 0.1) == (0.3,)
    with pytest.raises(ValueError):
        theta_range(0.1, 0.5, 0.0)
    with pytest.raises(ValueError):
        theta_range(0.5, 0.1, 0.1)


def test_sweep_spec_validation():
    assert SweepSpec.from_range("entropy", 0.01, 0.50, 0.02).method is UncertaintyMethod.ENTROPY
    with pytest.raises(ValueError):
        SweepSpec("margin", ())
    with pytest.raises(ValueError):
        SweepSpec("ratio", (0.5,))


def test_sweep_order_and_extremes(trained_model, desk_data):
    _, (_, _, test) = desk_data
    base_acc = float((trained_model.baseline_predict(test.images()) == test.labels).mean())
    points = sweep_threshold(trained_model, SweepSpec("margin", (0.0, 0.5, 1.0)), test)
    assert [p.theta for p in points] == [0.0, 0.5, 1.0]
    # margin 1.0 never passes on float64 softmax outputs here
    assert points[-1].accuracy == base_acc and points[-1].exit_rates[-1] == 1.0
    assert points[0].mean_macs == trained_model.segment_macs[0] + trained_model.branch_macs[0]


def test_exit2_only_sweep(trained_model, desk_data):
    _, (_, _, test) = desk_data
    pts = sweep_threshold(trained_model, SweepSpec("margin", (0.0,), (False, True)), test)
    assert pts[0].exit_rates == (0.0, 1.0, 0.0)
    assert pts[0].mean_macs == sum(trained_model.segment_macs[:2]) + trained_model.branch_macs[1]


def test_emit_csv_roundtrip(tmp_path):
    pts = [CurvePoint(0.01 + 0.02 * k, "entropy", 0.9 + k / 1000, None, 1e5 / 3 + k, 123.456, (0.1, 0.2, 0.7))
           for k in range(25)]
    path = emit_csv(pts, tmp_path / "s.csv", sweep_columns(2))
    assert len(path.read_text().splitlines()) == 26
    back = read_csv(path)
    for p, row in zip(pts, back):
        assert abs(row["theta"] - p.theta) <= 1e-9 and abs(row["mean_macs"] - p.mean_macs) <= 1e-9
        assert row["error_m"] is None and row["exit2_rate"] == 0.2 and row["final_rate"] == 0.7
    assert list(back[0])[:9] == sweep_columns(2)


def test_emit_csv_empty(tmp_path):
    path = emit_csv([], tmp_path / "e.csv", TIMING_COLUMNS)
    assert path.read_text().splitlines() == [",".join(TIMING_COLUMNS)]
    with pytest.raises(ValueError):
        emit_csv([], tmp_path / "e2.csv")


def test_ci_formula():
    values = [float(v) for v in np.random.default_rng(0).normal(100, 5, 100)]
    assert ci95_halfwidth(values) == pytest.approx(1.96 * statistics.stdev(values) / math.sqrt(100))
    with pytest.raises(ValueError):
        ci95_halfwidth([1.0])


def test_time_inference(trained_model, desk_data):
    _, (_, _, test) = desk_data
    stats = time_inference(trained_model, ExitPolicy.all_off(2), test, repetitions=4, max_samples=10)
    assert stats.n == 4 and len(stats.samples_ns) == 4 and stats.mean_ns > 0
    assert stats.ci95_ns == pytest.approx(ci95_halfwidth(stats.samples_ns))
    assert stats.as_row()["policy"] == "e1=off,e2=off"
    with pytest.raises(ValueError):
        time_inference(trained_model, ExitPolicy.all_off(2), test, repetitions=1)
    with pytest.raises(ValueError):
        time_inference(trained_model, ExitPolicy.all_off(2), test.subset([]), repetitions=3)


def test_timing_order_follows_mac_order(trained_model, desk_data):
    _, (_, _, test) = desk_data
    full = time_inference(trained_model, ExitPolicy.all_off(2), test, repetitions=5, max_samples=40)
    early = time_inference(trained_model, ExitPolicy.uniform(2, "margin", 0.0), test, repetitions=5, max_samples=40)
    # always-exit runs ~10x fewer MACs than the full backbone
    assert early.mean_ns < full.mean_ns


def test_depth_study(tmp_path):
    ds = synth_generate(4, 16, 10, seed=0)
    train, _, test = split(ds, (0.6, 0.2, 0.2), seed=0)
    hp = HyperParams(lr=0.1, epochs=2, seed=0)
    a = depth_study([1, 2, 3], train, test, hp, filters=(4, 8, 8), timing_samples=5)
    b = depth_study([1, 2, 3], train, test, hp, filters=(4, 8, 8), timing_samples=5)
    assert [r.macs for r in a] == sorted({r.macs for r in a})
    assert [r.accuracy for r in a] == [r.accuracy for r in b]
    path = emit_csv(a, tmp_path / "d.csv", DEPTH_COLUMNS)
    assert [row["depth"] for row in read_csv(path)] == [1, 2, 3]


def test_compare_backends_reports_both():
    rows = compare_backends(shapes=((1, 6, 2, 3),), repeats=2)
    assert rows[0]["python_fwd_us"] > 0
    assert set(rows[0]) >= {"compiled_fwd_us", "compiled_bwd_us", "python_fwd_us", "python_bwd_us"}
