import numpy as np
import pytest

from flare.services.harness import RunLog, RunRecord
from flare.services.plotting import (
    aggregate_curves,
    area_under_curve,
    common_grid,
    final_window_score,
    load_logs,
    plot_curves,
)
from flare.utils.errors import ConfigurationError


def make_log(steps, values, name="v", seed=0):
    return RunLog(name, seed, [RunRecord(env_step=s, eval_return_mean=float(v), eval_return_std=0.0)
                               for s, v in zip(steps, values)])


def test_single_seed_has_zero_band():
    curve = aggregate_curves([make_log([10, 20, 30], [1.0, 2.0, 3.0])])
    assert curve.n_seeds == 1
    assert curve.mean.tolist() == [1.0, 2.0, 3.0]
    assert curve.std.tolist() == [0.0, 0.0, 0.0]


def test_population_std_across_seeds():
    curve = aggregate_curves([make_log([10, 20], [0.0, 2.0], seed=0), make_log([10, 20], [2.0, 6.0], seed=1)])
    assert curve.mean.tolist() == [1.0, 4.0]
    assert curve.std.tolist() == [1.0, 2.0]


def test_mismatched_grids_are_interpolated_inside_overlap():
    a = make_log([0, 10, 20, 30], [0.0, 1.0, 2.0, 3.0])
    b = make_log([5, 15, 25], [0.5, 1.5, 2.5])
    assert common_grid([a, b]).tolist() == [10.0, 20.0]
    curve = aggregate_curves([a, b], "v")
    assert np.allclose(curve.mean, [1.0, 2.0])
    assert np.allclose(curve.std, [0.0, 0.0])


def test_disjoint_grids_are_rejected():
    with pytest.raises(ConfigurationError):
        common_grid([make_log([0, 10], [0, 1]), make_log([20, 30], [0, 1])])


def test_final_window_and_auc():
    assert final_window_score([0.0, 1.0, 2.0, 3.0, 4.0]) == 3.0
    assert final_window_score([5.0]) == 5.0
    assert area_under_curve([0, 10, 20], [0.0, 1.0, 1.0]) == pytest.approx(15.0)
    assert area_under_curve([10], [3.0]) == 0.0
    curve = aggregate_curves([make_log([0, 10, 20, 30], [0.0, 1.0, 2.0, 3.0])])
    assert curve.final_score == 2.0
    assert curve.auc == pytest.approx(45.0)


def test_svg_is_byte_identical_for_same_input(tmp_path):
    logs = {"A": [make_log([10, 20, 30], [1, 2, 3], "A", 0), make_log([10, 20, 30], [2, 2, 5], "A", 1)],
            "B": [make_log([10, 20, 30], [0, 1, 1], "B", 0)]}
    plot_curves(logs, tmp_path / "one.svg", title="t")
    plot_curves(logs, tmp_path / "two.svg", title="t")
    one = (tmp_path / "one.svg").read_bytes()
    assert one == (tmp_path / "two.svg").read_bytes()
    assert b"<svg" in one


def test_load_logs_groups_by_variant(tmp_path):
    for variant in ("FlarePixel", "StateFull"):
        for seed in (0, 1):
            make_log([10, 20], [seed, seed + 1], variant, seed).write_csv(tmp_path / f"{variant}_seed{seed}.csv")
    grouped = load_logs([str(tmp_path / "*.csv")])
    assert sorted(grouped) == ["FlarePixel", "StateFull"]
    assert [log.seed for log in grouped["FlarePixel"]] == [0, 1]


def test_load_logs_without_matches():
    with pytest.raises(ConfigurationError):
        load_logs(["/nonexistent/*.csv"])


def test_load_logs_skips_suite_summaries(tmp_path):
    make_log([10, 20], [1.0, 2.0], "StateFull", 0).write_csv(tmp_path / "StateFull_seed0.csv")
    (tmp_path / "summary.csv").write_text("variant,final_score,final_std,auc,n_seeds\nStateFull,2.0,0.0,15.0,1\n")
    (tmp_path / "verdicts.csv").write_text("verdict,passed,detail\nx,True,\n")
    grouped = load_logs([str(tmp_path / "*.csv")])
    assert list(grouped) == ["StateFull"]


def test_load_logs_with_only_foreign_csvs(tmp_path):
    (tmp_path / "summary.csv").write_text("variant,final_score\n")
    with pytest.raises(ConfigurationError):
        load_logs([str(tmp_path / "*.csv")])
