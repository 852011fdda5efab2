import math

import numpy as np
import pytest

from vesselscreen.centerline import CenterlineEstimate
from vesselscreen.config import (
    ConfigError,
    NoiseSpec,
    PhantomSpec,
    ScenarioConfig,
    dump_scenario,
    load_scenario,
    scenario_from_dict,
    scenario_to_dict,
)
from vesselscreen.control import ImpedanceParams
from vesselscreen.geometry import ImageCalibration, Pose
from vesselscreen.screening import (
    BATCH_COLUMNS,
    ERROR_NAMES,
    batch_runs,
    compute_metrics,
    convergence_time,
    run_screening,
    run_seed,
)
from vesselscreen import traceio

CAL = ImageCalibration(L_p=37.5, H=256)
QUIET = NoiseSpec(0.0, 0.0, 0.0, 0.0)


def probe(y_axis):
    y = np.asarray(y_axis, float)
    y /= np.linalg.norm(y)
    z = np.array([0.0, 0.0, -1.0])
    z = z - (z @ y) * y
    z /= np.linalg.norm(z)
    return Pose.from_axes(np.cross(y, z), y, z)


# --- metrics ------------------------------------------------------------------------


def test_aligned_probe_has_zero_orientation_error():
    m = compute_metrics(probe([0, 1, 0]), None, None, [0, 1, 0], 7.5, CAL)
    assert m.e_or_rea == 0.0
    assert math.isnan(m.e_or_com) and math.isnan(m.e_ce) and math.isnan(m.e_ra)


def test_orientation_error_is_undirected():
    m = compute_metrics(probe([0, -1, 0]), None, None, [0, 1, 0], 7.5, CAL)
    assert m.e_or_rea == pytest.approx(0.0, abs=1e-9)


def test_estimate_at_thirty_degrees():
    est = CenterlineEstimate(np.tan(np.radians(30.0)), 0.0, 7.0, 1e-3)
    m = compute_metrics(probe([0, 1, 0]), est, None, [0, 0, 1], 7.5, CAL)
    assert m.e_or_com == pytest.approx(30.0, abs=1e-9)
    assert m.e_ra == pytest.approx(-0.5)


@pytest.mark.parametrize("x_c,want", [(128 + 32, 4.6875), (0.0, 18.75), (118.0, 1.46484375)])
def test_centering_error_in_mm(x_c, want):
    m = compute_metrics(probe([0, 1, 0]), None, x_c, [0, 1, 0], 7.5, CAL)
    assert m.e_ce == pytest.approx(want, abs=1e-12)


def test_convergence_time_basic():
    t = np.arange(0, 5, 0.01)
    err = np.where(t < 1.234, 10.0, 1.0)
    assert convergence_time(t, err, 5.0, 1.0) == pytest.approx(1.24)


def test_convergence_time_resets_on_excursion():
    t = np.arange(0, 5, 0.01)
    err = np.where(t < 1.0, 10.0, 1.0)
    err[(t > 1.5) & (t < 1.6)] = 9.0
    assert convergence_time(t, err, 5.0, 1.0) == pytest.approx(1.6)


def test_convergence_time_needs_full_hold():
    t = np.arange(0, 2, 0.01)
    err = np.where(t < 1.5, 10.0, 0.0)
    assert math.isnan(convergence_time(t, err, 5.0, 1.0))


def test_convergence_time_nan_counts_as_outside():
    t = np.arange(0, 3, 0.01)
    err = np.where(t < 0.5, np.nan, 0.0)
    assert convergence_time(t, err, 5.0, 1.0) == pytest.approx(0.5)


# --- config -------------------------------------------------------------------------


def test_config_yaml_roundtrip(tmp_path):
    cfg = ScenarioConfig(
        seed=9,
        initial_offset_deg=30.0,
        phantom=PhantomSpec(radius_mm=10.0, bumps=((40.0, 0.5, 8.0),), radius_profile="bump"),
        impedance=ImpedanceParams(K_m=[800, 800, 250, 15, 15, 1.5]),
    )
    back = load_scenario(dump_scenario(cfg, tmp_path / "s.yaml"))
    assert scenario_to_dict(back) == scenario_to_dict(cfg)


def test_partial_config_takes_defaults():
    cfg = scenario_from_dict({"seed": 4, "noise": {"outlier_rate": 0.0}})
    assert cfg.seed == 4 and cfg.noise.outlier_rate == 0.0
    assert cfg.noise.dropout_rate == NoiseSpec().dropout_rate


@pytest.mark.parametrize(
    "data",
    [
        {"sed": 1},
        {"noise": {"sigma": 0.1}},
        {"impedance": {"K": [1, 2, 3, 4, 5, 6]}},
        {"initial_offset_deg": 60.0},
        {"control_rate_hz": 75.0},
        {"impedance": {"damping_ratio": 3.0}},
    ],
)
def test_invalid_config_rejected(data):
    with pytest.raises(ConfigError):
        scenario_from_dict(data)


# --- closed loop --------------------------------------------------------------------


@pytest.fixture(scope="module")
def aligned_quiet():
    return run_screening(ScenarioConfig(seed=3, duration_s=3.0, noise=QUIET))


def test_aligned_noiseless_run(aligned_quiet):
    cols = aligned_quiet.columns
    assert aligned_quiet.status == "ok"
    assert np.nanmax(cols["e_or_rea"]) < 1.0
    # centered once the first lateral correction has played out
    assert np.nanmax(cols["e_ce"][cols["t"] >= 0.5]) < 0.1


def test_no_march_before_buffer_full(aligned_quiet):
    cols = aligned_quiet.columns
    before = cols["buffer_full"] == 0
    assert before.sum() >= 9 * 2  # nine frames, two ticks each
    assert not np.any(cols["marching"][before])
    y0 = aligned_quiet.config.phantom.direction
    moved = np.stack([cols["px"], cols["py"], cols["pz"]], axis=1)[before] - [cols["px"][0], cols["py"][0], cols["pz"][0]]
    assert np.max(np.abs(moved @ np.asarray(y0))) < 1e-9
    assert np.ptp(cols["target_x"][before]) == 0 and np.ptp(cols["target_y"][before]) == 0


def test_header_echoes_stiffness(aligned_quiet):
    assert aligned_quiet.header["K_m"] == "1000 1000 300 20 20 2"
    assert "vector sum" in aligned_quiet.header["command_blend"]


def test_run_is_deterministic(tmp_path):
    cfg = ScenarioConfig(seed=11, duration_s=1.0, initial_offset_deg=20.0)
    a = traceio.write_trace(run_screening(cfg), tmp_path / "a.csv")
    b = traceio.write_trace(run_screening(cfg), tmp_path / "b.csv")
    assert a.read_bytes() == b.read_bytes()
    c = traceio.write_trace(run_screening(cfg.with_(seed=12)), tmp_path / "c.csv")
    assert a.read_bytes() != c.read_bytes()


@pytest.mark.parametrize("offset,sign", [(22.5, 1), (45.0, -1), (45.0, 1)])
def test_noiseless_run_converges(offset, sign):
    trace = run_screening(ScenarioConfig(seed=5, duration_s=3.0, noise=QUIET, initial_offset_deg=offset, offset_sign=sign))
    cols = trace.columns
    late = cols["t"] >= 2.0
    assert trace.status == "ok"
    assert np.max(cols["e_or_rea"][late]) < 1.0
    assert np.max(cols["e_ce"][late]) < 0.5
    assert np.max(np.abs(cols["e_ra"][late])) < 0.2


def test_noiseless_radius_ten():
    trace = run_screening(ScenarioConfig(seed=2, noise=QUIET, phantom=PhantomSpec(radius_mm=10.0)))
    assert len(trace) == 660  # 330 frames at two ticks per frame
    assert trace.summary["e_ra_mean"] <= 1.5


def test_lost_vessel_aborts_with_partial_trace():
    cfg = ScenarioConfig(seed=1, duration_s=3.0, initial_lateral_offset_mm=40.0, noise=QUIET)
    trace = run_screening(cfg)
    assert trace.status == "lost_target"
    assert 1.0 < trace.columns["t"][-1] < 1.1
    assert trace.summary["status"] == "lost_target"


def test_gate_freezes_the_probe_in_the_loop():
    trace = run_screening(ScenarioConfig(seed=1, duration_s=1.0, impedance=ImpedanceParams(force_limit=3.0)))
    cols = trace.columns
    k = int(np.argmax(cols["halted"] > 0))
    assert cols["halted"][k] == 1 and cols["force_N"][k] > 3.0
    assert np.all(cols["force_N"][:k] <= 3.0)
    assert np.all(cols["halted"][k:] == 1)
    for key in ("px", "py", "pz", "rx", "ry", "rz"):
        assert np.ptp(cols[key][k:]) == 0


# --- batches -----------------------------------------------------------------------


def test_run_seeds_are_distinct():
    seeds = {run_seed(0, i, r) for i in range(4) for r in range(10)}
    assert len(seeds) == 40


def test_single_run_batch_equals_run_summary():
    cfg = ScenarioConfig(seed=8, duration_s=2.0)
    result = batch_runs(cfg, [15.0], 1)
    (run,) = result.runs()
    (agg,) = result.aggregates()
    direct = run_screening(cfg.with_(seed=run["seed"], initial_offset_deg=15.0)).summary
    for key in ["t_or", "t_ce", "t_ra", "n_steady"] + [f"{e}_{s}" for e in ERROR_NAMES for s in ("mean", "sd", "median", "max")]:
        assert agg[key] == pytest.approx(direct[key], nan_ok=True), key
        assert run[key] == pytest.approx(direct[key], nan_ok=True), key


def test_batch_table_shape(tmp_path):
    result = batch_runs(ScenarioConfig(seed=1, duration_s=0.4), [0, 15, 30, 45], 2)
    assert len(result.runs()) == 8 and len(result.aggregates()) == 4
    path = traceio.write_batch(result.rows, tmp_path / "batch.csv")
    table = traceio.read_table(path)
    assert len(table) == 12
    assert list(table[0]) == list(BATCH_COLUMNS)


def test_aborted_runs_are_counted_not_pooled():
    cfg = ScenarioConfig(seed=1, duration_s=1.5, initial_lateral_offset_mm=40.0, noise=QUIET)
    result = batch_runs(cfg, [0.0], 2)
    (agg,) = result.aggregates()
    assert agg["n_aborted"] == 2 and agg["n_runs"] == 0 and agg["status"] == "all_aborted"
    assert math.isnan(agg["e_or_rea_mean"])


def test_repeats_must_be_positive():
    with pytest.raises(ValueError):
        batch_runs(ScenarioConfig(), [0.0], 0)
