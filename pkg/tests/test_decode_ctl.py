import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phasedvfs.decode_ctl import (
    Bucket,
    DecodeController,
    DecodeCtlConfig,
    FreqBandTable,
    TbtWindow,
    TpsWindow,
    band_adapt_tick,
    build_band_table,
    coarse_tick,
    fine_tick,
    initial_state,
)
from phasedvfs.gpu_model import DecodeStepModel, GpuProfile, default_profile
from phasedvfs.metrics import audit_decision_log, quantile

PROFILE = default_profile()
CFG = DecodeCtlConfig()


def simple_table():
    # three buckets: (0,100] -> 600, (100,200] -> 900, (200,inf) -> 1200
    return FreqBandTable([Bucket(0, 100, 600), Bucket(100, 200, 900), Bucket(200, math.inf, 1200)], 15, 210, 1410)


def test_tps_window_counts_and_spreads():
    w = TpsWindow(200.0)
    w.add_step(0.0, 100.0, 10)
    w.add_step(100.0, 200.0, 10)
    assert w.tps(200.0) == pytest.approx(100.0)
    # half of the first step falls out of (50, 250]
    assert w.tps(250.0) == pytest.approx((5 + 10) / 0.2)
    # in-flight step credited pro rata
    assert w.tps(200.0, partial=(200.0, 300.0, 10)) == pytest.approx(100.0)
    w2 = TpsWindow(200.0)
    w2.add_step(50.0, 50.0, 4)
    assert w2.tps(100.0) == pytest.approx(20.0)


def test_tbt_window_p95_nearest_rank():
    w = TbtWindow(256)
    assert w.p95() is None
    w.extend(range(1, 101))
    assert w.p95() == 95
    w.extend([1000] * 300)
    assert len(w) == 256 and w.p95() == 1000


def test_band_table_memory_bound_profile_picks_f_min():
    prof = GpuProfile(PROFILE.grid, PROFILE.prefill, DecodeStepModel(30.0, 0.35, 0.0, 0.0), PROFILE.power)
    table = build_band_table(prof, CFG.tps_levels, 100.0)
    assert set(table.f_opts()) == {210}


def test_band_table_default_non_decreasing():
    table = build_band_table(PROFILE, CFG.tps_levels, 90.0, max_batch=128)
    f = table.f_opts()
    assert all(b >= a for a, b in zip(f, f[1:]))
    assert f[0] < f[-1]
    assert not table.diagnostics


def test_band_table_infeasible_bucket():
    table = build_band_table(PROFILE, CFG.tps_levels, 20.0)
    assert table.f_opts()[-1] == 1410 and table.diagnostics


def test_band_table_is_energy_argmin_over_feasible():
    from phasedvfs.decode_ctl import decode_energy_at_load
    table = build_band_table(PROFILE, [100.0, 300.0, 500.0], 90.0)
    for b in table.buckets[:-1]:
        feas = [(decode_energy_at_load(PROFILE, b.tps_hi, f)[1], f) for f in PROFILE.grid.freqs
                if decode_energy_at_load(PROFILE, b.tps_hi, f) and decode_energy_at_load(PROFILE, b.tps_hi, f)[0] <= 90]
        assert b.f_opt == min(feas)[1]


def test_bucket_boundaries():
    t = simple_table()
    assert t.bucket_of(0) == 0 and t.bucket_of(100) == 0 and t.bucket_of(100.01) == 1
    assert t.bucket_of(200) == 1 and t.bucket_of(1e9) == 2
    assert t.band(0) == (585, 600, 615)
    edge = FreqBandTable([Bucket(0, math.inf, 210)], 15, 210, 1410)
    assert edge.band(0) == (210, 210, 225)


def test_coarse_hysteresis_reset():
    t = simple_table()
    s = initial_state(0, t)
    coarse_tick(s, t, 200, 150, CFG)
    coarse_tick(s, t, 400, 150, CFG)
    row = coarse_tick(s, t, 600, 50, CFG)
    assert s.current_bucket == 0 and s.consecutive_count == 0 and row[-1] == "coarse_hold"
    assert s.target_band == (585, 615)


def test_coarse_commit_after_three():
    t = simple_table()
    s = initial_state(0, t)
    actions = [coarse_tick(s, t, 200 * k, 150, CFG)[-1] for k in range(1, 4)]
    assert actions == ["coarse_pending", "coarse_pending", "coarse_commit"]
    assert s.current_bucket == 1 and s.target_band == (885, 915)


def test_coarse_pending_bucket_change_restarts_count():
    t = simple_table()
    s = initial_state(0, t)
    coarse_tick(s, t, 200, 150, CFG)
    coarse_tick(s, t, 400, 150, CFG)
    coarse_tick(s, t, 600, 250, CFG)
    assert s.pending_bucket == 2 and s.consecutive_count == 1 and s.current_bucket == 0


@pytest.mark.parametrize("p95,delta", [(120.0, 15), (50.0, -15), (80.0, 0)])
def test_fine_rule(p95, delta):
    t = FreqBandTable([Bucket(0, math.inf, 900)], 30, 210, 1410)  # wide band so the rule is not clamped
    s = initial_state(0, t)
    cmd, row = fine_tick(s, 20.0, p95, CFG)
    assert cmd - 900 == delta


def test_fine_empty_window_holds():
    t = simple_table()
    s = initial_state(0, t)
    cmd, row = fine_tick(s, 20.0, None, CFG)
    assert cmd == 600 and row[-1] == "fine_nodata" and s.adjustment_log == []


def test_fine_clamps_to_band_and_logs_hit():
    t = simple_table()
    s = initial_state(0, t)
    cmds = [fine_tick(s, 20.0 * k, 150.0, CFG)[0] for k in range(1, 4)]
    assert cmds == [615, 615, 615]
    assert [h for _, _, h in s.adjustment_log] == [False, True, True]


def test_margin_decode_scales_slo():
    t = FreqBandTable([Bucket(0, math.inf, 900)], 30, 210, 1410)
    s = initial_state(0, t, t_slo=100.0, margin_decode=2.0)
    # 120 / 200 = 0.6 < 0.65 -> down
    assert fine_tick(s, 20.0, 120.0, CFG)[0] == 885


def test_band_slews_within_rate_limit():
    t = simple_table()
    s = initial_state(0, t)
    for k in range(1, 4):
        coarse_tick(s, t, 200 * k, 250, CFG)
    assert s.target_band == (1185, 1215)
    prev = s.set_point
    for k in range(1, 60):
        cmd, row = fine_tick(s, 20.0 * k, 80.0, CFG)
        lo, hi = row[5], row[6]
        assert lo <= cmd <= hi
        assert abs(cmd - prev) <= CFG.step_mhz
        prev = cmd
    assert s.band == (1185, 1215) and 1185 <= s.set_point <= 1215


def test_adapt_shift_up():
    t = simple_table()
    s = initial_state(0, t)
    s.adjustment_log = [(k, 1, True) for k in range(9)] + [(9, 0, False)]
    row = band_adapt_tick(s, t, 6000.0, CFG)
    assert row[-1] == "adapt_up" and t.buckets[0].f_opt == 615 and s.adjustment_log == []


def test_adapt_below_threshold():
    t = simple_table()
    s = initial_state(0, t)
    s.adjustment_log = [(k, 1, True) for k in range(7)] + [(k, -1, False) for k in range(3)]
    assert band_adapt_tick(s, t, 6000.0, CFG)[-1] == "adapt_none"
    assert t.buckets[0].f_opt == 600


def test_adapt_no_evidence():
    t = simple_table()
    s = initial_state(0, t)
    s.adjustment_log = [(k, 0, False) for k in range(10)]
    assert band_adapt_tick(s, t, 6000.0, CFG)[-1] == "adapt_none"


def test_adapt_shift_down():
    t = simple_table()
    s = initial_state(0, t)
    s.adjustment_log = [(k, -1, True) for k in range(10)]
    band_adapt_tick(s, t, 6000.0, CFG)
    assert t.buckets[0].f_opt == 585 and s.target_band == (570, 600)


def test_config_limits():
    with pytest.raises(ValueError):
        DecodeCtlConfig(max_step_mhz=45)
    with pytest.raises(ValueError):
        DecodeCtlConfig(step_mhz=40, max_step_mhz=30)
    with pytest.raises(ValueError):
        DecodeCtlConfig(tps_levels=(100.0, 50.0))


telemetry = st.lists(
    st.tuples(st.sampled_from(["fine", "coarse", "adapt"]), st.floats(0, 400), st.floats(0, 300)),
    min_size=1, max_size=300,
)


@settings(max_examples=150, deadline=None)
@given(telemetry)
def test_safety_envelope_under_arbitrary_telemetry(events):
    table = build_band_table(PROFILE, CFG.tps_levels, 90.0, max_batch=128)
    ctl = DecodeController(0, table, CFG, 100.0, 0.9)
    t = 0.0
    for kind, tps, p95 in events:
        t += 20.0
        if kind == "fine":
            ctl.tbt_window.add(p95)
            cmd = ctl.fine(t)
            assert 210 <= cmd <= 1410
        elif kind == "coarse":
            ctl.tps_window.add_step(t - 20.0, t, int(tps / 50))
            ctl.coarse(t)
        else:
            ctl.adapt(t)
    assert audit_decision_log(ctl.log, 210, 1410, max_step=CFG.step_mhz) == []


@settings(max_examples=150, deadline=None)
@given(st.lists(st.floats(0, 300), min_size=1, max_size=50), st.floats(0, 300), st.floats(0, 100))
def test_monotone_response(history, p95, extra):
    def final_command(last):
        t = simple_table()
        s = initial_state(0, t)
        for k, h in enumerate(history):
            fine_tick(s, 20.0 * k, h, CFG)
        return fine_tick(s, 20.0 * len(history), last, CFG)[0]

    assert final_command(p95 + extra) >= final_command(p95)


@settings(max_examples=50, deadline=None)
@given(telemetry)
def test_controller_is_deterministic(events):
    def drive():
        table = build_band_table(PROFILE, CFG.tps_levels, 90.0, max_batch=128)
        ctl = DecodeController(0, table, CFG, 100.0, 0.9)
        for k, (kind, tps, p95) in enumerate(events):
            t = 20.0 * (k + 1)
            ctl.tbt_window.add(p95)
            ctl.tps_window.add_step(t - 20.0, t, int(tps / 50))
            getattr(ctl, kind)(t)
        return ctl.log

    assert drive() == drive()


def test_controllers_own_table_copies():
    table = simple_table()
    a = DecodeController(0, table, CFG)
    b = DecodeController(1, table, CFG)
    a.table.shift(0, 1)
    assert b.table.buckets[0].f_opt == 600 and table.buckets[0].f_opt == 600


def test_tbt_window_quantile_matches_metrics():
    w = TbtWindow(256)
    vals = [float((k * 37) % 101) for k in range(300)]
    w.extend(vals)
    assert w.p95() == quantile(vals[-256:], 0.95)
