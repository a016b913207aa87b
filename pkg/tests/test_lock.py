import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from timebin.lock import (
    DriftModel,
    DriftProcess,
    LockConfig,
    LockError,
    LockState,
    PIDGains,
    branch_sign,
    closed_loop_sim,
    effective_visibility,
    error_signal,
    extinction_ratio,
    phase_distance,
    pid_step,
)


def test_extinction_ratio():
    assert extinction_ratio(90, 10) == pytest.approx(0.8)
    with pytest.raises(LockError):
        extinction_ratio(0, 0)


def test_branch_sign_from_history():
    assert branch_sign([(0.0, 0.5), (0.1, 0.6)]) == 1.0
    assert branch_sign([(0.0, 0.5), (0.1, 0.4)]) == -1.0
    assert branch_sign([(0.0, 0.5), (-0.1, 0.6)]) == -1.0
    # no move or no response keeps the previous sign
    assert branch_sign([(0.0, 0.5), (0.0, 0.7)], previous=-1.0) == -1.0
    assert branch_sign([(0.0, 0.5)], previous=-1.0) == -1.0


def test_error_signal():
    h = [(0.0, 0.5), (0.1, 0.4)]
    assert error_signal(h, 100, 25) == pytest.approx(-0.25)
    assert error_signal(h, 0, 5) == pytest.approx(-1e3)
    assert error_signal(h, 0, 0) == 0.0


@given(st.floats(-3.1, 3.1))
def test_phase_distance_inverts_count_ratio(delta):
    # N_l / N_c = cot^2(phi_S / 2) at phi_S = pi + delta
    ratio = math.tan(delta / 2) ** 2
    assert abs(phase_distance(math.copysign(ratio, delta) if delta else 0.0)) == \
        pytest.approx(abs(delta), abs=1e-9)


def test_pid_step_incremental_and_clamped():
    st_ = LockState(gains=PIDGains(kp=1.0, ki=1.0, kd=0.0, integral_limit=0.5), volts_to_rad=2.0)
    pid_step(st_, 1.0, 1.0)
    assert st_.integral == 0.5
    assert st_.bias == pytest.approx((1.0 + 0.5) / 2.0)
    pid_step(st_, 1.0, 1.0)
    assert st_.integral == 0.5
    assert st_.bias == pytest.approx(1.5)
    with pytest.raises(LockError):
        pid_step(st_, 0.0, 0.0)


def test_effective_visibility():
    assert effective_visibility(0.9, math.pi, math.pi) == pytest.approx(0.9)
    assert effective_visibility(1.0, 2.5, math.pi) == pytest.approx(math.sin(1.25) ** 2)


def test_drift_models():
    t = np.arange(0, 100, 0.5)
    rng = np.random.default_rng(0)
    assert np.all(DriftModel(DriftProcess.NONE).sample(t, rng) == 0)
    assert np.all(DriftModel(DriftProcess.STEP, 0.3).sample(t, rng) == 0.3)
    sin = DriftModel(DriftProcess.SINUSOIDAL, 2.0, 10.0).sample(t, rng)
    assert sin[5] == pytest.approx(2.0 * math.sin(2 * math.pi * 2.5 / 10))
    with pytest.raises(LockError):
        DriftModel(time_constant=0.0)


def test_random_walk_scale():
    # increments over one time constant have rms ``magnitude``
    t = np.arange(0, 30 * 4000, 30.0)
    w = DriftModel(DriftProcess.RANDOM_WALK, 0.1, 30.0).sample(t, np.random.default_rng(1))
    assert np.std(np.diff(w)) == pytest.approx(0.1, rel=0.05)


def test_config_validation():
    with pytest.raises(LockError):
        LockConfig(counts_per_interval=0)
    with pytest.raises(LockError):
        LockConfig(interval=-1)


def test_no_drift_stays_at_pi():
    trace = closed_loop_sim(DriftModel(DriftProcess.NONE), LockConfig(duration=30, seed=2))
    assert trace.steady_state_rms() < 0.05
    assert np.all(trace.N_c > 0)


def test_step_drift_is_cancelled():
    trace = closed_loop_sim(DriftModel(DriftProcess.STEP, 0.3),
                            LockConfig(duration=60, use_events=False, seed=3))
    assert trace.steady_state_rms() < 0.05


@pytest.mark.parametrize("start", [0.2, 2.5, 3.8, 6.1])
def test_converges_from_any_start(start):
    trace = closed_loop_sim(DriftModel(DriftProcess.NONE),
                            LockConfig(duration=120, start_phase=start, use_events=False, seed=1))
    assert trace.residual[-20:].max() < 0.1


def test_fast_sinusoid_loses_lock():
    trace = closed_loop_sim(DriftModel(DriftProcess.SINUSOIDAL, 2.0, 3.0),
                            LockConfig(duration=60, use_events=False))
    assert trace.steady_state_rms() > 0.5


def test_trace_csv(tmp_path):
    trace = closed_loop_sim(DriftModel(DriftProcess.NONE),
                            LockConfig(duration=2, use_events=False))
    trace.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "t_s,phi_s_true_rad,R,bias_V,N_c,N_l"
    assert len(lines) == 5


def test_deterministic_given_seed():
    cfg = LockConfig(duration=10, seed=9)
    a = closed_loop_sim(DriftModel(), cfg)
    b = closed_loop_sim(DriftModel(), cfg)
    np.testing.assert_array_equal(a.phi_s, b.phi_s)
