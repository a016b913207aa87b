import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from timebin.eventsim import (
    ConfigError,
    PulseClock,
    SettingSchedule,
    SimConfig,
    TagStream,
    run_simulation,
    schedule_settings,
    simulate_tables,
)
from timebin.optics import OpticalLayout
from timebin.qcore import Scheme


def fingerprint(a: TagStream, b: TagStream) -> str:
    h = hashlib.sha256()
    for arr in (a.ticks, b.ticks, a.channel, b.channel):
        h.update(arr.tobytes())
    return h.hexdigest()


def test_frozen_small_run():
    a, b, _ = run_simulation(SimConfig(pair_prob=0.01, duration=1e-3, seed=7), OpticalLayout())
    assert (len(a), len(b)) == (376, 388)
    assert a.ticks[:5].tolist() == [23479, 74522, 91343, 113597, 197253]
    assert fingerprint(a, b) == "b323045a9b295e4bc4ad38de01bd9a25d5f5af13ecbf49307588d344ced92b80"


@pytest.mark.parametrize("field, value", [
    ("pair_prob", 1.5), ("efficiency", -0.1), ("rep_rate", 0.0), ("jitter_sigma", -1e-12),
    ("dark_rate", -1.0), ("seed", -1), ("tagger_resolution", 0.0), ("block_pulses", 0),
])
def test_config_validation(field, value):
    with pytest.raises(ConfigError, match=field):
        SimConfig(**{field: value})


def test_schedule_mapping():
    s = schedule_settings([(0.0, 1.0, 0.1), (2.0, 3.0, 0.2)], 76e6)
    assert s.starts.tolist() == [0, 7_600_000]
    assert s.n_pulses == 22_800_000
    assert s.index_of(np.array([0, 7_599_999, 7_600_000])).tolist() == [0, 0, 1]
    assert SettingSchedule.from_dict(s.to_dict()) == s
    with pytest.raises(ConfigError):
        schedule_settings([])
    with pytest.raises(ConfigError):
        schedule_settings([(0.0, 0.0, 0.0)])


def test_pulse_clock_roundtrip_and_offsets():
    sched = schedule_settings([(0.0, 0.0, 1e-6), (1.0, 1.0, 1e-6)])
    clock = PulseClock(76e6, 7e-9, 81e-12, sched.n_pulses, 3e-9, sched)
    assert PulseClock.from_dict(clock.to_dict()) == clock
    ticks = np.round((7e-9 + np.array([0, 10, 100]) / 76e6 + 3e-9) / 81e-12).astype(np.int64)
    assert clock.pulse_index(ticks).tolist() == [0, 10, 100]
    np.testing.assert_allclose(clock.offset_from_center(ticks), 3e-9, atol=81e-12)
    assert clock.setting_index(ticks).tolist() == [0, 0, 1]


def test_invariant_to_worker_count():
    cfg = SimConfig(pair_prob=0.02, duration=2e-3, block_pulses=10_000, seed=3, dark_rate=1e4)
    ref = fingerprint(*run_simulation(cfg, OpticalLayout(phi_a=0.4))[:2])
    for workers in (2, 5):
        assert fingerprint(*run_simulation(cfg, OpticalLayout(phi_a=0.4), workers=workers)[:2]) == ref


def test_streams_sorted_and_seed_dependent():
    a, b, _ = run_simulation(SimConfig(pair_prob=0.05, duration=1e-3, seed=1), OpticalLayout())
    assert a.is_sorted() and b.is_sorted()
    a2, b2, _ = run_simulation(SimConfig(pair_prob=0.05, duration=1e-3, seed=2), OpticalLayout())
    assert fingerprint(a, b) != fingerprint(a2, b2)


def test_detection_rate_matches_efficiency():
    cfg = SimConfig(pair_prob=0.01, duration=0.05, efficiency=0.3, jitter_sigma=0.0)
    a, b, _ = run_simulation(cfg, OpticalLayout())
    n_pairs = 0.05 * 76e6 * 0.01
    for s in (a, b):
        assert abs(len(s) - 0.3 * n_pairs) < 5 * math.sqrt(0.3 * n_pairs)


def test_noise_free_active_switch_has_only_central_slot():
    cfg = SimConfig(pair_prob=0.01, duration=0.02, jitter_sigma=0.0)
    a, _, clock = run_simulation(cfg, OpticalLayout(scheme=Scheme.ACTIVE_SWITCH))
    off = clock.offset_from_center(a.ticks)
    assert np.all(np.abs(off) < 1e-9)


def test_dark_counts_rate():
    cfg = SimConfig(pair_prob=0.0, duration=0.1, dark_rate=1e4)
    a, b, _ = run_simulation(cfg, OpticalLayout())
    # two channels per party
    for s in (a, b):
        assert abs(len(s) - 2e3) < 5 * math.sqrt(2e3)
        assert set(np.unique(s.channel).tolist()) <= {0, 1, 2, 3}


def test_dead_time_enforced_per_channel():
    cfg = SimConfig(pair_prob=0.5, duration=2e-4, dead_time=50e-9, jitter_sigma=0.0)
    a, _, _ = run_simulation(cfg, OpticalLayout())
    dead = round(50e-9 / 81e-12)
    for ch in (0, 1):
        assert np.all(np.diff(a.ticks[a.channel == ch]) >= dead)


def test_table_validation_and_overflow():
    sched = schedule_settings([(0.0, 0.0, 1e-4)])
    with pytest.raises(ConfigError):
        simulate_tables(SimConfig(), sched, [np.zeros((3, 2, 3, 2))])
    with pytest.raises(ConfigError):
        simulate_tables(SimConfig(), sched, [np.ones((2, 2))])
    huge = schedule_settings([(0.0, 0.0, 1e10)], 1e9)
    with pytest.raises(ConfigError, match="overflow"):
        simulate_tables(SimConfig(rep_rate=1e9, tagger_resolution=1e-12), huge,
                        [np.ones((3, 2, 3, 2))])


def test_merge_orders_by_time_then_channel():
    s1 = TagStream(np.array([1, 0], np.uint8), np.array([5, 9]), 1e-12)
    s2 = TagStream(np.array([0, 3], np.uint8), np.array([5, 7]), 1e-12)
    m = TagStream.merge([s1, s2], 1e-12)
    assert m.ticks.tolist() == [5, 5, 7, 9]
    assert m.channel.tolist() == [0, 1, 3, 0]
    assert m.outcome().tolist() == [1, -1, -1, 1]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.001, 0.2))
def test_tags_land_on_their_slot_without_jitter(seed, p):
    cfg = SimConfig(pair_prob=p, duration=2e-5, jitter_sigma=0.0, seed=seed)
    a, b, clock = run_simulation(cfg, OpticalLayout())
    for s in (a, b):
        off = clock.offset_from_center(s.ticks) / cfg.delta_t
        assert np.all(np.abs(off - np.rint(off)) < 0.05)
        assert np.all(np.abs(np.rint(off)) <= 1)
